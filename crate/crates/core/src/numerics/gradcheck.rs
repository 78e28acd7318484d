//! Central finite-difference oracle for analytic gradients.

use alloc::vec::Vec;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over the checked coordinates.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, flat index)` of the coordinate with the largest relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    libm::fabs(a - n) / libm::fabs(a).max(libm::fabs(n)).max(1e-8)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Checks `d f / d inputs` at the given `(input, flat index)` coordinates,
/// or at every coordinate of every input when `coords` is `None`.
pub fn finite_diff_check_inputs<F>(
    f: F,
    inputs: &[Tensor<f64>],
    coords: Option<&[(usize, usize)]>,
    eps: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| alloc::vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i][j];
        let rel = rel_err(a, numeric);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (i, j);
        }
        report.max_abs_err = report.max_abs_err.max(libm::fabs(a - numeric));
        report.checked += 1;
    }
    Ok(report)
}

/// Maximum relative error between analytic and central-difference gradients
/// of the scalar function `f` at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check_inputs(|g, vars| f(g, vars[0]), core::slice::from_ref(x), None, eps)
        .map(|r| r.max_rel_err)
}
