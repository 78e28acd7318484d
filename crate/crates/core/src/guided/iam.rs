use alloc::format;
use alloc::vec::Vec;

use super::plan::{ascending_order, ReallocationPlan};
use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Combines each run of `r` gathered tokens with one length-`r` weight
/// vector shared across channels plus a scalar bias.
///
/// `index` maps the `[b, runs, c, r]` layout back into `x`.
fn combine<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    index: Vec<usize>,
    dims: [usize; 4],
    w: Var,
    bias: Var,
) -> Result<Var> {
    let [b, runs, c, r] = dims;
    if g.shape(w) != [r] {
        return Err(shape_err("aggregate", g.shape(w), &[r]));
    }
    let gathered = g.gather(x, index, &dims)?;
    let w_col = g.reshape(w, &[r, 1])?;
    let y = g.matmul(gathered, w_col)?;
    let y = g.reshape(y, &[b, runs, c])?;
    g.add_scalar(y, bias)
}

/// Aggregates consecutive runs of `r` tokens of `x_g [b, L, c]` into one:
/// `out[k, d] = sum_j w[j] * x[k*r + j, d] + bias`.
pub fn aggregate_group<T: Real>(g: &mut Graph<T>, x_g: Var, r: usize, w: Var, bias: Var) -> Result<Var> {
    let s = g.shape(x_g).to_vec();
    if s.len() != 3 {
        return Err(shape_err("aggregate_group", &s, &[3]));
    }
    let (b, len, c) = (s[0], s[1], s[2]);
    if r == 0 || len % r != 0 {
        return Err(config_err(format!("rate {r} does not divide {len} tokens")));
    }
    let runs = len / r;
    let mut index = Vec::with_capacity(b * len * c);
    for bi in 0..b {
        for k in 0..runs {
            for d in 0..c {
                index.extend((0..r).map(|j| (bi * len + k * r + j) * c + d));
            }
        }
    }
    combine(g, x_g, index, [b, runs, c, r], w, bias)
}

/// Importance-guided aggregation of `x [b, L, c]` under the per-image
/// significance `s_map [b, L]`: tokens are ranked by significance, split into
/// the plan's sub-regions, each region aggregated at its rate, and the
/// results concatenated minor region first.
///
/// The ranking is a constant of the graph; no gradient reaches `s_map`.
pub fn iam<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    s_map: &Tensor<T>,
    plan: &ReallocationPlan,
    params: &[(Var, Var)],
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != plan.tokens() {
        return Err(shape_err("iam", &s, &[plan.tokens()]));
    }
    let (b, len, c) = (s[0], s[1], s[2]);
    if s_map.len() != b * len {
        return Err(shape_err("iam", s_map.shape(), &[b, len]));
    }
    if params.len() != plan.regions() {
        return Err(config_err(format!(
            "{} aggregation layers for {} sub-regions",
            params.len(),
            plan.regions()
        )));
    }
    let orders: Vec<Vec<usize>> = (0..b)
        .map(|bi| ascending_order(&s_map.data()[bi * len..(bi + 1) * len]))
        .collect();
    let gs = plan.group_size();
    let mut parts = Vec::with_capacity(plan.regions());
    for (gi, (&r, &(w, bias))) in plan.rates().iter().zip(params).enumerate() {
        let runs = gs / r;
        let mut index = Vec::with_capacity(b * gs * c);
        for (bi, order) in orders.iter().enumerate() {
            let region = &order[gi * gs..(gi + 1) * gs];
            for k in 0..runs {
                for d in 0..c {
                    index.extend(region[k * r..(k + 1) * r].iter().map(|&p| (bi * len + p) * c + d));
                }
            }
        }
        parts.push(combine(g, x, index, [b, runs, c, r], w, bias)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts, 1)
    }
}
