use alloc::format;
use alloc::vec::Vec;

use super::iam::iam;
use super::plan::ReallocationPlan;
use crate::attention::attend;
use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Projection handles of a multi-head attention layer.
#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Debug, Clone)]
pub struct GuidedVars {
    pub mha: MhaVars,
    /// One `(weights [r], bias [1])` pair per sub-region.
    pub aggregate: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, Copy)]
pub struct GuidedOutput {
    pub y: Var,
    /// `[b, heads, L, L_kv]`.
    pub atten: Var,
}

fn head_split_index(b: usize, len: usize, heads: usize, d: usize) -> Vec<usize> {
    let c = heads * d;
    let mut index = Vec::with_capacity(b * len * c);
    for bi in 0..b {
        for hh in 0..heads {
            for t in 0..len {
                let base = (bi * len + t) * c + hh * d;
                index.extend(base..base + d);
            }
        }
    }
    index
}

/// Global multi-head attention of `tokens [b, L, c]` over `kv [b, L_kv, c]`.
fn mha<T: Real>(g: &mut Graph<T>, tokens: Var, kv: Var, vars: &MhaVars, heads: usize) -> Result<GuidedOutput> {
    let s = g.shape(tokens).to_vec();
    let (b, len, c) = (s[0], s[1], s[2]);
    if heads == 0 || c % heads != 0 {
        return Err(config_err(format!("{c} channels do not split into {heads} heads")));
    }
    let d = c / heads;
    let lkv = g.shape(kv)[1];
    let q = g.matmul(tokens, vars.wq)?;
    let k = g.matmul(kv, vars.wk)?;
    let v = g.matmul(kv, vars.wv)?;
    for p in [q, k, v] {
        if *g.shape(p).last().unwrap_or(&0) != c {
            return Err(shape_err("attention projection", g.shape(p), &[c]));
        }
    }
    let q_index = head_split_index(b, len, heads, d);
    let kv_index = head_split_index(b, lkv, heads, d);
    let qh = g.gather(q, q_index.clone(), &[b, heads, len, d])?;
    let kh = g.gather(k, kv_index.clone(), &[b, heads, lkv, d])?;
    let vh = g.gather(v, kv_index, &[b, heads, lkv, d])?;
    let (o, atten) = attend(g, qh, kh, vh)?;
    let o = g.gather(o, crate::attention::invert_index(&q_index), &[b, len, c])?;
    let y = g.matmul(o, vars.wo)?;
    let y = g.add_bias(y, vars.bo)?;
    Ok(GuidedOutput { y, atten })
}

/// Plain global multi-head attention over `x [b, h, w, c]`.
pub fn global_attention<T: Real>(g: &mut Graph<T>, x: Var, vars: &MhaVars, heads: usize) -> Result<GuidedOutput> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err("global_attention", &s, &[4]));
    }
    let tokens = g.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
    let out = mha(g, tokens, tokens, vars, heads)?;
    let y = g.reshape(out.y, &s)?;
    Ok(GuidedOutput { y, atten: out.atten })
}

/// Self-guided attention: queries keep every token of `x [b, h, w, c]`;
/// keys and values are projected from one IAM-reallocated token set.
pub fn self_guided_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    s_map: &Tensor<T>,
    plan: &ReallocationPlan,
    vars: &GuidedVars,
    heads: usize,
) -> Result<GuidedOutput> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err("self_guided_attention", &s, &[4]));
    }
    if s_map.shape() != [s[0], s[1], s[2]] {
        return Err(shape_err("self_guided_attention", s_map.shape(), &s[..3]));
    }
    let tokens = g.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
    let kv = iam(g, tokens, s_map, plan, &vars.aggregate)?;
    let out = mha(g, tokens, kv, &vars.mha, heads)?;
    let y = g.reshape(out.y, &s)?;
    Ok(GuidedOutput { y, atten: out.atten })
}
