use alloc::format;
use alloc::vec::Vec;

use super::significance::significance_batched;
use super::window::{invert, partition_index};
use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// One head group of a hybrid-scale attention layer.
///
/// Keys and values are merged `scale x scale` before attending; queries use
/// windows of `scale * window` tokens over the full grid and keys use windows
/// of `window` tokens over the merged grid, so both partitions have the same
/// number of windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionGroupSpec {
    pub scale: usize,
    pub heads: usize,
    pub window: usize,
    pub head_dim: usize,
}

impl AttentionGroupSpec {
    pub fn query_window(&self) -> usize {
        self.scale * self.window
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    /// True when one query window covers the whole `h x w` grid.
    pub fn is_global(&self, h: usize, w: usize) -> bool {
        self.query_window() == h && self.query_window() == w
    }

    pub fn windows(&self, h: usize, w: usize) -> usize {
        (h / self.query_window()) * (w / self.query_window())
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.scale == 0 || self.heads == 0 || self.window == 0 || self.head_dim == 0 {
            return Err(config_err(format!("degenerate attention group {self:?}")));
        }
        let qw = self.query_window();
        if h % self.scale != 0 || w % self.scale != 0 || h % qw != 0 || w % qw != 0 {
            return Err(config_err(format!(
                "group scale {} with window {} does not tile a {h}x{w} grid",
                self.scale, self.window
            )));
        }
        Ok(())
    }
}

/// Graph handles for one group's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GroupVars {
    /// `[c, heads * head_dim]`; column block `i` is head `i`'s projection.
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    /// `(kernel [s, s, c, c], bias [c])`, present iff `scale > 1`.
    pub merge: Option<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct HybridAttentionVars {
    pub groups: Vec<GroupVars>,
    /// `[sum(heads * head_dim), c]`.
    pub wo: Var,
    pub bo: Var,
}

/// Significance of one head, `[batch, h, w]`, summing to 1 per image.
#[derive(Debug, Clone)]
pub struct HeadSignificance<T> {
    pub group: usize,
    pub scale: usize,
    pub global: bool,
    pub map: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct HybridOutput<T> {
    pub y: Var,
    pub heads: Vec<HeadSignificance<T>>,
    /// Per-group attention probabilities `[b, nw, heads, (sM)^2, M^2]`.
    pub atten: Vec<Var>,
}

/// `softmax(q k^T / sqrt(d)) v` over the last two axes.
pub fn attend<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *g.shape(q).last().unwrap_or(&1);
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, T::ONE / T::from_usize(d).sqrt());
    let probs = g.softmax(scores)?;
    let out = g.matmul(probs, v)?;
    Ok((out, probs))
}

/// Merges every `s x s` tokens of `x [b, h, w, c]` into one with a stride-`s`
/// convolution; `s = 1` is the identity and takes no parameters.
pub fn merge_tokens<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    s: usize,
    merge: Option<(Var, Var)>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || s == 0 || shape[1] % s != 0 || shape[2] % s != 0 {
        return Err(shape_err("merge_tokens", &shape, &[s]));
    }
    match (s, merge) {
        (1, None) => Ok(x),
        (1, Some(_)) => Err(config_err("scale 1 takes no merge kernel")),
        (_, None) => Err(config_err(format!("scale {s} needs a merge kernel"))),
        (_, Some((kernel, bias))) => {
            let c = shape[3];
            if g.shape(kernel) != [s, s, c, c] {
                return Err(shape_err("merge_tokens", g.shape(kernel), &[s, s, c, c]));
            }
            g.conv2d(x, kernel, bias, s, 0)
        }
    }
}

/// Window attention of full-resolution queries `q [b, h, w, heads*d]` over
/// merged keys/values `[b, h/s, w/s, heads*d]`.
///
/// Returns the output on the `h x w` grid and the attention probabilities
/// `[b, nw, heads, (sM)^2, M^2]`.
pub fn scaled_window_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    spec: &AttentionGroupSpec,
) -> Result<(Var, Var)> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 4 || qs[3] != spec.channels() {
        return Err(shape_err("scaled_window_attention", &qs, &[spec.channels()]));
    }
    let (b, h, w) = (qs[0], qs[1], qs[2]);
    spec.validate(h, w)?;
    let (hk, wk) = (h / spec.scale, w / spec.scale);
    for kv in [k, v] {
        let ks = g.shape(kv);
        if ks != [b, hk, wk, spec.channels()] {
            return Err(config_err(format!(
                "key/value grid {ks:?} does not give the {} windows of the query grid",
                spec.windows(h, w)
            )));
        }
    }
    let (qw, m, heads, d) = (spec.query_window(), spec.window, spec.heads, spec.head_dim);
    let nw = spec.windows(h, w);
    let q_index = partition_index(b, h, w, heads * d, qw, heads, d, 0);
    let kv_index = partition_index(b, hk, wk, heads * d, m, heads, d, 0);
    let qp = g.gather(q, q_index.clone(), &[b, nw, heads, qw * qw, d])?;
    let kp = g.gather(k, kv_index.clone(), &[b, nw, heads, m * m, d])?;
    let vp = g.gather(v, kv_index, &[b, nw, heads, m * m, d])?;
    let (o, atten) = attend(g, qp, kp, vp)?;
    let out = g.gather(o, invert(&q_index), &[b, h, w, heads * d])?;
    Ok((out, atten))
}

/// Hybrid-scale multi-head attention over `x [b, h, w, c]`.
///
/// Each group projects queries from `x` and keys/values from its merged copy
/// of `x`; the group outputs are concatenated and mixed by `wo`. Per-head
/// significance maps come from the attention probabilities.
pub fn hybrid_scale_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    vars: &HybridAttentionVars,
    specs: &[AttentionGroupSpec],
) -> Result<HybridOutput<T>> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(shape_err("hybrid_scale_attention", &xs, &[4]));
    }
    let (h, w, c) = (xs[1], xs[2], xs[3]);
    if specs.is_empty() || specs.len() != vars.groups.len() {
        return Err(config_err(format!(
            "{} group specs for {} parameter groups",
            specs.len(),
            vars.groups.len()
        )));
    }
    let total: usize = specs.iter().map(AttentionGroupSpec::channels).sum();
    if g.shape(vars.wo) != [total, c] {
        return Err(shape_err("hybrid_scale_attention", g.shape(vars.wo), &[total, c]));
    }
    let mut outs = Vec::with_capacity(specs.len());
    let mut heads = Vec::new();
    let mut attens = Vec::with_capacity(specs.len());
    for (gi, (spec, gv)) in specs.iter().zip(&vars.groups).enumerate() {
        spec.validate(h, w)?;
        let q = g.matmul(x, gv.wq)?;
        let merged = merge_tokens(g, x, spec.scale, gv.merge)?;
        let k = g.matmul(merged, gv.wk)?;
        let v = g.matmul(merged, gv.wv)?;
        let (o, atten) = scaled_window_attention(g, q, k, v, spec)?;
        for map in significance_batched(g.value(atten), spec, h, w)? {
            heads.push(HeadSignificance {
                group: gi,
                scale: spec.scale,
                global: spec.is_global(h, w),
                map,
            });
        }
        outs.push(o);
        attens.push(atten);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat(&outs, 3)?
    };
    let y = g.matmul(cat, vars.wo)?;
    let y = g.add_bias(y, vars.bo)?;
    Ok(HybridOutput {
        y,
        heads,
        atten: attens,
    })
}
