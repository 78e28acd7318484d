use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::attention::{hybrid_scale_attention, AttentionGroupSpec, HeadSignificance, HybridAttentionVars};
use crate::error::{config_err, shape_err, Error, Result};
use crate::guided::{global_attention, make_guidance, self_guided_attention, GuidanceSource, GuidedVars, MhaVars, ReallocationPlan};
use crate::numerics::{Graph, Real, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    /// `[k, k, cin, cout]`.
    pub w: Var,
    pub b: Var,
    pub norm: NormVars,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub fc1: (Var, Var),
    /// Depthwise 3x3 kernel `[3, 3, hidden]` and bias, if enabled.
    pub dw: Option<(Var, Var)>,
    pub fc2: (Var, Var),
}

/// Parameters of one pre-norm transformer block with attention vars `A`.
#[derive(Debug, Clone)]
pub struct BlockVars<A> {
    pub norm1: NormVars,
    pub attn: A,
    pub norm2: NormVars,
    pub mlp: MlpVars,
}

/// Per-sample drop-path factors for the two residual branches of a block.
/// `None` keeps the branch as is.
#[derive(Debug, Clone, Default)]
pub struct DropPath<T> {
    pub attn: Option<Vec<T>>,
    pub mlp: Option<Vec<T>>,
}

pub fn norm<T: Real>(g: &mut Graph<T>, x: Var, n: &NormVars) -> Result<Var> {
    g.layer_norm(x, n.gamma, n.beta, T::from_f64(LN_EPS))
}

pub fn mlp<T: Real>(g: &mut Graph<T>, x: Var, m: &MlpVars) -> Result<Var> {
    let h = g.matmul(x, m.fc1.0)?;
    let mut h = g.add_bias(h, m.fc1.1)?;
    if let Some((w, b)) = m.dw {
        let local = g.depthwise_conv(h, w, b)?;
        h = g.add(h, local)?;
    }
    let h = g.gelu(h);
    let y = g.matmul(h, m.fc2.0)?;
    g.add_bias(y, m.fc2.1)
}

fn residual<T: Real>(g: &mut Graph<T>, x: Var, branch: Var, drop: Option<&Vec<T>>) -> Result<Var> {
    let branch = match drop {
        Some(f) => g.scale_outer(branch, f.clone())?,
        None => branch,
    };
    g.add(x, branch)
}

fn mlp_half<T: Real>(g: &mut Graph<T>, x: Var, n: &NormVars, m: &MlpVars, drop: &DropPath<T>) -> Result<Var> {
    let h = norm(g, x, n)?;
    let h = mlp(g, h, m)?;
    residual(g, x, h, drop.mlp.as_ref())
}

/// Convolutional patch embedding: 7x7 stride 4, then layer norm.
pub fn patch_embed<T: Real>(g: &mut Graph<T>, img: Var, p: &ConvVars) -> Result<Var> {
    let s = g.shape(img).to_vec();
    if s.len() != 4 || s[1] % 4 != 0 || s[2] % 4 != 0 {
        return Err(config_err(format!("image {s:?} is not [b, h, w, c] with h, w divisible by 4")));
    }
    let y = g.conv2d(img, p.w, p.b, 4, 3)?;
    norm(g, y, &p.norm)
}

/// Halves the grid: 3x3 stride 2 conv, then layer norm.
pub fn downsample<T: Real>(g: &mut Graph<T>, x: Var, p: &ConvVars) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(config_err(format!("cannot halve grid of {s:?}")));
    }
    let y = g.conv2d(x, p.w, p.b, 2, 1)?;
    norm(g, y, &p.norm)
}

/// Hybrid-scale block. Returns the output and the per-head significance
/// maps for the self-guided block that follows.
pub fn hybrid_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockVars<HybridAttentionVars>,
    specs: &[AttentionGroupSpec],
    drop: &DropPath<T>,
) -> Result<(Var, Vec<HeadSignificance<T>>)> {
    let h = norm(g, x, &p.norm1)?;
    let out = hybrid_scale_attention(g, h, &p.attn, specs)?;
    let x = residual(g, x, out.y, drop.attn.as_ref())?;
    let y = mlp_half(g, x, &p.norm2, &p.mlp, drop)?;
    Ok((y, out.heads))
}

/// Self-guided block driven by the maps of the preceding hybrid block.
#[allow(clippy::too_many_arguments)]
pub fn guided_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    maps: &[HeadSignificance<T>],
    source: GuidanceSource,
    plan: &ReallocationPlan,
    p: &BlockVars<GuidedVars>,
    heads: usize,
    drop: &DropPath<T>,
) -> Result<(Var, Var)> {
    if maps.is_empty() {
        return Err(Error::Contract("self-guided block needs the significance maps of a hybrid block".to_string()));
    }
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err("guided_block", &s, &[4]));
    }
    let guide = make_guidance(maps, source, [s[0], s[1], s[2]])?;
    let h = norm(g, x, &p.norm1)?;
    let out = self_guided_attention(g, h, &guide, plan, &p.attn, heads)?;
    let x = residual(g, x, out.y, drop.attn.as_ref())?;
    Ok((mlp_half(g, x, &p.norm2, &p.mlp, drop)?, out.atten))
}

/// Plain global-attention block used by the last stage.
pub fn vanilla_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockVars<MhaVars>,
    heads: usize,
    drop: &DropPath<T>,
) -> Result<Var> {
    let h = norm(g, x, &p.norm1)?;
    let out = global_attention(g, h, &p.attn, heads)?;
    let x = residual(g, x, out.y, drop.attn.as_ref())?;
    mlp_half(g, x, &p.norm2, &p.mlp, drop)
}
