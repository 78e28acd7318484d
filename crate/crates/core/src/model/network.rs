use alloc::format;
use alloc::vec::Vec;

use super::blocks::{
    downsample, guided_block, hybrid_block, norm, patch_embed, vanilla_block, BlockVars, ConvVars, DropPath, MlpVars,
    NormVars,
};
use super::config::ModelConfig;
use super::layout::{bind_guided, bind_hybrid, bind_mha, AttnIdx, ConvIdx, Layout, MlpIdx, NormIdx, ParamSpec, Init};
use crate::attention::HeadSignificance;
use crate::error::{config_err, shape_err, Result};
use crate::guided::{make_guidance, GuidanceSource};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::rng::{self, ChaCha8Rng};

/// A configured network together with its parameter tensors.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[b, num_classes]`.
    pub logits: Var,
    /// Summed per-head significance of the last hybrid block of stages 1-3,
    /// each `[b, h_i, w_i]`.
    pub maps: Vec<Tensor<T>>,
}

fn norm_vars(v: &[Var], n: NormIdx) -> NormVars {
    NormVars {
        gamma: v[n.gamma],
        beta: v[n.beta],
    }
}

fn conv_vars(v: &[Var], c: ConvIdx) -> ConvVars {
    ConvVars {
        w: v[c.w],
        b: v[c.b],
        norm: norm_vars(v, c.norm),
    }
}

fn mlp_vars(v: &[Var], m: MlpIdx) -> MlpVars {
    MlpVars {
        fc1: (v[m.fc1.0], v[m.fc1.1]),
        dw: m.dw.map(|(w, b)| (v[w], v[b])),
        fc2: (v[m.fc2.0], v[m.fc2.1]),
    }
}

impl<T: Real> Model<T> {
    /// Builds a model with freshly initialised parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut r = rng::seeded(seed);
        let params = layout
            .specs
            .iter()
            .map(|spec| {
                let data = (0..spec.len())
                    .map(|_| match spec.init {
                        Init::TruncNormal(std) => T::from_f64(rng::trunc_normal(&mut r, std)),
                        Init::Normal(std) => T::from_f64(rng::normal(&mut r) * std),
                        Init::Zeros => T::ZERO,
                        Init::Ones => T::ONE,
                        Init::Const(v) => T::from_f64(v),
                    })
                    .collect();
                Tensor::new(&spec.shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layout, params })
    }

    /// Wraps existing parameters; shapes must match the configuration.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.specs.len() {
            return Err(config_err(format!(
                "{} tensors given, configuration has {}",
                params.len(),
                layout.specs.len()
            )));
        }
        for (p, spec) in params.iter().zip(&layout.specs) {
            if p.shape() != spec.shape.as_slice() {
                return Err(shape_err("from_params", p.shape(), &spec.shape));
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor<T>> {
        self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Puts every parameter on the tape, in storage order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    /// Runs images `[b, H, W, in_chans]` through the network. With `rng`,
    /// stochastic depth is active; without it the pass is deterministic.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        images: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != cfg.input || s[2] != cfg.input || s[3] != cfg.in_chans {
            return Err(shape_err("forward", &s, &[cfg.input, cfg.input, cfg.in_chans]));
        }
        if vars.len() != self.params.len() {
            return Err(config_err(format!("{} vars bound for {} parameters", vars.len(), self.params.len())));
        }
        let batch = s[0];
        let total_blocks = cfg.blocks();
        let mut block_no = 0;
        let mut maps = Vec::new();
        let mut x = images;
        for (si, (st, idx)) in cfg.stages.iter().zip(&self.layout.stages).enumerate() {
            let entry = conv_vars(vars, idx.entry);
            x = if si == 0 {
                patch_embed(g, x, &entry)?
            } else {
                downsample(g, x, &entry)?
            };
            let specs = st.group_specs(cfg.scale_mode);
            let plan = if st.is_vanilla() { None } else { Some(st.plan()?) };
            let mut heads: Vec<HeadSignificance<T>> = Vec::new();
            for b in &idx.blocks {
                let rate = if total_blocks > 1 {
                    cfg.drop_path * block_no as f64 / (total_blocks - 1) as f64
                } else {
                    0.0
                };
                block_no += 1;
                let drop = match rng.as_deref_mut() {
                    Some(r) if rate > 0.0 => DropPath {
                        attn: Some(drop_factors(r, batch, rate)),
                        mlp: Some(drop_factors(r, batch, rate)),
                    },
                    _ => DropPath::default(),
                };
                let (norm1, norm2, mlp) = (norm_vars(vars, b.norm1), norm_vars(vars, b.norm2), mlp_vars(vars, b.mlp));
                match &b.attn {
                    AttnIdx::Hybrid { groups, wo, bo } => {
                        let p = BlockVars {
                            norm1,
                            attn: bind_hybrid(vars, groups, *wo, *bo),
                            norm2,
                            mlp,
                        };
                        let (y, h) = hybrid_block(g, x, &p, &specs, &drop)?;
                        x = y;
                        heads = h;
                    }
                    AttnIdx::Guided { mha, aggregate } => {
                        let p = BlockVars {
                            norm1,
                            attn: bind_guided(vars, mha, aggregate),
                            norm2,
                            mlp,
                        };
                        let plan = plan.as_ref().ok_or_else(|| config_err("guided block without a plan"))?;
                        x = guided_block(g, x, &heads, cfg.guidance, plan, &p, st.heads, &drop)?.0;
                    }
                    AttnIdx::Vanilla(mha) => {
                        let p = BlockVars {
                            norm1,
                            attn: bind_mha(vars, mha),
                            norm2,
                            mlp,
                        };
                        x = vanilla_block(g, x, &p, st.heads, &drop)?;
                    }
                }
            }
            if !heads.is_empty() {
                maps.push(make_guidance(&heads, GuidanceSource::Hybrid, [batch, st.grid.0, st.grid.1])?);
            }
        }
        let x = norm(g, x, &norm_vars(vars, self.layout.norm))?;
        let xs = g.shape(x).to_vec();
        let tokens = g.reshape(x, &[xs[0], xs[1] * xs[2], xs[3]])?;
        let pooled = g.mean_axis(tokens, 1)?;
        let logits = g.matmul(pooled, vars[self.layout.head.0])?;
        let logits = g.add_bias(logits, vars[self.layout.head.1])?;
        Ok(ForwardOutput { logits, maps })
    }

    /// Inference-mode logits as a plain tensor.
    pub fn predict(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &vars, x, None)?;
        Ok((g.value(out.logits).clone(), out.maps))
    }
}

fn drop_factors<T: Real>(r: &mut ChaCha8Rng, batch: usize, rate: f64) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..batch)
        .map(|_| if rng::uniform(r) < rate { T::ZERO } else { keep })
        .collect()
}
