use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::ModelConfig;
use crate::attention::{GroupVars, HybridAttentionVars};
use crate::guided::{GuidedVars, MhaVars};
use crate::numerics::Var;

/// How a parameter tensor starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    /// Plain normal; convolutions use `sqrt(2 / fan_out)`.
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const WEIGHT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvIdx {
    pub w: usize,
    pub b: usize,
    pub norm: NormIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpIdx {
    pub fc1: (usize, usize),
    pub dw: Option<(usize, usize)>,
    pub fc2: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MhaIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct GroupIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub merge: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub(crate) enum AttnIdx {
    Hybrid { groups: Vec<GroupIdx>, wo: usize, bo: usize },
    Guided { mha: MhaIdx, aggregate: Vec<(usize, usize)> },
    Vanilla(MhaIdx),
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIdx {
    pub norm1: NormIdx,
    pub attn: AttnIdx,
    pub norm2: NormIdx,
    pub mlp: MlpIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct StageIdx {
    /// Patch embedding for the first stage, downsampling afterwards.
    pub entry: ConvIdx,
    pub blocks: Vec<BlockIdx>,
}

/// Every parameter of a configuration, in storage order, plus the indices
/// each layer uses to find its tensors.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub specs: Vec<ParamSpec>,
    pub stages: Vec<StageIdx>,
    pub norm: NormIdx,
    pub head: (usize, usize),
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn weight(&mut self, name: String, shape: &[usize]) -> usize {
        self.add(name, shape, Init::TruncNormal(WEIGHT_STD))
    }

    /// `k x k` kernel with `fan_out = k * k * cout / groups`.
    fn kernel(&mut self, name: String, shape: &[usize], fan_out: usize) -> usize {
        self.add(name, shape, Init::Normal(libm::sqrt(2.0 / fan_out as f64)))
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.add(name, shape, Init::Zeros)
    }

    fn norm(&mut self, prefix: &str, c: usize) -> NormIdx {
        NormIdx {
            gamma: self.add(format!("{prefix}.weight"), &[c], Init::Ones),
            beta: self.zeros(format!("{prefix}.bias"), &[c]),
        }
    }

    fn conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize) -> ConvIdx {
        ConvIdx {
            w: self.kernel(format!("{prefix}.proj.weight"), &[k, k, cin, cout], k * k * cout),
            b: self.zeros(format!("{prefix}.proj.bias"), &[cout]),
            norm: self.norm(&format!("{prefix}.norm"), cout),
        }
    }

    fn mlp(&mut self, prefix: &str, c: usize, ratio: usize, leff: bool) -> MlpIdx {
        let hidden = c * ratio;
        let fc1 = (
            self.weight(format!("{prefix}.fc1.weight"), &[c, hidden]),
            self.zeros(format!("{prefix}.fc1.bias"), &[hidden]),
        );
        let dw = leff.then(|| {
            (
                self.kernel(format!("{prefix}.dwconv.weight"), &[3, 3, hidden], 9),
                self.zeros(format!("{prefix}.dwconv.bias"), &[hidden]),
            )
        });
        let fc2 = (
            self.weight(format!("{prefix}.fc2.weight"), &[hidden, c]),
            self.zeros(format!("{prefix}.fc2.bias"), &[c]),
        );
        MlpIdx { fc1, dw, fc2 }
    }

    fn mha(&mut self, prefix: &str, c: usize) -> MhaIdx {
        MhaIdx {
            wq: self.weight(format!("{prefix}.q.weight"), &[c, c]),
            wk: self.weight(format!("{prefix}.k.weight"), &[c, c]),
            wv: self.weight(format!("{prefix}.v.weight"), &[c, c]),
            wo: self.weight(format!("{prefix}.proj.weight"), &[c, c]),
            bo: self.zeros(format!("{prefix}.proj.bias"), &[c]),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut b = Builder { specs: Vec::new() };
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut prev = cfg.in_chans;
        for (si, st) in cfg.stages.iter().enumerate() {
            let c = st.dim;
            let entry = if si == 0 {
                b.conv("patch_embed", 7, prev, c)
            } else {
                b.conv(&format!("stage{}.downsample", si + 1), 3, prev, c)
            };
            let mut blocks = Vec::with_capacity(st.depth);
            for bi in 0..st.depth {
                let p = format!("stage{}.block{bi}", si + 1);
                let norm1 = b.norm(&format!("{p}.norm1"), c);
                let attn = if st.is_vanilla() {
                    AttnIdx::Vanilla(b.mha(&format!("{p}.attn"), c))
                } else if bi % 2 == 0 {
                    let specs = st.group_specs(cfg.scale_mode);
                    let groups = specs
                        .iter()
                        .enumerate()
                        .map(|(gi, spec)| {
                            let gc = spec.channels();
                            GroupIdx {
                                wq: b.weight(format!("{p}.attn.group{gi}.q.weight"), &[c, gc]),
                                wk: b.weight(format!("{p}.attn.group{gi}.k.weight"), &[c, gc]),
                                wv: b.weight(format!("{p}.attn.group{gi}.v.weight"), &[c, gc]),
                                merge: (spec.scale > 1).then(|| {
                                    let s = spec.scale;
                                    (
                                        b.kernel(format!("{p}.attn.group{gi}.merge.weight"), &[s, s, c, c], s * s * c),
                                        b.zeros(format!("{p}.attn.group{gi}.merge.bias"), &[c]),
                                    )
                                }),
                            }
                        })
                        .collect();
                    AttnIdx::Hybrid {
                        groups,
                        wo: b.weight(format!("{p}.attn.proj.weight"), &[c, c]),
                        bo: b.zeros(format!("{p}.attn.proj.bias"), &[c]),
                    }
                } else {
                    let mha = b.mha(&format!("{p}.attn"), c);
                    let aggregate = st
                        .rates
                        .iter()
                        .enumerate()
                        .map(|(gi, &r)| {
                            (
                                b.add(format!("{p}.attn.iam{gi}.weight"), &[r], Init::Const(1.0 / r as f64)),
                                b.zeros(format!("{p}.attn.iam{gi}.bias"), &[1]),
                            )
                        })
                        .collect();
                    AttnIdx::Guided { mha, aggregate }
                };
                let norm2 = b.norm(&format!("{p}.norm2"), c);
                let mlp = b.mlp(&format!("{p}.mlp"), c, cfg.mlp_ratio, cfg.leff);
                blocks.push(BlockIdx {
                    norm1,
                    attn,
                    norm2,
                    mlp,
                });
            }
            stages.push(StageIdx { entry, blocks });
            prev = c;
        }
        let norm = b.norm("norm", prev);
        let head = (
            b.weight("head.weight".into(), &[prev, cfg.num_classes]),
            b.zeros("head.bias".into(), &[cfg.num_classes]),
        );
        Layout {
            specs: b.specs,
            stages,
            norm,
            head,
        }
    }
}

/// Bound variable handles for one block's attention parameters.
pub(crate) fn bind_hybrid(v: &[Var], groups: &[GroupIdx], wo: usize, bo: usize) -> HybridAttentionVars {
    HybridAttentionVars {
        groups: groups
            .iter()
            .map(|gi| GroupVars {
                wq: v[gi.wq],
                wk: v[gi.wk],
                wv: v[gi.wv],
                merge: gi.merge.map(|(w, b)| (v[w], v[b])),
            })
            .collect(),
        wo: v[wo],
        bo: v[bo],
    }
}

pub(crate) fn bind_mha(v: &[Var], m: &MhaIdx) -> MhaVars {
    MhaVars {
        wq: v[m.wq],
        wk: v[m.wk],
        wv: v[m.wv],
        wo: v[m.wo],
        bo: v[m.bo],
    }
}

pub(crate) fn bind_guided(v: &[Var], m: &MhaIdx, aggregate: &[(usize, usize)]) -> GuidedVars {
    GuidedVars {
        mha: bind_mha(v, m),
        aggregate: aggregate.iter().map(|&(w, b)| (v[w], v[b])).collect(),
    }
}
