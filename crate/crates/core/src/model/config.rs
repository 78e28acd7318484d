use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::AttentionGroupSpec;
use crate::error::{config_err, Error, Result};
use crate::guided::{GuidanceSource, ReallocationPlan};

/// How the hybrid blocks pick their merge scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// Scales as configured per stage.
    #[default]
    Hybrid,
    /// Every group uses scale 1 (plain window attention).
    SingleLocal,
    /// Every group merges down to one key/value window (global attention).
    SingleGlobal,
}

impl ScaleMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Hybrid => "hybrid",
            Self::SingleLocal => "local",
            Self::SingleGlobal => "global",
        }
    }
}

impl core::str::FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Self::Hybrid),
            "local" | "single_local" => Ok(Self::SingleLocal),
            "global" | "single_global" => Ok(Self::SingleGlobal),
            other => Err(config_err(format!("unknown scale mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    /// One merge scale per head group; empty for the last stage.
    pub scales: Vec<usize>,
    /// Aggregation rate per significance region, least salient first.
    pub rates: Vec<usize>,
    pub window: usize,
    pub grid: (usize, usize),
}

impl StageConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_vanilla(&self) -> bool {
        self.scales.is_empty()
    }

    /// Merge scales after applying the ablation mode.
    pub fn effective_scales(&self, mode: ScaleMode) -> Vec<usize> {
        match mode {
            ScaleMode::Hybrid => self.scales.clone(),
            ScaleMode::SingleLocal => vec![1; self.scales.len()],
            ScaleMode::SingleGlobal => vec![self.grid.0.max(self.grid.1) / self.window; self.scales.len()],
        }
    }

    pub fn group_specs(&self, mode: ScaleMode) -> Vec<AttentionGroupSpec> {
        let heads = self.heads / self.scales.len().max(1);
        self.effective_scales(mode)
            .into_iter()
            .map(|scale| AttentionGroupSpec {
                scale,
                heads,
                window: self.window,
                head_dim: self.head_dim(),
            })
            .collect()
    }

    pub fn plan(&self) -> Result<ReallocationPlan> {
        ReallocationPlan::new(self.tokens(), &self.rates)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    /// Square input resolution.
    pub input: usize,
    pub in_chans: usize,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    /// Depthwise 3x3 conv between the two MLP layers.
    pub leff: bool,
    pub drop_path: f64,
    pub guidance: GuidanceSource,
    pub scale_mode: ScaleMode,
}

fn stage(dim: usize, heads: usize, depth: usize, scales: &[usize], rates: &[usize], window: usize) -> StageConfig {
    StageConfig {
        dim,
        heads,
        depth,
        scales: scales.to_vec(),
        rates: rates.to_vec(),
        window,
        grid: (0, 0),
    }
}

/// Looks up a named variant: `S`, `M`, `B` or the desk-scale `Tiny`.
pub fn build_variant(name: &str) -> Result<ModelConfig> {
    let r1 = [196, 56, 56, 28];
    let r2 = [49, 14, 14, 7];
    let r3 = [2, 1];
    let (stages, input, drop_path) = match name {
        "S" | "s" => (
            vec![
                stage(64, 2, 2, &[1, 8], &r1, 7),
                stage(128, 4, 4, &[1, 4], &r2, 7),
                stage(256, 8, 16, &[1, 2], &r3, 7),
                stage(512, 16, 1, &[], &[], 7),
            ],
            224,
            0.1,
        ),
        "M" | "m" => (
            vec![
                stage(64, 2, 2, &[1, 8], &r1, 7),
                stage(128, 4, 6, &[1, 4], &r2, 7),
                stage(256, 8, 28, &[1, 2], &r3, 7),
                stage(512, 16, 2, &[], &[], 7),
            ],
            224,
            0.2,
        ),
        "B" | "b" => (
            vec![
                stage(96, 4, 4, &[1, 2, 4, 8], &r1, 7),
                stage(192, 6, 6, &[1, 2, 4], &r2, 7),
                stage(384, 12, 24, &[1, 2], &r3, 7),
                stage(768, 24, 2, &[], &[], 7),
            ],
            224,
            0.3,
        ),
        "Tiny" | "tiny" => (
            vec![
                stage(16, 2, 2, &[1, 8], &[16, 8, 8, 4], 2),
                stage(32, 2, 2, &[1, 4], &[8, 4, 4, 2], 2),
                stage(64, 4, 2, &[1, 2], &[2, 1], 2),
                stage(128, 8, 1, &[], &[], 2),
            ],
            64,
            0.1,
        ),
        other => return Err(Error::UnknownVariant(other.to_string())),
    };
    let canonical = match name {
        "s" => "S",
        "m" => "M",
        "b" => "B",
        "tiny" => "Tiny",
        n => n,
    };
    let mut cfg = ModelConfig {
        name: canonical.to_string(),
        input,
        in_chans: 3,
        stages,
        num_classes: if canonical == "Tiny" { 10 } else { 1000 },
        mlp_ratio: 4,
        leff: true,
        drop_path,
        guidance: GuidanceSource::Hybrid,
        scale_mode: ScaleMode::Hybrid,
    };
    cfg.set_input(input)?;
    Ok(cfg)
}

impl ModelConfig {
    /// Sets the input resolution and recomputes every stage grid.
    pub fn set_input(&mut self, input: usize) -> Result<()> {
        if input == 0 || input % 32 != 0 {
            return Err(config_err(format!("input size {input} is not a multiple of 32")));
        }
        self.input = input;
        for (i, st) in self.stages.iter_mut().enumerate() {
            let side = input >> (i + 2);
            st.grid = (side, side);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(config_err("a model has exactly four stages"));
        }
        if self.num_classes < 2 || self.mlp_ratio == 0 || self.in_chans == 0 {
            return Err(config_err("num_classes >= 2, mlp_ratio >= 1 and in_chans >= 1 required"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(config_err(format!("drop path rate {} outside [0, 1)", self.drop_path)));
        }
        for (i, st) in self.stages.iter().enumerate() {
            let side = self.input >> (i + 2);
            if st.grid != (side, side) {
                return Err(config_err(format!("stage {} grid {:?} is not {side}x{side}", i + 1, st.grid)));
            }
            if st.heads == 0 || st.dim % st.heads != 0 {
                return Err(config_err(format!("stage {}: dim {} not divisible by {} heads", i + 1, st.dim, st.heads)));
            }
            if st.depth == 0 {
                return Err(config_err(format!("stage {} has no blocks", i + 1)));
            }
            if i == 3 {
                if !st.is_vanilla() || !st.rates.is_empty() {
                    return Err(config_err("the last stage takes no scales or rates"));
                }
                continue;
            }
            if st.depth % 2 != 0 {
                return Err(config_err(format!("stage {} depth {} is odd", i + 1, st.depth)));
            }
            if st.scales.is_empty() || st.heads % st.scales.len() != 0 {
                return Err(config_err(format!(
                    "stage {}: {} heads do not split into {} scale groups",
                    i + 1,
                    st.heads,
                    st.scales.len()
                )));
            }
            for spec in st.group_specs(self.scale_mode) {
                spec.validate(st.grid.0, st.grid.1)?;
            }
            st.plan()?;
            let specs = st.group_specs(self.scale_mode);
            let has = |f: &dyn Fn(&AttentionGroupSpec) -> bool| specs.iter().any(f);
            let ok = match self.guidance {
                GuidanceSource::LocalOnly => has(&|s| s.scale == 1),
                GuidanceSource::GlobalOnly => has(&|s| s.is_global(st.grid.0, st.grid.1)),
                _ => true,
            };
            if !ok {
                return Err(config_err(format!(
                    "stage {} has no heads for {} guidance",
                    i + 1,
                    self.guidance.name()
                )));
            }
        }
        Ok(())
    }

    /// Grid side lengths per stage.
    pub fn grids(&self) -> Vec<(usize, usize)> {
        self.stages.iter().map(|s| s.grid).collect()
    }

    /// Total number of transformer blocks.
    pub fn blocks(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }
}
