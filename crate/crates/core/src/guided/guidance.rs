use alloc::format;
use alloc::string::String;

use crate::attention::HeadSignificance;
use crate::error::{config_err, Error, Result};
use crate::numerics::{Real, Tensor};

/// Which heads of the preceding hybrid block vote on token significance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuidanceSource {
    /// Every head.
    #[default]
    Hybrid,
    /// Heads with merge scale 1.
    LocalOnly,
    /// Heads whose query window spans the whole grid.
    GlobalOnly,
    /// A constant map; grouping falls back to raster order.
    Uniform,
}

impl GuidanceSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::Hybrid => "hybrid",
            Self::LocalOnly => "local",
            Self::GlobalOnly => "global",
            Self::Uniform => "uniform",
        }
    }
}

impl core::str::FromStr for GuidanceSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Self::Hybrid),
            "local" | "local_only" => Ok(Self::LocalOnly),
            "global" | "global_only" => Ok(Self::GlobalOnly),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(String::from("unknown guidance source ") + other)),
        }
    }
}

/// Combines per-head maps `[b, h, w]` into the guidance map `[b, h, w]`.
pub fn make_guidance<T: Real>(
    heads: &[HeadSignificance<T>],
    source: GuidanceSource,
    shape: [usize; 3],
) -> Result<Tensor<T>> {
    if source == GuidanceSource::Uniform {
        return Ok(Tensor::full(&shape, T::ONE / T::from_usize(shape[1] * shape[2])));
    }
    let mut out = Tensor::zeros(&shape);
    let mut used = 0;
    for head in heads {
        let keep = match source {
            GuidanceSource::Hybrid => true,
            GuidanceSource::LocalOnly => head.scale == 1,
            GuidanceSource::GlobalOnly => head.global,
            GuidanceSource::Uniform => unreachable!(),
        };
        if !keep {
            continue;
        }
        if head.map.shape() != shape {
            return Err(crate::error::shape_err("make_guidance", head.map.shape(), &shape));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(head.map.data()) {
            *o += v;
        }
        used += 1;
    }
    if used == 0 {
        return Err(config_err(format!("no {} heads available for guidance", source.name())));
    }
    Ok(out)
}
