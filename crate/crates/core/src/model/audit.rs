use super::config::ModelConfig;
use super::layout::Layout;
use crate::error::Result;

/// Trainable scalar count of a configuration.
pub fn count_params(cfg: &ModelConfig) -> usize {
    Layout::new(cfg).specs.iter().map(|s| s.len()).sum()
}

/// Multiply-accumulates of one forward pass on a single `input x input`
/// image: convolutions, linear projections, attention products, key/value
/// aggregation and the depthwise MLP conv. Elementwise work is not counted.
pub fn count_flops(cfg: &ModelConfig, input: usize) -> Result<u64> {
    let mut cfg = cfg.clone();
    cfg.set_input(input)?;
    let mut macs = 0u64;
    let mut prev = cfg.in_chans as u64;
    for (si, st) in cfg.stages.iter().enumerate() {
        let (h, w) = (st.grid.0 as u64, st.grid.1 as u64);
        let hw = h * w;
        let c = st.dim as u64;
        let k = if si == 0 { 7 } else { 3 };
        macs += hw * k * k * prev * c;
        let hidden = c * cfg.mlp_ratio as u64;
        let mlp = 2 * hw * c * hidden + if cfg.leff { hw * hidden * 9 } else { 0 };
        for bi in 0..st.depth {
            let attn = if st.is_vanilla() {
                4 * hw * c * c + 2 * hw * hw * c
            } else if bi % 2 == 0 {
                let mut a = hw * c * c;
                for spec in st.group_specs(cfg.scale_mode) {
                    let (s, gc) = (spec.scale as u64, spec.channels() as u64);
                    let merged = hw / (s * s);
                    if s > 1 {
                        a += merged * s * s * c * c;
                    }
                    a += hw * c * gc + 2 * merged * c * gc;
                    a += 2 * hw * (spec.window * spec.window) as u64 * gc;
                }
                a
            } else {
                let lkv = st.plan()?.output_len() as u64;
                2 * hw * c * c + 2 * lkv * c * c + hw * c + 2 * hw * lkv * c
            };
            macs += attn + mlp;
        }
        prev = c;
    }
    macs += prev * cfg.num_classes as u64;
    Ok(macs)
}
