//! Hybrid-scale window attention and the significance maps it emits.

mod hybrid;
mod significance;
mod window;

pub use hybrid::{
    attend, hybrid_scale_attention, merge_tokens, scaled_window_attention, AttentionGroupSpec,
    GroupVars, HeadSignificance, HybridAttentionVars, HybridOutput,
};
pub use significance::{significance_accumulate, significance_batched};
pub use window::{invert as invert_index, partition_index, window_partition, window_reverse};

#[cfg(test)]
mod tests;
