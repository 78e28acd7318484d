//! Significance-ranked token reallocation (IAM) and self-guided attention.

mod attention;
mod guidance;
mod iam;
mod plan;

pub use attention::{global_attention, self_guided_attention, GuidedOutput, GuidedVars, MhaVars};
pub use guidance::{make_guidance, GuidanceSource};
pub use iam::{aggregate_group, iam};
pub use plan::{rank_and_group, ReallocationPlan};
