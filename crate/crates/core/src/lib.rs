//! Multi-agent long-video question answering: a master agent that emits
//! tagged actions, grounding and vision backends it can call, rule-based
//! rewards, and group-relative policy-gradient math over recorded rollouts.

pub mod action;
pub mod backend;
pub mod config;
pub mod episode;
pub mod eval;
pub mod grpo;
pub mod orchestrator;
pub mod protocol;
pub mod reward;
pub mod scalar;
pub mod synth;

pub type RewardBreakdownF64 = reward::RewardBreakdown<f64>;
pub type GrpoConfigF64 = grpo::GrpoConfig<f64>;
pub type GrpoConfigF32 = grpo::GrpoConfig<f32>;
