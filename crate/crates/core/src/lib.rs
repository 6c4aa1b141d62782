// `!(x > 0)` style checks are deliberate: NaN has to fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod corpus;
pub mod eval;
pub mod grpo;
pub mod llm;
pub mod reward;
pub mod scalar;
pub mod seed;
pub mod sftgen;

pub use scalar::Scalar;

/// Double-precision instantiations used by the CLI and the acceptance suite.
pub type Policy = grpo::PolicyParams<f64>;
pub type Schedule = reward::RewardSchedule<f64>;
pub type GrpoSettings = grpo::GrpoConfig<f64>;
pub type Env = grpo::SyntheticEnv<f64>;
pub type Query = grpo::ToyQuery<f64>;
pub type Group = grpo::RolloutGroup<f64>;

pub type Policy32 = grpo::PolicyParams<f32>;
pub type Schedule32 = reward::RewardSchedule<f32>;
