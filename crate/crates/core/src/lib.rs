//! Multi-turn tool-use preference data and a turn-weighted preference
//! objective for tool-augmented assistants.
//!
//! The pipeline runs seed dialogues → slot-filling and out-of-tools
//! variants → chosen/rejected pairs → a tabular policy trained against a
//! frozen reference → per-turn teacher-forced evaluation.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod augment;
pub mod corpus;
pub mod dialogue;
pub mod evaluation;
pub mod objective;
pub mod pairing;
pub mod pipeline;
pub mod policy;
pub mod scalar;
pub mod synth;
pub mod training;

pub use scalar::Scalar;

pub type LossConfig64 = objective::LossConfig<f64>;
pub type LossConfig32 = objective::LossConfig<f32>;
pub type ToyPolicy64 = policy::ToyPolicy<f64>;
pub type ToyPolicy32 = policy::ToyPolicy<f32>;
pub type TrainConfig64 = training::TrainConfig<f64>;
pub type TrainConfig32 = training::TrainConfig<f32>;
pub type PairLoss64 = objective::PairLoss<f64>;
