//! Flexible-modal face anti-spoofing with a frozen multimodal ViT, vanilla
//! and residual contextual prompts, and missing-modality regularization.

pub mod autograd;
pub mod config;
pub mod error;
pub mod flexdata;
pub mod harness;
pub mod metrics;
pub mod mmr;
pub mod model;
pub mod prompt;
pub mod scalar;
pub mod tensor;

pub use config::{ExpandMode, ModelConfig, PromptLayout};
pub use model::Model;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
