//! Vanilla and residual contextual prompts and the prompted forward pass.

pub mod cdc;
mod forward;
mod state;

pub use cdc::cdc2d;
pub use forward::{
    build_forward, compose_residual_prompt, compute_cd_context, expand, prompted_forward,
    ForwardGraph, ForwardOutput, ModelLeaves,
};
pub use state::{prompt_specs, ContextIds, PromptLayerIds, PromptState};
