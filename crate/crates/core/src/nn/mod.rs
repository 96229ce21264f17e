//! Small reverse-mode differentiable tensor core: the layers used by the
//! autoencoder and the denoising U-net, plus Adam.

mod adam;
mod attention;
pub mod checkpoint;
mod conv;
mod gemm;
mod gradcheck;
mod graph;
pub mod layers;
mod norm;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, OptimizerSnapshot};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Grads, Graph, Var};
pub use params::{kaiming_uniform, ParamId, ParamSet};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{channels} channels cannot be split into {groups} groups")]
    Groups { channels: usize, groups: usize },
}
