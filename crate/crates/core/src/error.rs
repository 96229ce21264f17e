use crate::diffusion::DiffusionError;
use crate::esmda::EsmdaError;
use crate::flowsim::FlowError;
use crate::geogen::GeogenError;
use crate::metrics::MetricsError;
use crate::nn::NnError;
use crate::vae::VaeError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("nn: {0}")]
    Nn(#[from] NnError),
    #[error("geogen: {0}")]
    Geogen(#[from] GeogenError),
    #[error("vae: {0}")]
    Vae(#[from] VaeError),
    #[error("diffusion: {0}")]
    Diffusion(#[from] DiffusionError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("flowsim: {0}")]
    Flow(#[from] FlowError),
    #[error("esmda: {0}")]
    Esmda(#[from] EsmdaError),
}
