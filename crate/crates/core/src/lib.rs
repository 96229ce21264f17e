pub mod diffusion;
pub mod error;
pub mod esmda;
pub mod flowsim;
pub mod geogen;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod vae;

pub use error::Error;
