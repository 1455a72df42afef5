//! Two-stage aggregation for irregular multivariate time series: per-step
//! temporal embedding, learnable-window local attention onto a regular grid,
//! and a hierarchical patch mixer.

pub mod autograd;
pub mod data;
pub mod dla;
pub mod error;
pub mod gradcheck;
pub mod manifest;
pub mod metrics;
pub mod mixer;
pub mod model;
pub mod modelio;
pub mod optim;
pub mod params;
pub mod te;
pub mod tensor;
pub mod train;

pub use error::{Result, TadaError};
pub use model::{ModelConfig, TadaModel};
pub use tensor::Tensor;
