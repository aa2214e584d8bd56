//! Multi-label image classification with a hybrid convolutional/transformer
//! backbone and an adaptive multi-branch output module.

pub mod ablation;
pub mod bundle;
pub mod checkpoint;
pub mod context;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod optim;
pub mod output;
pub mod params;
pub mod spatial;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use model::{HydraVit, ModelConfig};
pub use params::Parameters;
