#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod ad;
pub mod checkpoint;
pub mod data;
mod error;
pub mod flows;
pub mod init;
pub mod kernels;
pub mod layer;
pub mod model;
pub mod noise;
pub mod train;

pub use checkpoint::Checkpoint;
pub use data::{Dataset, PreparedSplit};
pub use error::{Error, Result};
pub use model::{Mixture, Model, ModelConfig};
pub use noise::NoiseSource;
pub use train::{TrainConfig, Trainer};
