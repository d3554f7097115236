//! Infrared small-target segmentation: the encoder, attention and fusion
//! blocks, the U-shaped network built from them, training, metrics,
//! synthetic data and checkpoints.

pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod ddc;
mod error;
pub mod lsff;
pub mod metrics;
pub mod net;
pub mod params;
pub mod registry;
pub mod serank;
pub mod train;

pub use error::{Error, Result};
pub use net::{Ablation, Model, NetConfig, NetOutputs};
pub use params::{ParamId, ParamStore, Session};
