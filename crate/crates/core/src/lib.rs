//! Grid-free interpolation of sparse PM2.5 sensor fields with a
//! cross-attention encoder/decoder and Monte Carlo subset uncertainty.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geo;
pub mod model;
pub mod record;
pub mod train;
pub mod uncertainty;

pub use config::{DatasetSplit, FeatureSetKind, OptimizerKind, RunConfig, SplitPart};
pub use error::{Error, Result};
pub use record::{Day, SensorRecord};
