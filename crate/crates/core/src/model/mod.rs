//! The cross-attention interpolation model.

mod artifact;
mod features;
mod layers;
mod linalg;
mod network;
mod pool;

pub use artifact::{Model, Prediction, MODEL_MAGIC, MODEL_VERSION};
pub use features::{
    assemble_query_token, assemble_sensor_token, minimal_query_token_width, minimal_sensor_token_width,
    FeatureSchema, QueryPoint,
};
pub use layers::{Layout, TensorSpec};
pub use linalg::Scalar;
pub use network::{DecoderContext, EncoderCache, ModelDims, Network, Token, FFN_MULT};
pub use pool::{SensorEntry, SensorPool};
