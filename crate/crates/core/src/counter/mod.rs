//! Density counter: convolutional patch encoders for the image and the
//! exemplars, cross-attention fusion with image tokens as queries, and a
//! bilinear-upsampling decoder ending in a softplus.

pub mod checkpoint;
pub mod layers;
mod model;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use model::{
    attention_weights, count_from_density, fuse, AttentionParams, Counter, CounterConfig, CounterParams, FeatureMap,
    PreparedInput,
};
