//! Single-channel vision transformer backbone.

mod checkpoint;
mod config;
mod encoder;
mod posembed;

pub use checkpoint::{write_atomic, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Preset, ViTConfig};
pub use encoder::{
    encode, encode_batch, forward_batch, init_backbone, patchify, EncodedBatch, EncoderOutput, BACKBONE,
};
pub use posembed::{base_grid_of, bicubic_mix, interpolate_pos_embedding};
