//! The GAIN segmentation network and its building blocks.

mod backbone;
mod checkpoint;
mod gain;
mod upsample;

pub use backbone::{Backbone, BackboneConfig, FeaturePyramid};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, load_into, read_entries, save_checkpoint, MAGIC, VERSION};
pub use gain::{total_loss, Gain, GainConfig, GainOutput, LossParts};
pub use upsample::{upsamplers, BilinearUpsampler, GaiUpsampler, Upsampler, UpsamplerFactory, UpsamplerRegistry, UpsamplerSpec};
