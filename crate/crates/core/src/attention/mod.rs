//! Affinity kernels, attentive aggregation and the guided attentive
//! interpolation module.

mod config;
mod criss_cross;
mod dump;
mod full;
mod gai;
mod kernel;

pub use config::{GaiConfig, KeySource, QueryMode};
pub use criss_cross::{anchor, CrissCrossAttention};
pub use dump::{dump_attention, write_attention};
pub use full::FullAttention;
pub use gai::{Gai, GaiTrace, QueryParts};
pub use kernel::{registry, AffinityMap, AttentionKernel, AttentionRegistry, AttnGeometry, SOFTMAX_FLOPS_PER_ELEMENT};
