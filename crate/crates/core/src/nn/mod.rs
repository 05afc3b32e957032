//! Layers and training math: convolution, resize, pooling, normalisation,
//! OHEM cross-entropy, the poly schedule and SGD.

mod conv;
mod loss;
mod module;
mod norm;
mod optim;
mod pool;
mod resize;

pub use conv::{conv2d, conv_out_size};
pub use loss::{cross_entropy_masked, ohem_cross_entropy, ohem_mask, LabelMap, OhemConfig, IGNORE_INDEX};
pub use module::{BatchNorm2d, Conv2d, ConvBnRelu, Ctx, Init, ParamId, ParamKind, ParamStore};
pub use norm::{batch_norm, RunningStats};
pub use optim::{poly_lr, sgd_step, LrSchedule, SgdConfig};
pub use pool::{expand_spatial, global_avg_pool};
pub use resize::{bilinear_resize, RESIZE_FLOPS_PER_OUTPUT};
