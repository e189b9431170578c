//! Tensors, layers and the res8 model family.

pub mod layers;
pub mod model;
pub mod ops;
pub mod tensor;

pub use layers::{avg_pool, batchnorm_infer, conv2d, BatchNorm, BN_EPS};
pub use model::{default_labels, pad_labels, Forward, Model, ModelSpec, ResBlock, N_BLOCKS, POOL};
pub use tensor::{Scalar, Tensor};

/// Output classes of every model: ten keywords plus unknown and silence.
pub const N_LABELS: usize = 12;
