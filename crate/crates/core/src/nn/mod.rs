//! Transform networks ψ and ρ: explicit forward/backward MLPs with batch
//! normalization, trained with Adam under a cosine-annealed learning rate.

mod adam;
mod checkpoint;
mod matrix;
mod mlp;

pub use adam::{cosine_lr, Adam, AdamConfig};
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use matrix::Matrix;
pub use mlp::{
    BatchNorm, BatchNormConfig, Block, BlockGrads, ForwardCache, Gradients, MlpTransform, Mode,
    MAX_BLOCKS,
};

pub(crate) use matrix::dot;
