//! Two-stream Bayesian LoG segmentation network at desk scale: hierarchical
//! LoG filter bank, Gaussian weight posteriors, balanced batch gate,
//! Dice + ELBO training, posterior ensembles and tiled inference.

mod bayes;
mod checkpoint;
mod gate;
mod infer;
mod kernels;
mod net;
mod objective;
pub mod tensor;
mod train;

pub use bayes::{kl_gaussian, sample_weights, BayesParam};
pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};
pub use gate::{assemble_balanced_batch, BalancedGate};
pub use infer::{ensemble_from_samples, predict_ensemble, predict_with_seeds, stitch_tiles, Ensemble};
pub use kernels::{conv3d, log_kernel_raw, make_gaussian_kernel, make_log_kernel, Kernel3, LoGKernelSpec};
pub use net::{backward, forward, forward_cached, ConvParams, ForwardCache, NetConfig, SegNetwork};
pub use objective::{data_terms_with_grad, dice_loss, objective, voxel_percentage, ObjectiveTerms};
pub use train::{
    batch_gradient, build_pool, log_response_map, train, write_seg_loss_csv, EpochLoss, PoolCube, TrainConfig,
    TrainSample,
};

use thiserror::Error;

use crate::volume::VolumeError;

#[derive(Debug, Error)]
pub enum LogbError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("kernel of size {kernel} larger than grid {dims:?}")]
    KernelTooLarge { kernel: usize, dims: [usize; 3] },
    #[error("grid dims {dims:?} not divisible by {factor}")]
    NotDivisible { dims: [usize; 3], factor: usize },
    #[error("grid geometries differ")]
    GeometryMismatch,
    #[error("balanced gate needs both groups: {large} large-vessel cubes, {small} small-branch cubes")]
    GateImbalance { large: usize, small: usize },
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
