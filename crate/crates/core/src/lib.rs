//! Neural video representation with online structural reparameterization.
//!
//! A frame index is positionally encoded, mapped through an MLP to a small
//! feature map, and upsampled by a stack of decoder stages. Each stage's
//! convolution is a multi-branch block during training whose parameters are
//! fused on the fly into one 3x3 kernel, and collapsed for good after training.

pub mod autodiff;
pub mod compression;
pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod online_rep;
pub mod ops;
pub mod rep_blocks;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod video;

pub use autodiff::{Gradients, Op, Tape, Var};
pub use checkpoint::Checkpoint;
pub use compression::{compress, prune, CompressedModel, PruneMask};
pub use error::{Error, Result};
pub use fusion::{fuse_block, FusedConv};
pub use model::{count_params_and_flops, positional_encode, Complexity, ModelConfig, RepNerv};
pub use online_rep::{RepLayer, RepMode};
pub use ops::ConvWeight;
pub use rep_blocks::{BlockConfig, BranchKind, BranchSpec, FixedFilter, RepBlock};
pub use scalar::Scalar;
pub use tensor::{rel_err, Tensor};
pub use training::{evaluate, train, Budget, EvalReport, TrainConfig, TrainLog, TrainOutcome};
pub use video::{read_frames, synth_video, write_frame, SynthKind, Video};
