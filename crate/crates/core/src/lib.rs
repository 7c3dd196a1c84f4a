//! Point-cloud part segmentation at desk scale.
//!
//! The crate bundles the algorithmic machinery needed to segment point clouds
//! into labelled parts and to score the results:
//!
//! - [`tensor`] — dense 64-bit tensors with reverse-mode differentiation on an
//!   explicit tape, standard layers, and an Adam optimizer;
//! - [`data`] — point-cloud I/O, normalization, augmentation, and a synthetic
//!   labelled-shape generator;
//! - [`trees`] — complete binary trees over point sets: largest-span median
//!   k-d trees with point duplication and randomized principal-direction
//!   trees, plus the count-normalization helpers;
//! - [`pdnet`] — the encoder/decoder network that walks those trees with
//!   direction-gated affine transforms and ensembles predictions over many
//!   trees;
//! - [`sparse`] — sparse voxel grids and the convolution family that preserves
//!   active sites: valid convolutions, strided down/up paths, and the
//!   receptive-field residual block;
//! - [`pointconv`] — the learned K×K neighborhood-weighting convolution and a
//!   small Conv-DeConv segmentation network built from it;
//! - [`blocks`] — the densely connected per-point feature block with dual
//!   global pooling;
//! - [`losses`] — adversarial segmentation and auto-encoder GAN loss formulas
//!   as pure functions;
//! - [`hgrid`] — hierarchical three-label occupancy grids with composition to
//!   a full-resolution binary grid and voxel IoU;
//! - [`harness`] — mIoU metrics, configuration, training/evaluation
//!   orchestration, and the self-check suite behind the CLI.

pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod hgrid;
pub mod losses;
pub mod pdnet;
pub mod pointconv;
pub mod rng;
pub mod sparse;
pub mod tensor;
pub mod trees;

mod guide;

pub use error::{Error, Result};
pub use rng::StreamRng;
pub use tensor::{Tensor, Tape, TensorRef};
