//! Tensor robust PCA under the t-SVD algebra, and a deep-unfolded variant
//! that alternates a thresholded t-SVD low-rank step with a learned Top-K
//! sparse refinement network, for hyperspectral image denoising.
//!
//! Module map:
//!
//! - [`tensor`], [`fourier`], [`tsvd`]: third-order tensors, the mode-3 DFT,
//!   t-product, t-SVD, tubal nuclear norm and its proximal operators.
//! - [`trpca`]: the classical alternating low-rank/sparse solver.
//! - [`autodiff`]: a small reverse-mode tape with the custom truncated t-SVD
//!   and Top-K backward rules.
//! - [`sparse_net`], [`unfolding`]: the sparse refinement network and the
//!   unfolded multi-stage model with its trainer.
//! - [`noise`], [`metrics`], [`phantom`]: degradations, quality metrics and
//!   synthetic clean cubes.
//! - [`cube`], [`checkpoint`], [`ablation`]: file formats and the benchmark harness.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod cube;
pub mod error;
pub mod fourier;
pub mod metrics;
pub mod noise;
pub mod phantom;
pub mod sparse_net;
pub mod tensor;
pub mod trpca;
pub mod tsvd;
pub mod unfolding;

pub use error::{Error, Result};
pub use tensor::Tensor3;
