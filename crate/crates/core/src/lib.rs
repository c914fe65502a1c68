//! Multi-dimensional gated recurrent units for coarse-to-fine landmark localization.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`kernels`] and [`tape`]: dense arrays, numeric kernels and
//!   reverse-mode differentiation.
//! - [`mdgru`]: the subsampling C-GRU and the MD-GRU layer.
//! - [`locnet`]: the localization network and its coordinate-class heads.
//! - [`pipeline`]: preprocessing, the coarse and fine stages and coordinate mapping.
//! - [`training`]: initialisation, DropConnect, AdaDelta and the epoch loop.
//! - [`data_io`]: volume/landmark file formats, manifests and synthetic data.
//! - [`evaluation`]: localization error statistics and variant reports.
//! - [`gradcheck`]: finite-difference checks of every differentiable op.

pub mod error;
pub mod evaluation;
pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod gradcheck;
pub mod kernels;
pub mod locnet;
pub mod mdgru;
pub mod params;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
