//! Learned image compression with a hierarchical dictionary entropy model.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`graph`], [`param`], [`optim`]: a small deterministic
//!   tensor engine with reverse-mode differentiation, Adam, and checkpoints.
//! * [`hdca`]: two-stage cross-attention over a global and a detail dictionary.
//! * [`cape`]: the multi-receptive-field parameter estimator and its heads.
//! * [`entropy`]: the slice-wise conditional Gaussian entropy model.
//! * [`rangecoder`]: 16-bit-precision range coding of the quantized latents.
//! * [`codec`], [`train`]: the end-to-end codec, its file format and training.
//! * [`metrics`], [`analysis`]: PSNR, BD-rate, dictionary utilization and rate maps.

pub mod analysis;
pub mod backbone;
pub mod cape;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hdca;
pub mod image;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod rangecoder;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use config::{ModelConfig, Variant};
pub use model::Model;
pub use param::{ParamId, ParamStore};
pub use tensor::{DType, Real, Tensor};
