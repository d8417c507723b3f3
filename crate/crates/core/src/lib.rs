//! Prior-guided infrared/visible image fusion.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`ops`] and [`autograd`]: a small dense tensor type, its
//!   primitive kernels and a reverse-mode tape with hand-written backward
//!   passes; [`gradcheck`] verifies them by central differences.
//! - [`prior`]: per-scale evolution of a compact set of prior tokens
//!   (alignment, cross-attention proposal, gated update).
//! - [`dynconv`]: prior tokens turned into expert kernels, mixed per pixel by
//!   blended dense/top-k routing.
//! - [`fusion`]: cross-modal channel fusion (FiLM gating, channel shuffle,
//!   channel-wise mixing convolution).
//! - [`loss`] and [`metrics`]: the unsupervised training objective and
//!   reference-free quality metrics.
//! - [`network`], [`train`], [`checkpoint`], [`data`]: the assembled
//!   encoder/decoder, the toy trainer, persistence and synthetic data.
//! - [`oracle`] and [`verify`]: loop reference implementations and the
//!   self-test suites built on them.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dynconv;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod oracle;
pub mod params;
pub mod prior;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{Gradients, Tape, Var};
pub use config::FusionConfig;
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{ConvGeometry, Tensor};
