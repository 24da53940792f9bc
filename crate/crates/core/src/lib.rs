//! Binocular 3D motion estimation with a small PID-structured convolutional
//! network, built on a purpose-built reverse-mode autodiff core.
//!
//! The crate is organized around six subsystems:
//!
//! - [`tensor`] / [`tape`]: dense tensors and the operation tape that records
//!   forward passes and replays them in reverse for gradients.
//! - [`optim`]: the named parameter store and the Adam update.
//! - [`pid`]: size-3 kernel algebra — proportional/integral/derivative bases,
//!   both coefficient systems, and content reports for trained kernels.
//! - [`scene`]: the deterministic binocular renderer, dataset files, and
//!   target normalization.
//! - [`network`]: the 7-block backbone with concatenate-and-pool feature
//!   reuse, state splitting, and the residual velocity/acceleration heads.
//! - [`training`] / [`eval`]: the three-stage curriculum, metrics, the
//!   comparison harnesses, and the inference benchmark.

pub mod error;
pub mod eval;
pub mod network;
pub mod optim;
pub mod pid;
pub mod rng;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, TracedValue};
pub use tensor::{Scalar, Tensor};
