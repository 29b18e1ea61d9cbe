//! Few-shot meta-learning with MAML and HyperMAML.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors with a reverse-mode tape that supports one
//!   level of gradient-of-gradient.
//! - [`nn`]: the Conv4 / MLP / identity encoders, the linear classifier head
//!   and the hypernetwork.
//! - [`tasks`]: episodic N-way K-shot samplers.
//! - [`meta`]: MAML, HyperMAML, Adam and the schedules.
//! - [`bench`]: evaluation, timing, decision-boundary plots and reports.

mod error;
pub mod bench;
pub mod meta;
pub mod nn;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor, TensorError};
