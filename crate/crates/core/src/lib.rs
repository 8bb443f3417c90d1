//! Top-down control networks for multi-task learning.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`graph`], [`optim`]: dense tensors, tape-based reverse-mode
//!   autodiff and Adam.
//! * [`data`]: MNIST IDX ingestion and deterministic Multi-MNIST grids.
//! * [`model`]: the LeNet-style backbone, the BU1/TD/BU2 control network and
//!   the comparison models.
//! * [`train`], [`eval`], [`selectivity`], [`checkpoint`]: training loops,
//!   evaluation, readout probes and persistence.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod selectivity;
pub mod tensor;
pub mod train;

pub use graph::{EwiseOp, Gradients, Graph, SoftmaxAxis, Target, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Real, Tensor, TensorError};
