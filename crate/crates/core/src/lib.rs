//! Training of large general kernel models `f(x) = sum_j alpha_j k(x, z_j)`
//! by Nyström-preconditioned stochastic gradient descent with delayed
//! projection onto the span of the model centers.
//!
//! The crate is organized bottom-up:
//!
//! * [`kernel`]: radial kernels and kernel-matrix assembly.
//! * [`linalg`]: top-q symmetric eigensystems and SPD solves.
//! * [`preconditioner`]: the Nyström preconditioner and its actions.
//! * [`model`]: kernel models, the between-projection auxiliary state, prediction.
//! * [`projection`]: exact and SGD-based projection onto the center span.
//! * [`solver`]: the training loop and its cost accounting ([`cost`]).
//! * [`oracle`]: dense reference solutions used for verification.
//! * [`data`]: dataset loading, synthetic data and metrics.
//! * [`bench`]: sweeps over the center count.

pub mod bench;
pub mod cost;
pub mod data;
mod error;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod preconditioner;
pub mod projection;
mod real;
pub mod solver;

pub use error::{Error, Result};
pub use kernel::{kernel_eval, kernel_matrix, KernelFamily, KernelSpec};
pub use model::{classify, predict_auxiliary, AuxiliaryState, KernelModel};
pub use preconditioner::{AttachedPreconditioner, NystromPreconditioner};
pub use real::{Precision, Real};
pub use solver::{train, MergeRule, ProjectionMode, TrainConfig, TrainReport, Trainer};
