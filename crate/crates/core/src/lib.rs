//! Gradient methods on the positively scale-invariant (PSI) quotient manifold
//! of batch-normalized multilayer perceptrons.
//!
//! Each weight row feeding a batch-norm layer can be multiplied by any
//! positive constant without changing the network's output. Euclidean
//! optimizers still see different gradients at those equivalent points; the
//! PSI optimizers here work on the quotient instead, so two runs started from
//! rescaled copies of the same network stay rescaled copies of each other.
//!
//! Modules, bottom up:
//!
//! - [`linalg`]: dense vectors and matrices, seeded RNG.
//! - [`network`]: BN-MLP forward/backward with the PSI / scale-variant split.
//! - [`manifold`]: rescaling, Riemannian metric, gradient and retraction.
//! - [`optim`]: PSI-GD, PSI-SGD, PSI-SGDM, Euclidean baselines, renormalization.
//! - [`experiments`]: synthetic data, training loop, CSV metrics, audits.
//! - [`verify`]: the numerical property suite behind `psi verify`.
//! - [`cli`]: `psi train | verify | sweep`.
//!
//! The `examples/` directory has one runnable program per capability.

pub mod cli;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod manifold;
pub mod network;
pub mod optim;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Matrix, Rng, Vector};
pub use manifold::{Rescale, Tangent};
pub use network::{ArchSpec, Batch, BnMlp, GradBundle};
pub use optim::{OptConfig, OptKind, Optimizer};
