//! Memory-efficient training through online activation-subspace learning.
//!
//! Each linear layer keeps an orthonormal basis `U` (d×r) for the dominant
//! directions of its input activations. The forward pass stays exact, but only
//! the projected activations `X·U` (N×r) are cached for the backward pass, so
//! weight gradients, Adam moments and cached activations all live in rank-r
//! coordinates. The basis is tracked online with a normalized Oja update and
//! the optimizer moments are transported whenever the basis moves.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: dense matrices, QR orthonormalization, symmetric eigensolver, seeded RNG.
//! - [`subspace`]: covariance, Oja / periodic-PCA / fixed trackers and the drift metric.
//! - [`optim`]: projection-aware low-rank Adam plus a plain Adam baseline.
//! - [`traingraph`]: compressed linear layers, toy models, losses and the memory ledger.

pub mod error;
pub mod numerics;
pub mod optim;
pub mod subspace;
pub mod traingraph;

pub use error::{Error, Result};
pub use numerics::{EigenPair, Matrix, Rng};
