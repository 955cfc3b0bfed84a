//! Numerical laboratory for the geometry of supervised contrastive loss
//! under the unconstrained-features model.
//!
//! The crate optimizes the loss directly over the embedding matrix, with or
//! without a non-negativity constraint, and checks results against the
//! closed-form lower bounds:
//!
//! - [`geometry`]: label/embedding/Gram types, orthogonal-frame and simplex
//!   ETF constructors, feasible-set projection.
//! - [`loss`]: full-batch and mini-batch loss, gradients and lower bounds.
//! - [`batching`]: batch sets, the batch interaction graph, its
//!   connectivity conditions, and batch-binding.
//! - [`solver`]: projected gradient descent with restarts.
//! - [`metrics`]: distance to OF/ETF, neural-collapse ratio, cosines.
//! - [`analysis`]: the imbalanced ETF counterexample and the non-OF
//!   mini-batch optimizers.
//!
//! Inner loops run on rayon when the default `parallel` feature is on.
//! Reductions always happen in index order, so results are bit-identical
//! with and without it.

pub mod analysis;
pub mod batching;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod solver;

pub use error::{Error, Result};
pub use geometry::{EmbeddingMatrix, GramMatrix, LabelSet, MeanMatrix};
pub use loss::{LossConfig, LossReport};
