//! Triplet-importance-weighted pairwise ranking for implicit-feedback
//! recommenders.
//!
//! Classic pairwise training treats every (user, positive, negative)
//! triplet as equally trustworthy, which is wrong on two counts: observed
//! interactions include accidental clicks, and unobserved items are a mix
//! of genuine dislikes and items the user simply never saw. This crate
//! trains a small per-triplet weight network alongside a matrix
//! factorization backbone. The network reads a proximity state built from
//! the user embedding, the user's interest vector (the mean of their
//! consumed item embeddings, optionally augmented with item cluster
//! centers) and the two item embeddings, and emits a confidence weight in
//! (0, 1) for that triplet's loss term.
//!
//! The weight network is not fit to the training loss it scales; that
//! collapses all weights to zero. Instead it is trained bilevel-style: a
//! virtual optimizer step is taken on the weighted loss, the unweighted
//! ranking loss of a fresh batch is measured at the virtual point, and
//! the weight parameters follow the gradient of that outer objective
//! through the virtual step.
//!
//! Entry points:
//! - [`runner`] wires everything into reproducible experiments (the `til`
//!   binary is a thin wrapper over it).
//! - [`trainer::train`] runs one training job on an
//!   [`data::InteractionStore`].
//! - `examples/` in the crate root shows one runnable program per major
//!   capability.

pub mod backbone;
pub mod clustering;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod interest;
pub mod rng;
pub mod runner;
pub mod sampler;
pub mod snapshot;
pub mod trainer;
pub mod weightgen;

pub use backbone::EmbeddingTable;
pub use data::{InteractionStore, NoiseMode, NoiseSpec, SplitRatios};
pub use error::{Result, TilError};
pub use sampler::{SamplerKind, Triplet};
pub use trainer::{train, OuterMode, Strategy, TilModel, TrainConfig, TrainOutcome};
