//! Core algorithms for feedback-free preference alignment with self-generated
//! negatives.
//!
//! The crate is `no_std` (with `alloc`) and performs no IO. It contains:
//!
//! - [`corpus`]: vocabulary, synthetic tasks with oracle targets, record types.
//! - [`toylm`]: a fixed-context MLP policy with exact log-probabilities,
//!   analytic gradients, ancestral sampling and SFT training.
//! - [`dpo`]: pairwise DPO loss and gradient, the multi-negative extension and
//!   the alignment loop against a frozen reference.
//! - [`filter`]: hashed n-gram embeddings, cosine ranking and negative selection.
//! - [`theorem`]: closed-form variance algebra for multi-pair vs multi-negative
//!   gradient estimators plus a Monte Carlo simulator.
//! - [`eval`]: oracle rewards, win rate, data accuracy and reward-histogram KL.
//!
//! File formats, HTTP embedders and the CLI live in the `selfcontrast` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod dpo;
pub mod eval;
pub mod filter;
pub mod optim;
pub mod seed;
pub mod theorem;
pub mod toylm;

pub use corpus::{PreferenceRecord, PromptRecord, ResponseSet, TaskKind, TaskSpec, Vocab};
pub use dpo::{DpoConfig, ReferenceSnapshot};
pub use filter::{EmbeddingVector, FilterConfig, HashedNgramEmbedder};
pub use theorem::{GradientModel, SimConfig};
pub use toylm::{Dims, FlatGradient, ModelParams, SftConfig};
