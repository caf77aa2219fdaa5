//! Query-bag pseudo-relevance feedback for question matching.
//!
//! A bi-GRU variational autoencoder learns query embeddings; an exact
//! dense index retrieves candidate synonyms; a BiLSTM selector keeps the
//! most trustworthy candidates as a query-bag; attention layers fuse the
//! bag into the query representation; a small transformer matcher scores
//! (query, question) pairs.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the precision used by the
//! command-line tool (`f32`) and by the gradient oracles (`f64`).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod index;
pub mod matcher;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod qbf;
pub mod qbs;
pub mod scalar;
pub mod vae;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;

pub use config::RunConfig;
pub use pipeline::{Ablation, Stage2Config, Stage2Model};
pub use vae::{Stage1Checkpoint, Stage1Config};

/// Precision used by the command-line tool.
pub type Real = f32;
/// Precision used by gradient oracles and golden files.
pub type Real64 = f64;
pub type Stage1Checkpoint32 = vae::Stage1Checkpoint<f32>;
pub type Stage1Checkpoint64 = vae::Stage1Checkpoint<f64>;
pub type Stage2Model32 = pipeline::Stage2Model<f32>;
pub type Stage2Model64 = pipeline::Stage2Model<f64>;
pub type EmbeddingIndex32 = index::EmbeddingIndex<f32>;
pub type EmbeddingIndex64 = index::EmbeddingIndex<f64>;
