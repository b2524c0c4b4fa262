//! Multi-stage text retrieval.
//!
//! The crate covers the full loop of a two-phase dense retrieval system at
//! desk scale:
//!
//! - [`corpus`]: documents, queries, qrels and TREC run files.
//! - [`tokenize`]: whitespace and character n-gram analyzers, vocabulary.
//! - [`sparse`]: inverted index with TF-IDF and BM25+ scoring.
//! - [`encoder`]: embedding-table dual encoder with mean pooling, trained by
//!   a margin contrastive loss and optionally pretrained with masked-token
//!   prediction.
//! - [`stages`]: candidate generation, pair labeling, hard-negative mining
//!   and the end-to-end pipeline variants.
//! - [`fusion`]: per-query min-max normalization, three-way weighted score
//!   fusion and an exhaustive simplex grid search over the weights.
//! - [`metrics`]: Recall@k, MRR@k, MAP@k and nDCG@k.
//!
//! Per-query work is data-parallel through [`par`]; the `parallel` feature
//! (on by default) runs it on rayon, and results never depend on the thread
//! count.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod par;
pub mod sparse;
pub mod stages;
pub mod synthetic;
pub mod tokenize;

pub use error::{Error, Result};
pub use par::Jobs;

/// Version string written into manifests and artifacts.
pub const VERSION: &str = concat!("msret ", env!("CARGO_PKG_VERSION"));
