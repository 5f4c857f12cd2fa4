//! Survival-prediction pipeline for multi-platform gene-expression cohorts:
//! ingestion and merging, per-gene quantile normalization, censoring-aware
//! labels, t-SNE projection, a classifier suite with a random-projection
//! ensemble, cross-validated AUC evaluation and seeded hyperparameter search.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod models;
pub mod normalize;
pub mod pipeline;
pub mod project;
pub mod rng;
pub mod rpensemble;
pub mod stats;
pub mod survival;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
