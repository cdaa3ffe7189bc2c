//! Attention-pooled transformer classifier for free-text radiology reports.
//!
//! Pipeline: synthetic corpus generation and patient-level splitting
//! ([`corpus`]), word-level tokenization ([`tokenizer`]), a small transformer
//! encoder ([`encoder`]), attention pooling ([`pooling`]), a batch-normalized
//! classification head ([`head`]), training with Adam and a finite-difference
//! gradient oracle ([`trainer`]), comparison baselines ([`baselines`]),
//! confusion-matrix metrics ([`metrics`]), t-SNE projection ([`projection`])
//! and a lasso labelling service ([`annotation`]).

pub mod annotation;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod head;
pub mod jsonl;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pooling;
pub mod projection;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
