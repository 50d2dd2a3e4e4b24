//! Desk-scale laboratory for targeted information forgetting in small
//! language models.
//!
//! The crate trains tiny word-level transformers from scratch on a synthetic
//! author-biography Q&A corpus, runs unlearning with a family of objectives
//! (GA, NPO, KTO, TPO and compositions with a retain-set gradient-descent
//! term), identifies unwanted words with a masked-LM probe or stop-word
//! heuristic, and evaluates forget quality, model utility, membership
//! leakage and per-checkpoint diagnostics.

pub mod autodiff;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod eval;
pub mod identifier;
pub mod model;
pub mod objectives;
pub mod tokenizer;

pub use error::{Error, Result};
