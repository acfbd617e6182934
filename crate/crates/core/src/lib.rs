//! Adverse drug event extraction with a drug-centric token classifier
//! trained from teacher annotations.
//!
//! The crate covers the whole pipeline: dictionary drug matching
//! ([`lexicon`]), corpus curation ([`corpus`]), teacher prompting and span
//! grounding ([`teacher`]), a small dense numeric kernel with manual
//! backpropagation ([`neural`]), the student model and a pairwise baseline
//! ([`model`]), scoring and data splits ([`eval`]), plus the synthetic corpus
//! generator, benchmark and pipeline orchestration used by the `ade` binary.

pub mod bench;
pub mod corpus;
pub mod eval;
pub mod io;
pub mod lexicon;
pub mod model;
pub mod neural;
pub mod pipeline;
pub mod synth;
pub mod teacher;

pub use corpus::{Document, Sentence, SentenceKey};
pub use lexicon::{DrugTrie, LexiconEntry, Mention};
pub use teacher::{AdeAnnotation, Provenance};
