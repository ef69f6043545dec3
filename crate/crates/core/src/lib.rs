//! Per-language trigger embeddings for a frozen decoder-only transformer.
//!
//! A small set of continuous vectors is learned for every supported language
//! and spliced in front of the token embeddings of a query. The language model
//! itself never changes; only the trigger vectors receive gradient updates.
//! At inference time the query language is detected and the matching trigger
//! set is injected, falling back to English when detection is ambiguous.
//!
//! The crate is organised bottom-up:
//!
//! * [`tokenizer`] – byte-fallback word vocabulary with the `<trigger_tok>` placeholder.
//! * [`langid`] – character n-gram naive Bayes language identification.
//! * [`model`] – the frozen transformer: splice, forward, backward to the triggers.
//! * [`triggers`] – per-language trigger matrices with Adam state, and the bank file.
//! * [`mcq`] – prompt rendering, answer-letter readout, and the multiple-choice loss.
//! * [`dataset`] – JSONL ingestion, seeded 80/20 splits, the planted-signal generator.
//! * [`trainer`] – the per-epoch, per-language, per-batch trigger optimisation loop.
//! * [`evaluator`] – strategy scoring, relative advantage, report rendering.
//! * [`slot_task`] – the planted vocabulary and the slot-instruction task.
//! * [`circuit`] – the bundled frozen model, wired by hand to solve the slot task.

pub mod circuit;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod langid;
pub mod language;
pub mod mcq;
pub mod model;
pub mod slot_task;
pub mod tokenizer;
pub mod trainer;
pub mod triggers;

pub use error::{Error, Result};
pub use language::Language;
