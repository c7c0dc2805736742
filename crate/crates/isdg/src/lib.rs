//! Inter-sentence dependency graph (ISDG) encoding for span-extraction
//! reading comprehension.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`ud`]: CoNLL-U parsing and validation into the UD data model.
//! - [`align`]: word-to-character and word-to-subtoken alignment, the packed
//!   `[BOS] question [SEP] context [EOS]` sequence, and answer recovery.
//! - [`graph`]: the inter-sentence dependency graph over subtoken nodes and
//!   per-node soft root paths.
//! - [`nn`]: a small reverse-mode autodiff core (tensors, tape, parameter
//!   store, optimizer, finite-difference checking).
//! - [`encoder`]: the graph encoder itself — toy self-attention backbone,
//!   one-hop relation attention, soft-path recurrent encoding with global
//!   attention, span head, and attention-distance analysis.
//! - [`synth`], [`data`], [`metrics`], [`train`]: synthetic corpus
//!   generation, preprocessing records, SQuAD-style scoring, and the
//!   training/evaluation drivers behind the CLI.

pub mod align;
pub mod data;
pub mod encoder;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod train;
pub mod error;
pub mod graph;
pub mod ud;

pub use error::{Error, Result};
