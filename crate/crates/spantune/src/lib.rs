//! spantune: fine-tuning with span-level hallucination annotations.
//!
//! The toolkit labels generated summaries with the exact substrings that
//! are unfaithful to their source, converts those spans into token masks,
//! and fine-tunes a small autoregressive model with one of three
//! objectives that exploit the masks: gradient ascent on hallucinated
//! tokens, unlikelihood training, or task-vector negation. A closed
//! template corpus with injected errors provides an exact faithfulness
//! oracle for end-to-end experiments.

pub mod align;
pub mod annotate;
pub mod corpus;
pub mod synth;
