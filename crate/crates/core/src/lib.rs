//! Layer-wise probing of hallucination in a desk-scale encoder-decoder
//! translation model.
//!
//! The crate trains a small transformer on a synthetic parallel corpus with
//! a controllable domain shift, flags natural hallucinations with the
//! adjusted-BLEU criterion, and fits word-translation probes on every
//! encoder and decoder layer of the frozen model.

pub mod corpus;
pub mod hallucination;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod probing;
pub mod report;
pub mod transformer;
