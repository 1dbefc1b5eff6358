//! Consensus selection of video captions.
//!
//! A pool of encoder-decoder models each describes a video; the best sentence
//! is chosen in two phases: leave-one-out CIDEr agreement across the pool,
//! then a trained pairwise oracle re-ranks the survivors. The crate also
//! carries the caption metrics (CIDEr, BLEU, ROUGE-L, METEOR-lite) built from
//! scratch, a small reverse-mode gradient core the toy models train on, and a
//! synthetic corpus generator so the whole pipeline runs at desk scale.

pub mod cli;
pub mod consensus;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod oracle;
pub mod synth;
pub mod text;

pub use error::Error;
