//! Minimal dense-array numerics with reverse-mode gradients: the op set the
//! four architectures and the oracle are built from, plus Adam and a
//! finite-difference gradient checker.
//!
//! Everything is double precision. A model instance (`ParamSet` plus its
//! per-step `Tape`) is single-writer; forward-only inference on a frozen
//! `ParamSet` is safe to share across threads.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, op_suite, OpCheck, GRADCHECK_H};
pub use params::{randn, xavier, xavier_shaped, AdamConfig, ParamSet};
pub use tape::{lstm_step, stable_sigmoid, Gradients, NodeId, Tape, BATCHNORM_EPS};
pub use tensor::Tensor;
