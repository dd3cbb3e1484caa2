//! Desk-scale adversarial robustness laboratory for video action
//! classification.
//!
//! The crate bundles a small reverse-mode tensor engine, 3D CNN models, a
//! synthetic motion-labeled video corpus, the PGD attack family with video
//! variants (masked, frame border, frame saliency, flickering), adversarial
//! training and its adaptive / curriculum / generative extensions, plus
//! evaluation and export helpers. Everything runs deterministically from a
//! single seed, on CPU.

pub mod attacks;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{CoreError, Result};
pub use rng::StreamRng;
pub use tensor::{grad_check, GradCheckReport, Tape, Tensor, VarId};
