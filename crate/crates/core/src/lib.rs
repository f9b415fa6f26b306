//! Non-autoregressive long-horizon forecasting for marked temporal point
//! processes with a conditional denoising diffusion model.
//!
//! A target window of future events is mapped into Euclidean space
//! ([`seqmap`]), corrupted and denoised by a DDPM ([`diffusion`]) whose
//! clean-sample predictor is a history-conditioned network ([`denoiser`]),
//! trained end to end ([`training`]) and scored with multi-step MAE/ACC
//! ([`evaluation`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod eventdata;
pub mod numeric;
pub mod rng;
pub mod seqmap;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
