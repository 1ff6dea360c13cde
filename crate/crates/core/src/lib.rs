//! Continual learning for a small text-conditioned video diffusion model.
//!
//! A caption/video pair arrives at a time; the denoiser is fine-tuned on it
//! with one of three strategies (plain fine-tuning, an EWC anchor, or
//! distillation from a frozen copy of itself plus a temporal consistency
//! term). At inference time a stored training video is chosen by prompt
//! similarity, inverted to noise with DDIM and resampled under the new
//! prompt. Everything runs on synthetic moving-shape videos so that the
//! whole pipeline, evaluation included, is deterministic and fast on a CPU.

// `!(x > 0.0)` is how configuration checks reject NaN along with
// non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod continual;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod losses;
pub mod numerics;
pub mod retrieval;
pub mod synthdata;

pub use error::{Error, Result};
