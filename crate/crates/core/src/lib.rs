//! Prototype knowledge distillation for missing-modality segmentation.
//!
//! A multi-modality teacher network is trained first; a student that only
//! sees one modality is then trained with segmentation loss plus two
//! distillation terms: a temperature-softened pixel-wise KL term and a
//! prototype term matching the cosine similarity between every pixel
//! embedding and every class prototype. Everything runs on a small seeded
//! synthetic benchmark so each piece can be checked against direct oracles.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod model;
pub mod ndcore;
pub mod proto;
pub mod trainer;

pub use error::{Error, Result};
