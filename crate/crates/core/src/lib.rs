//! Speech recognition with a multimodal fusion decoder that reads on-screen
//! text alongside audio.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`numerics`]), the model blocks built on it, a CTC loss, edit-distance
//! scoring, a synthetic homophone corpus and the two-stage training recipe.

pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod metrics;
pub mod mfd_decoder;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod train;
pub mod visual_encoder;

pub use error::{CheckpointError, Error, Result};
