//! Speaker-centered visual affective features and reliability-gated
//! multimodal fusion for emotion recognition in conversation.
//!
//! Stage 1 turns each utterance into a speaker-centered prompt bundle and
//! acquires a visual embedding from a frozen embedding service (or the
//! synthetic stand-in). Stage 2 trains a small fusion head over cached
//! visual, textual and acoustic features: causal context encoders,
//! visual-query cross-attention, a residual complement and a reliability
//! gate driven by a video-only classifier.

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod fusion;
pub mod numcore;
pub mod prompting;
pub mod providers;
pub mod rng;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
