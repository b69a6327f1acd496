//! Tutor-persona activation steering at desk scale.
//!
//! The pipeline trains a tiny decoder-only transformer on a synthetic
//! multi-tutor dialogue corpus, builds (ground truth, population-mean)
//! preference pairs, learns one shared steering direction with positive
//! per-tutor coefficients, and evaluates steered generation.

pub mod corpus;
pub mod error;
pub mod config;
pub mod evalkit;
pub mod pipeline;
pub mod records;
pub mod seed;
pub mod sftpair;
pub mod steering;
pub mod textcodec;
pub mod tinylm;

pub use error::{Error, Result};
