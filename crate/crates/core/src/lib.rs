//! Accent recognition with hybrid phonetic features.
//!
//! A desk-scale, fully testable implementation of an accent classifier
//! built on an ASR backbone: a trainable acoustic model fused with a
//! frozen reference acoustic model, a self-attention aggregator with
//! statistic pooling, CTC multi-task training, and the robustness /
//! probing experiments around it (transcript degradation, speaker
//! probing, channel-attention analysis).

pub mod acoustic;
pub mod aggregation;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod degradation;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod nn;
pub mod probes;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
