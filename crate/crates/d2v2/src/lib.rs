//! Desk-scale self-supervised pretraining with contextualized targets.
//!
//! The training objective: an EMA teacher encodes the full, unmasked sample
//! and its top-K FFN block outputs (instance-normalized, averaged) become
//! regression targets; a student encodes only the unmasked positions of M
//! masked views of the same sample and a small grouped-convolutional decoder
//! predicts the teacher targets at the masked positions. Inverse block
//! masking keeps contiguous regions visible so the student has real context
//! to work with.
//!
//! Everything runs on CPU from scratch: a small reverse-mode autodiff graph
//! ([`graph`]), mask planning ([`masking`]), modality feature encoders and
//! the shared Transformer backbone ([`network`]), the convolutional decoder
//! ([`decoder`]), the EMA teacher and target builder ([`teacher`]), and the
//! multi-mask training loop with FLOP accounting ([`trainer`]).
//!
//! See the crate examples for runnable walkthroughs of each piece, and the
//! `d2v2` binary for the `pretrain` / `probe` / `ablate` / `report` commands.

pub mod error;
pub mod graph;
pub mod harness;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod masking;
pub mod model;
pub mod network;
pub mod optim;
pub mod probe;
pub mod teacher;
pub mod trainer;
pub mod tensor;

pub use error::{D2v2Error, Result};

