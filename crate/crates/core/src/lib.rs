//! Desk-scale laboratory for patch-trigger data poisoning of self-supervised
//! image encoders.
//!
//! The pipeline stages mirror the attack lifecycle: forge a trigger patch,
//! poison an unlabeled training manifest, train an SSL encoder on it, probe
//! the frozen features with a linear classifier, measure targeted false
//! positives on a patched validation set, and neutralize the backdoor by
//! distilling the encoder on clean data.

pub mod augment;
pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod imgproc;
pub mod manifest;
pub mod nn;
pub mod poison;
pub mod probe;
pub mod rng;
pub mod ssl;
pub mod synth;
pub mod trigger;

pub use error::{Error, Result};
