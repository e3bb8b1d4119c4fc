//! Weakly supervised personalized acoustic-model adaptation.
//!
//! Acoustic tokens are discovered from a speaker's unlabeled audio and used as
//! auxiliary targets for a multi-task network (phoneme states plus token
//! states) that shares hidden layers and a feature-space linear transform.

pub mod adapt;
pub mod discovery;
pub mod error;
pub mod frontend;
pub mod harness;
pub mod hmm;
mod io_util;
pub mod kv;
pub mod network;

pub use error::{Error, Result};
