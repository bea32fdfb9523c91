//! Core of the probing lab.
//!
//! Everything here is pure computation over in-memory values: a small
//! reverse-mode tensor engine, a toy vision-language decoder with per-layer
//! hidden-state taps, procedural visual-document tasks, linear probes, the
//! response metrics, and layer-group fine-tuning schedules. File formats,
//! timing and the command line live in the `plab` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod image;
pub mod init;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod probing;
pub mod response;
pub mod tape;
pub mod taskgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
