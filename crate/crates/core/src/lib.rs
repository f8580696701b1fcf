//! Core of the ViLU-Net segmentation stack.
//!
//! Everything here is pure computation over in-memory buffers: a small
//! reverse-mode tensor engine, the stabilized mLSTM cell and its ViL block,
//! the U-shaped network, the Dice + cross-entropy objective, segmentation
//! metrics, CT preprocessing, a synthetic dataset generator and the Adam
//! training step. File formats, checkpoints and the command line live in the
//! `vilu` companion crate.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod mlstm;
pub mod net;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};
