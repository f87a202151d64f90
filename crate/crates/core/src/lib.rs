//! Long-tailed prompt tuning on a from-scratch micro vision transformer.
//!
//! The crate is organised bottom-up: a dense tensor engine with
//! reverse-mode differentiation ([`tensor`], [`tape`], [`optim`]), the
//! prompt-tuned transformer ([`vit`]), the long-tailed objectives
//! ([`objective`]), data generation and sampling ([`data`]), the staged
//! trainer with checkpointing ([`trainer`], [`checkpoint`]), and the
//! evaluation and diagnostics ([`analysis`]).

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use image::Image;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
