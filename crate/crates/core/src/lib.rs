//! Coarsely aligned paired image translation: GPS pairing, foreground
//! masking, misalignment-tolerant losses, toy models and training, and
//! evaluation on synthetic data with exact ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod losses;
pub mod masking;
pub mod models;
pub mod nn;
pub mod pairing;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use image::Image;
