//! Semi-supervised fine-grained recognition on a desk-scale synthetic
//! benchmark: data generation, a small trainable classifier, augmentation
//! and test-time views, pseudo-label mining, and logit fusion.

pub mod augment;
pub mod data;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod image;
pub mod mining;
pub mod model;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
