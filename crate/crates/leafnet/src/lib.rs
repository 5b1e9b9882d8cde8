//! Siamese metric-learning toolkit for leaf disease recognition.
//!
//! A lightweight convolutional backbone maps 3x128x128 leaf images to
//! 32-d embeddings; pairs of images are trained with a contrastive loss
//! over shared weights; classification queries a 5-support-per-class
//! gallery with majority voting. The `leafnet` binary wires these pieces
//! into dataset preparation, training and evaluation commands.

pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod gallery;
pub mod image;
pub mod manifest;
pub mod net;
pub mod pairs;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
