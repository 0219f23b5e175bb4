//! Table recognition as image-to-sequence language modeling.

#![allow(clippy::needless_range_loop)]

pub mod codec;
pub mod error;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod ssp;
pub mod synthgen;
pub mod tensor;
pub mod train;
pub mod vqvae;

pub use error::{Error, Result};
pub use geometry::{iou, BBox};
pub use image::RasterImage;
pub use tensor::{Tape, Tensor, Var};
