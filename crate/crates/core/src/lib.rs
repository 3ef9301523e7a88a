//! In-context concept learning and transfer on latent diffusion models.
//!
//! A localized visual concept (an ornament, a pattern) is learned from one
//! masked source image as a new prompt token together with fine-tuned
//! cross-attention keys and values. The token can then be painted into a
//! masked region of a target image with blended latent editing and
//! cross-attention guidance, used to generate new objects, or used to find
//! the corresponding region on other images.

pub mod backend;
pub mod concept;
pub mod error;
pub mod image_io;
pub mod masking;
pub mod optim;
pub mod roi;
pub mod seed;
pub mod transfer;

pub use error::{Error, Result};
