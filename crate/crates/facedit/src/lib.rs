//! Identity-preserving face editing with a small conditional diffusion model.
//!
//! The pipeline decomposes a face into an identity feature (an embedding of
//! the whole image) and attribute features (a templated text caption), trains
//! a denoiser on both conditions jointly, and edits images by DDIM inversion
//! followed by dual-condition guided reverse diffusion. Everything runs at
//! desk scale: 32x32 procedural faces, a small U-shaped denoiser trained from
//! scratch on the CPU, and a closed-form score oracle for exact verification
//! of the steppers.

pub mod backbone;
pub mod condition;
pub mod config;
pub mod diffusion;
pub mod editor;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod run;
pub mod synthfaces;
pub mod trainer;
pub mod vision;

pub use error::{Error, Result};
