//! Distortion-sensitivity-map guided mixing for no-reference image quality
//! pre-training, with a small from-scratch training stack.

pub mod config;
pub mod distortion;
pub mod dsm;
pub mod dsmix;
pub mod error;
pub mod experiment;
pub mod image;
pub mod label;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod selfcheck;
pub mod synth;
pub mod trainkit;

pub use error::{Error, Result};
pub use image::{ImageRgb, Plane};
