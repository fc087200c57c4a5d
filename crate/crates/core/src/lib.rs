//! Algorithmic core of the HICOM multi-face deepfake detector.
//!
//! Everything here is `no_std` + `alloc`: domain types and metrics, crop
//! geometry, a small reverse-mode autodiff tape with the layers the four
//! detector modules need, the fusion rules, and the synthetic scene
//! generator with its perturbation suite. File formats, configuration and
//! the command-line front end live in the `hicom` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod body_face;
mod error;
pub mod fusion;
pub mod gaze;
pub mod image;
pub mod inter_face;
mod math;
pub mod model;
pub mod nn;
pub mod optim;
pub mod roi;
pub mod scene_motion;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
