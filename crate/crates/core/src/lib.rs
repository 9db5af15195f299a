//! Speaker recognition from raw waveforms and acoustic features.
//!
//! The crate bundles three model families that share one small
//! reverse-mode differentiation core:
//!
//! * a learnable sinc band-pass filter bank applied directly to audio samples
//!   ([`sinc`]), followed by a small CNN;
//! * an x-vector style time-delay network with statistics pooling over
//!   log-mel features ([`models::XVectorNet`]);
//! * a fusion classifier that concatenates the two representations.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`).
//! Training runs in 32-bit; gradient checks run in 64-bit. The aliases at
//! the bottom of this file name the concrete instantiations.

pub mod audio_io;
pub mod config;
pub mod dsp;
mod error;
pub mod evaluation;
pub mod models;
pub mod nn;
mod scalar;
pub mod sinc;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type SincFilterBank32 = sinc::SincFilterBank<f32>;
pub type SincFilterBank64 = sinc::SincFilterBank<f64>;
pub type Sequential32 = nn::Sequential<f32>;
pub type Sequential64 = nn::Sequential<f64>;
pub type SpeakerModel32 = models::SpeakerModel<f32>;
pub type SpeakerModel64 = models::SpeakerModel<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
