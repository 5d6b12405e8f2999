//! Training pipeline for style-token TTS on broadcast-style audio.
//!
//! The pipeline has two trained stages plus shared plumbing:
//!
//! - [`musicfilter`]: a spectral-mask network that removes background music
//!   from noisy speech.
//! - [`gsttts`]: a convolutional text-to-mel model with a style-token layer
//!   and an auxiliary quality classifier, trained on clean plus filtered
//!   speech; [`ssrn`] upsamples its coarse mel output to linear spectrograms
//!   for Griffin-Lim synthesis.
//! - [`dsp`], [`corpus`], [`nn`], [`harness`]: signal processing, dataset
//!   construction, the autodiff/optimizer substrate, and experiment
//!   orchestration.

pub mod audio;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod gsttts;
pub mod harness;
pub mod musicfilter;
pub mod nn;
pub mod ssrn;

pub use audio::{Waveform, SAMPLE_RATE};
pub use error::{Error, Result};
