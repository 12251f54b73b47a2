//! Feedback recurrent autoencoder codec for spectrogram sequences.
//!
//! - [`autodiff`]: reverse-mode differentiation over dense `f64` tensors
//! - [`nn`]: FC and GRU layers, the scalar codebook, Adam, parameter files
//! - [`schemes`]: the seven recurrency schemes, streaming codec, model files
//! - [`prior`]: latent priors for the rate term and entropy coding
//! - [`training`]: rate–distortion training, datasets, evaluation
//! - [`dsp`]: STFT, dB spectrograms, Mel weighting, Griffin-Lim, WAV
//! - [`bitstream`]: fixed-rate and arithmetic-coded streams
//! - [`cli`]: the `frae` command

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bitstream;
pub mod cli;
pub mod dsp;
pub mod nn;
pub mod prior;
pub mod schemes;
pub mod training;
