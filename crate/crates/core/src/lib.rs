//! Cascaded mask-estimation stages, each an attention block followed by
//! dilated convolution stacks, for speech enhancement by magnitude masking.
//!
//! The crate is organized bottom-up:
//!
//! * [`dsp`]: Hann window, STFT analysis and weighted overlap-add synthesis.
//! * [`nn`]: a small row-major tensor, a named parameter store, and the
//!   differentiable layer primitives (forward and hand-written backward).
//! * [`blocks`]: self-attention block, TCN blocks and stacks, a single mask
//!   estimation stage and the fusion block.
//! * [`model`]: the K-stage cascade, its losses, enhancement and checkpoints.
//! * [`train`]: Adam, zero-padded batching and the training loop.
//! * [`audio`]: PCM16 WAV files, SNR mixing and a synthetic toy corpus.
//! * [`metrics`]: SI-SDR, SNR and test-set reports.

pub mod audio;
pub mod blocks;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
