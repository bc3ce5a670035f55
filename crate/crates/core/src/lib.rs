//! Audio / ultrasound-tongue-video synchronisation with a two-stream
//! contrastive network.
//!
//! The crate is organised bottom-up:
//!
//! - [`media_io`]: WAV, raw ultrasound and parameter sidecar formats, bundled per utterance.
//! - [`dsp`]: MFCC extraction with window/hop derived from the ultrasound frame rate.
//! - [`pipeline`]: offset application, decimation, downsampling, zero-region removal,
//!   windowing, pair creation, corpus splits and balanced batching.
//! - [`nn`]: a small dense-tensor network engine (conv, batchnorm, pooling, linear,
//!   contrastive loss, Adam, plateau scheduling, finite-difference checks, checkpoints).
//! - [`model`]: the two-stream model, training loop, candidate-offset search and evaluation.
//! - [`synth`]: a synthetic corpus generator with known ground-truth offsets.

pub mod dsp;
pub mod error;
pub mod media_io;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use media_io::{AudioSignal, UltrasoundSequence, UtteranceBundle, UtteranceParams, UtteranceType};
pub use dsp::{MfccConfig, MfccMatrix};
pub use pipeline::{MfccWindow, SamplePair, SplitSpec, UltrasoundWindow};
pub use model::{CandidateSet, SyncPrediction, SyncReport, UltraSyncModel};
pub use nn::{Scalar, Tensor};
