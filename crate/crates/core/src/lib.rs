//! Few-shot open-set keyword spotting.
//!
//! An encoder maps MFCC sequences to embeddings. It is trained episodically
//! with a prototypical-network loss on multi-view samples drawn from a
//! [`source::SampleSource`] through a FIFO [`buffer::EpisodeBuffer`].
//! At inference time keywords are enrolled by averaging support embeddings,
//! and queries farther than a distance threshold from every prototype are
//! rejected as unknown.

// `!(x > 0.0)` style checks are kept because they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod buffer;
pub mod corpus;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod inference;
pub mod proto;
pub mod rng;
pub mod source;
pub mod train;

pub use error::{Error, Result};

pub use augment::{AugmentConfig, Augmenter};
pub use buffer::{BufferConfig, EpisodeBuffer, SlotFactory};
pub use dsp::{DspConfig, MfccExtractor, MfccSequence, Waveform, SAMPLE_RATE};
pub use encoder::{Checkpoint, Encoder, EncoderConfig};
pub use eval::{EvalCorpus, EvalReport, ThresholdMode, TrialSpec};
pub use inference::{DetectionConfig, DetectionResult, EnrollmentProfile, Prediction, THRESHOLD_DISABLED};
pub use proto::{Distance, PrototypeSet};
pub use source::{DatasetOptions, DirDataset, KeywordClass, OracleGenConfig, OracleSource, SampleSource};
pub use train::{StepRecord, TrainConfig, Trainer};
