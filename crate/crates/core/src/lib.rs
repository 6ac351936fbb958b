//! Structured Recurrent Mixer language models.
//!
//! Token mixing uses upper-triangular matrices whose entries repeat along rows
//! or columns with a geometric decay. The dense form trains in parallel over
//! the sequence; the same parameters run as a recurrence whose state per layer
//! is a handful of `d`-vectors, independent of context length.

pub mod checkpoint;
pub mod bench;
pub mod config;
pub mod equivalence;
pub mod error;
pub mod mixing;
pub mod model;
pub mod par;
pub mod real;
pub mod recurrent;
pub mod rlvr;
pub mod sampling;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use config::{HeadMode, SrmConfig};
pub use error::{Result, SrmError};
pub use mixing::{KernelMixerParams, MixerHeadParams, MixerKind};
pub use model::ModelParams;
pub use recurrent::CacheMode;
pub use sampling::SamplerSpec;
pub use tensor::Matrix;
