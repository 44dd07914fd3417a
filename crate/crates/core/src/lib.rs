//! Style-conditioned handwritten word synthesis.
//!
//! Four networks cooperate: a generator that renders text in a writer's
//! style, a patch discriminator, a recognizer that keeps the content
//! legible, and a writer identifier that both encodes style exemplars and
//! classifies authorship. Everything runs on a small tape-based autodiff
//! engine in [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod discriminator;
pub mod error;
pub mod experiments;
pub mod generator;
pub mod glyphs;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod nnblocks;
pub mod params;
pub mod recognizer;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod writerid;

pub use autodiff::{Conv2dSpec, Grads, Tape, Var};
pub use error::{Error, Result};
pub use params::{Adam, AdamConfig, Bound, Builder, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
