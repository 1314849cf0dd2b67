//! Core library for a knowledge-augmented vision-language gait classifier.
//!
//! Everything runs on the CPU in `f64` on top of a small eager-tape autodiff
//! engine ([`graph`]). Frozen text/video encoders ([`encoders`]) provide the
//! backbone; trainable knowledge prompts and a numeric-token decoder
//! ([`decoder`]) are tuned against contrastive and ordinal objectives
//! ([`losses`]). Synthetic subjects come from [`datasim`], and [`harness`]
//! ties it all together into cross-validated experiments.

pub mod checkpoint;
pub mod datasim;
pub mod decoder;
pub mod encoders;
pub mod gaitparams;
pub mod gradcheck;
pub mod harness;
pub mod graph;
pub mod losses;
pub mod numtext;
pub mod optim;
pub mod tensor;

pub use graph::{Gradients, Graph, GraphError, Var};
pub use optim::{Adam, ParamStore};
pub use tensor::Tensor;
