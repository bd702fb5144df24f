//! Context-aware biaffine localization for temporal sentence grounding:
//! a small reverse-mode autodiff core, the network built on it, scaled-IoU
//! training, recall evaluation and synthetic/real data handling.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod layers;
pub mod mcbl;
pub mod mmsa;
pub mod model;
pub mod params;
pub mod seeds;
pub mod segment;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::Cbln;
pub use segment::Segment;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
