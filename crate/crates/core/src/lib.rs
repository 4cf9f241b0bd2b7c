#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod filter;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod render;
pub mod stl;
pub mod tensor;
pub mod text;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
