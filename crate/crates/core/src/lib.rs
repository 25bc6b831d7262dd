#![no_std]
//! Task-adaptive meta-learning (TAML) for multi-pair text style transfer on a
//! synthetic substitution-cipher task family.

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod infernet;
pub mod math;
pub mod metalearn;
pub mod model;
pub mod params;
pub mod taskgen;
pub mod tensor;
pub mod text;

pub use autodiff::{grad_check, Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use params::ParameterSet;
pub use tensor::Tensor;
