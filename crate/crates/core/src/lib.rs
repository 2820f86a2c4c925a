// Negated float comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod adapter;
pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub(crate) mod linalg;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
