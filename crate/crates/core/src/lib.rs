// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod stream;
pub mod trainer;
pub mod windowing;

pub use error::{CladError, Result};
