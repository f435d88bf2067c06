//! Minimal reverse-mode differentiable tensor core.

mod graph;
mod params;
mod recurrent;
mod tensor;

#[cfg(test)]
mod op_tests;

pub use graph::{Graph, Var};
pub use params::{read_tensor_table, write_tensor_table, Bound, CountingReader, ParamSet};
pub use recurrent::GruCell;
pub use tensor::Tensor;

pub(crate) use graph::{log_softmax_rows, memory_row};
pub(crate) use tensor::matmul_acc;
