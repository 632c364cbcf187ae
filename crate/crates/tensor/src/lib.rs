//! Dense reverse-mode automatic differentiation sized for shallow graph
//! networks and small policy MLPs.

pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod sparse;
pub mod tape;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, compare_with_differences, relative_error, GradCheck};
pub use matrix::Matrix;
pub use optim::{Optimizer, OptimizerKind, Parameter};
pub use sparse::{CsrMatrix, SparseOperator};
pub use tape::{cosine, sigmoid, softplus, Gradients, Segments, Tape, Var};
