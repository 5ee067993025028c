//! Dense tensors, linear algebra, reverse-mode differentiation, k-means and
//! power iteration.

mod error;
pub mod gradcheck;
pub mod graph;
pub mod kmeans;
pub mod linalg;
pub mod power;
mod tensor;

pub use error::{NumError, Result};
pub use graph::{Graph, OpKind, Var};
pub use kmeans::{kmeans, KMeans};
pub use linalg::{cholesky, pairwise_sqdist, solve_triangular, Cholesky, JitterPolicy};
pub use power::{power_iteration, power_iteration_converged};
pub use tensor::Tensor;
