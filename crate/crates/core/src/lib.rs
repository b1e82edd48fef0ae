//! Infinite-width neural network Gaussian process kernels and exact GP regression.

pub mod data;
pub mod error;
pub mod expectation;
pub mod experiment;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod lookup;
pub mod mc;
pub mod nonlinearity;
pub mod phase;

pub use error::{Error, Result};
pub use expectation::{AnalyticRelu, DirectQuadrature, Evaluator, EvaluatorKind, GaussianExpectation};
pub use kernel::{build_kernel_matrix, KernelMatrix, NetworkHyperparams};
pub use lookup::{GridSpec, LookupTable};
pub use nonlinearity::Nonlinearity;
