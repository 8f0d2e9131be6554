//! Tensor completion with Generalized Least Squares Kernelized Tensor
//! Factorization: a kernelized low-rank CP component plus a
//! kernel-correlated local residual, fitted by ALS with matrix-free CG.

pub mod cli;
pub mod error;
pub mod glskf;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod mask;
pub mod metrics;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
pub use glskf::{FitOutput, FitReport, Glskf, GlskfConfig, Mode};
pub use kernels::{CovarianceOperator, KernelSpec};
pub use mask::ObservationMask;
pub use tensor::{DenseTensor, FactorSet};
