//! Small linear-algebra kernel: dense vector helpers, symmetric banded storage
//! with an instrumented Cholesky factorization, and CSR matrices for the
//! transfer operators.

mod band;
mod csr;
mod vector;

pub use band::{dense_model_flops, shadow_factor_flops, BandCholesky, FactorFailure, SymBand};
pub use csr::Csr;
pub use vector::{add, axpy, dot, norm2, norm_inf, scaled, sub};
