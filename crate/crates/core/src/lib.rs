//! Adaptive regularization methods of order one and two (AR1, ARC) and their
//! recursive multilevel variants, with a nonlinear elliptic benchmark.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! `*F64` aliases below fix the usual double-precision instantiation.
//!
//! ```
//! use marq::{arq_minimize, problems::analytic, Order, SolverConfigF64};
//!
//! let f = analytic::rosenbrock::<f64>();
//! let report = arq_minimize(&f, &[-1.2, 1.0], &SolverConfigF64::default(), Order::Second).unwrap();
//! assert!(report.converged);
//! ```

mod error;
mod scalar;

pub mod driver;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod multilevel;
pub mod problems;
pub mod subproblem;

pub use driver::{
    arq_minimize, compute_rho, lambda_ceiling, lambda_ceiling_check, marq_minimize, update_lambda, DescendPolicy,
    RecursionPolicy, SolverConfig,
};
pub use error::{Error, Result};
pub use metrics::{aggregate, save_ratio, ComparisonSummary, IterationRecord, ModelKind, RunReport};
pub use model::{Objective, ObjectiveOracle, Order, RegularizedModel};
pub use multilevel::{build_coarse_model, build_grid_transfer, should_descend, CoarseModel, LevelHierarchy, TransferPair};
pub use problems::{build_hierarchy, random_init, GridProblem, ProblemDescriptor, RhsMode};
pub use scalar::Scalar;
pub use subproblem::{solve_model, solve_q1, solve_q2, solve_q2_smallscale_oracle, SubproblemOptions, SubproblemResult};

pub type SolverConfigF64 = SolverConfig<f64>;
pub type SolverConfigF32 = SolverConfig<f32>;
pub type GridProblemF64 = GridProblem<f64>;
pub type GridProblemF32 = GridProblem<f32>;
pub type TransferPairF64 = TransferPair<f64>;
pub type LevelHierarchyF64 = LevelHierarchy<f64>;
pub type SymBandF64 = linalg::SymBand<f64>;
