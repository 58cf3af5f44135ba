//! Layer-wise post-training quantization.
//!
//! Given weights `W` (q×p) and calibration inputs `X` (p×n), the solvers
//! search for `Ŵ` on a per-output-channel uniform grid minimizing
//! `‖WX − ŴX‖_F²`. Everything works from the Gram matrix `Σ = XXᵀ`.
//!
//! ```
//! use quantease::{build_uniform_grid, gen_synthetic, quantease_basic, LayerProblem, SolverConfig, SyntheticSpec};
//!
//! let (w, x) = gen_synthetic(&SyntheticSpec { q: 8, p: 16, n: 64, rho: 0.5, weight_scale: 1.0, seed: 0 }).unwrap();
//! let problem = LayerProblem::build(w, &x).unwrap();
//! let grid = build_uniform_grid(problem.weights(), 3).unwrap();
//! let sol = quantease_basic(&problem, &grid, &SolverConfig::default()).unwrap();
//! assert!(sol.feasible);
//! ```

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bench;
pub mod error;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod outlier;
pub mod problem;
pub mod quantease;
pub mod runner;
pub mod solution;

pub use baselines::{awq_solve, gptq_solve, rtn_quantize, AwqConfig, GptqConfig};
pub use error::{Error, ErrorKind, Result};
pub use grid::{build_trimmed_grid, build_uniform_grid, QuantGrid};
pub use linalg::{gram, power_method, DenseMatrix};
pub use outlier::{hard_threshold, iht_step, quantease_outlier, OutlierMode, OutlierSolution, SparseOutliers};
pub use problem::{gen_synthetic, LayerProblem, SyntheticSpec};
pub use quantease::{is_cw_minimum, quantease_accel, quantease_basic, quantease_modified, BasicSolver, SolverConfig};
pub use runner::{run_method, MethodOutput, MethodParams};
pub use solution::{QuantSolution, SolverId, TracePoint};
