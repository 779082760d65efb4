//! Multivalued backward SDEs with time-delayed generators on exact Rademacher
//! scenario trees.
//!
//! The equation solved is
//!
//! ```text
//! -dY(t) + dphi(Y(t)) dt  ∋  F(t, Y(t), Z(t), Y_t, Z_t) dt - Z(t) dW(t),   Y(T) = xi
//! ```
//!
//! where `Y_t, Z_t` are the paths on `[t - T, t]` (extended by `Y(0)` and `0`
//! before time zero) and `dphi` is the subdifferential of a proper convex
//! lower semicontinuous `phi` with `phi(0) = 0 = min phi`. Two schemes are
//! provided: Yosida penalization, with `dphi` replaced by `grad phi_eps`, and a
//! prox step through the resolvent. Delay arguments are resolved by Picard
//! iteration over whole paths.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix `f64`.
//!
//! ```
//! use mbsde::{build_tree, solve_classical, GeneratorSpec, SolverConfig};
//!
//! let tree = build_tree::<f64>(3, 1.0, 1).unwrap();
//! let xi: Vec<f64> = tree.brownian().leaves().to_vec();
//! let sol = solve_classical(&tree, &xi, &GeneratorSpec::zero(1, 1), &SolverConfig::default()).unwrap();
//! assert!(sol.y0()[0].abs() < 1e-15);
//! ```

// `!(x > 0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod convex;
pub mod error;
pub mod generators;
pub mod lattice;
pub mod linalg;
pub mod problems;
pub mod scalar;
pub mod solver;

pub use analysis::{
    apriori_audit, default_probes, epsilon_rate_fit, multiplier_gap, path_norms, solution_residuals,
    stability_audit, yosida_audit, AprioriAudit, BoundAudit, NormReport, RateFit, Residuals, RunData,
    UniformityVerdict, YosidaAudit,
};
pub use convex::{ConvexKind, ConvexSpec, Custom1D, SubgradientCheck, YosidaTriple};
pub use error::{Error, Result};
pub use generators::{
    delayed_quadrature, eval_generator, generator_bound_diagnostic, lipschitz_audit, DelayMeasure, GeneratorKind,
    GeneratorSpec, History, PathHistory, TreeHistory, Weight, ZeroHistory,
};
pub use lattice::{
    build_tree, conditional_expectation, history_value, z_projection, AdaptedProcess, ProcessKind, ScenarioTree,
    TimeGrid, DEFAULT_MAX_NODES,
};
pub use problems::{Problem, Terminal};
pub use scalar::Scalar;
pub use solver::{
    backward_pass, check_terminal, check_wellposedness, epsilon_table, picard_solve, prox_step_solve, solve_bsvi,
    solve_classical, solve_penalized, solve_schedule, EpsilonRow, PenaltyStep, PicardDiagnostics, Scheme, Solution,
    SolutionScheme, SolverConfig, Step, WellposednessReport,
};

pub type Tree = ScenarioTree<f64>;
pub type Process = AdaptedProcess<f64>;
pub type Convex = ConvexSpec<f64>;
pub type Generator = GeneratorSpec<f64>;
pub type Config = SolverConfig<f64>;
pub type Sol = Solution<f64>;

pub type TreeF32 = ScenarioTree<f32>;
pub type ProcessF32 = AdaptedProcess<f32>;
pub type ConvexF32 = ConvexSpec<f32>;
pub type GeneratorF32 = GeneratorSpec<f32>;
pub type ConfigF32 = SolverConfig<f32>;
pub type SolF32 = Solution<f32>;
