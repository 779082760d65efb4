//! Backward schemes on the scenario tree.
//!
//! One backward pass computes, for every node at level `i` (from `N-1` down to
//! `0`):
//!
//! ```text
//! E   = mean of Y over the children
//! Z_i = E[Y_{i+1} dW^T | F_i] / dt
//! X   = E + dt * F(t_i, E, Z_i, past)
//! ```
//!
//! and then `Y_i` from `X` according to the [`Step`]:
//!
//! * plain: `Y_i = X`, `U_i = 0`;
//! * penalized, implicit: `Y_i + dt grad phi_eps(Y_i) = X` (closed form through
//!   the resolvent), `U_i = (X - Y_i) / dt = grad phi_eps(Y_i)`;
//! * penalized, explicit: `U_i = grad phi_eps(E)`, `Y_i = X - dt U_i`; stable
//!   only while `eps >= dt / 2`;
//! * prox step: `Y_i = J_dt X`, `U_i = (X - Y_i) / dt`.
//!
//! Values of `(Y, Z)` strictly before `t_i` are read from a frozen iterate;
//! [`picard_solve`] repeats passes until successive iterates agree.

use serde::Serialize;

use crate::analysis::path_norms;
use crate::convex::ConvexSpec;
use crate::error::{Error, Result};
use crate::generators::{eval_generator, GeneratorSpec, TreeHistory};
use crate::lattice::{mean_of, project_z, AdaptedProcess, ScenarioTree};
use crate::linalg;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Penalized,
    ProxStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyStep {
    Implicit,
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig<T> {
    /// Exponential weight; `None` means `24 L^2 + 1`.
    pub beta: Option<T>,
    /// Sup-norm tolerance on successive `(Y, Z)` iterates.
    pub picard_tol: T,
    pub picard_max_iters: usize,
    pub epsilon_schedule: Vec<T>,
    pub scheme: Scheme,
    pub penalty_step: PenaltyStep,
    /// Refuse to run when `K e^(beta T) >= 6 L^2`.
    pub hard_gate: bool,
    /// Abort once the contraction ratio exceeds this for `divergence_window`
    /// consecutive iterations.
    pub divergence_ratio: T,
    pub divergence_window: usize,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        SolverConfig {
            beta: None,
            picard_tol: T::lit(1e-10),
            picard_max_iters: 200,
            epsilon_schedule: (0..=10).map(|k| T::lit(0.5f64.powi(k))).collect(),
            scheme: Scheme::Penalized,
            penalty_step: PenaltyStep::Implicit,
            hard_gate: false,
            divergence_ratio: T::lit(1.05),
            divergence_window: 5,
        }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.beta {
            if !(b > T::zero()) || !b.is_finite() {
                return Err(Error::invalid("beta must be positive"));
            }
        }
        if !(self.picard_tol > T::zero()) {
            return Err(Error::invalid("picard_tol must be positive"));
        }
        if self.picard_max_iters == 0 {
            return Err(Error::invalid("picard_max_iters must be at least 1"));
        }
        if self.epsilon_schedule.is_empty() {
            return Err(Error::invalid("epsilon schedule must not be empty"));
        }
        if self.epsilon_schedule.iter().any(|&e| !(e > T::zero()) || !e.is_finite()) {
            return Err(Error::invalid("epsilon schedule entries must be positive"));
        }
        if self.epsilon_schedule.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("epsilon schedule must be strictly decreasing"));
        }
        Ok(())
    }

    pub fn beta_for(&self, lipschitz_instant: T) -> T {
        self.beta
            .unwrap_or_else(|| T::lit(24.0) * lipschitz_instant * lipschitz_instant + T::one())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WellposednessReport<T> {
    pub lipschitz_instant: T,
    pub lipschitz_delay: T,
    pub horizon: T,
    pub beta: T,
    /// `K e^(beta T) < 2 L^2`
    pub uniqueness_ok: bool,
    /// `K e^(beta T) < 6 L^2`
    pub existence_ok: bool,
    /// `2 L^2 - K e^(beta T)`
    pub uniqueness_margin: T,
    /// `6 L^2 - K e^(beta T)`
    pub existence_margin: T,
}

/// Small-delay conditions for uniqueness and for the a priori bounds.
/// A generator without delay (`K = 0`) passes both for any `L`.
pub fn check_wellposedness<T: Scalar>(l: T, k: T, horizon: T, beta: T) -> Result<WellposednessReport<T>> {
    if !(l >= T::zero()) || !(k >= T::zero()) || !(horizon > T::zero()) || !(beta > T::zero()) {
        return Err(Error::invalid("need L >= 0, K >= 0, T > 0 and beta > 0"));
    }
    let k_exp = k * (beta * horizon).exp();
    let two = T::lit(2.0) * l * l;
    let six = T::lit(6.0) * l * l;
    let (uniqueness_ok, existence_ok) = if k == T::zero() {
        (true, true)
    } else {
        (k_exp < two, k_exp < six)
    };
    Ok(WellposednessReport {
        lipschitz_instant: l,
        lipschitz_delay: k,
        horizon,
        beta,
        uniqueness_ok,
        existence_ok,
        uniqueness_margin: two - k_exp,
        existence_margin: six - k_exp,
    })
}

/// How `Y_i` is obtained from the explicit predictor `X` at each node.
#[derive(Debug, Clone, Copy)]
pub enum Step<'a, T> {
    Plain,
    Penalized {
        phi: &'a ConvexSpec<T>,
        epsilon: T,
        penalty_step: PenaltyStep,
    },
    Prox {
        phi: &'a ConvexSpec<T>,
    },
}

/// Scheme a [`Solution`] was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SolutionScheme<T> {
    Plain,
    Penalized { epsilon: T, penalty_step: PenaltyStep },
    Prox,
}

impl<T: Copy> SolutionScheme<T> {
    pub fn epsilon(&self) -> Option<T> {
        match self {
            SolutionScheme::Penalized { epsilon, .. } => Some(*epsilon),
            _ => None,
        }
    }
}

impl<T: Copy> Step<'_, T> {
    fn tag(&self) -> SolutionScheme<T> {
        match *self {
            Step::Plain => SolutionScheme::Plain,
            Step::Penalized {
                epsilon, penalty_step, ..
            } => SolutionScheme::Penalized { epsilon, penalty_step },
            Step::Prox { .. } => SolutionScheme::Prox,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassOutput<T> {
    pub y: AdaptedProcess<T>,
    pub z: AdaptedProcess<T>,
    pub u: AdaptedProcess<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardDiagnostics<T> {
    /// Sup-norm distance between successive `(Y, Z)` iterates; entry `k`
    /// compares iterate `k + 1` with iterate `k` (iterate 0 is zero).
    pub iterate_distances: Vec<T>,
    /// `distance[k + 1] / distance[k]` (zero when the earlier distance is zero).
    pub contraction_ratios: Vec<T>,
    pub converged: bool,
    pub iterations_used: usize,
    pub wellposedness: WellposednessReport<T>,
}

/// An adapted triple on the tree. `Z` and `U` are zero at the leaves, where
/// they play no role.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution<T> {
    pub y: AdaptedProcess<T>,
    pub z: AdaptedProcess<T>,
    pub u: AdaptedProcess<T>,
    pub diagnostics: PicardDiagnostics<T>,
    pub scheme: SolutionScheme<T>,
}

impl<T: Scalar> Solution<T> {
    pub fn y0(&self) -> &[T] {
        self.y.root()
    }
}

fn check_inputs<T: Scalar>(tree: &ScenarioTree<T>, xi: &[T], gen: &GeneratorSpec<T>, step: &Step<T>) -> Result<()> {
    if gen.d() != tree.bm_dim() {
        return Err(Error::DimensionMismatch {
            expected: tree.bm_dim(),
            got: gen.d(),
        });
    }
    if xi.len() != tree.n_leaves() * gen.m() {
        return Err(Error::DimensionMismatch {
            expected: tree.n_leaves() * gen.m(),
            got: xi.len(),
        });
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("terminal values must be finite"));
    }
    match step {
        Step::Penalized { phi, epsilon, .. } => {
            if phi.dim() != gen.m() {
                return Err(Error::DimensionMismatch {
                    expected: gen.m(),
                    got: phi.dim(),
                });
            }
            if !(*epsilon > T::zero()) {
                return Err(Error::invalid("epsilon must be positive"));
            }
        }
        Step::Prox { phi } if phi.dim() != gen.m() => {
            return Err(Error::DimensionMismatch {
                expected: gen.m(),
                got: phi.dim(),
            });
        }
        _ => {}
    }
    Ok(())
}

/// One backward sweep with the past read from `frozen`.
pub fn backward_pass<T: Scalar>(
    tree: &ScenarioTree<T>,
    xi: &[T],
    gen: &GeneratorSpec<T>,
    step: &Step<T>,
    frozen: Option<(&AdaptedProcess<T>, &AdaptedProcess<T>)>,
) -> Result<PassOutput<T>> {
    check_inputs(tree, xi, gen, step)?;
    let (m, d) = (gen.m(), gen.d());
    if let Some((fy, fz)) = frozen {
        if !fy.fits(tree) || !fz.fits(tree) || fy.width() != m || fz.width() != m * d {
            return Err(Error::invalid("frozen paths do not match the tree or generator"));
        }
    } else if gen.lipschitz_delay() > T::zero() && gen.reads_past() {
        return Err(Error::MissingFrozenPaths);
    }

    let n = tree.n_steps();
    let dt = tree.dt();
    let mut y = AdaptedProcess::zeros(tree, m);
    let mut z = AdaptedProcess::zeros(tree, m * d);
    let mut u = AdaptedProcess::zeros(tree, m);
    for (leaf, value) in xi.chunks(m).enumerate() {
        y.node_mut(n, leaf).copy_from_slice(value);
    }
    let incs: Vec<&[T]> = tree.increments().iter().map(Vec::as_slice).collect();

    for level in (0..n).rev() {
        let t = tree.grid().time(level);
        for idx in 0..tree.level_len(level) {
            let (e, zi) = {
                let kids: Vec<&[T]> = tree.children(idx).map(|c| y.node(level + 1, c)).collect();
                (mean_of(&kids), project_z(&kids, &incs, dt))
            };
            let hist = TreeHistory {
                tree,
                paths: frozen,
                level,
                index: idx,
                current: Some((&e, &zi)),
            };
            let f = eval_generator(gen, tree.grid(), t, &e, &zi, &hist)?;
            let mut x = e.clone();
            linalg::axpy(&mut x, dt, &f);
            let (yi, ui) = match *step {
                Step::Plain => (x, vec![T::zero(); m]),
                Step::Penalized {
                    phi,
                    epsilon,
                    penalty_step: PenaltyStep::Implicit,
                } => {
                    let yi = phi.envelope_prox_unchecked(epsilon, dt, &x);
                    let ui = residual_rate(&x, &yi, dt);
                    (yi, ui)
                }
                Step::Penalized {
                    phi,
                    epsilon,
                    penalty_step: PenaltyStep::Explicit,
                } => {
                    let ui = phi.yosida_grad(epsilon, &e)?;
                    let mut yi = x;
                    linalg::axpy(&mut yi, -dt, &ui);
                    (yi, ui)
                }
                Step::Prox { phi } => {
                    let yi = phi.prox_unchecked(dt, &x);
                    let ui = residual_rate(&x, &yi, dt);
                    (yi, ui)
                }
            };
            y.node_mut(level, idx).copy_from_slice(&yi);
            z.node_mut(level, idx).copy_from_slice(&zi);
            u.node_mut(level, idx).copy_from_slice(&ui);
        }
    }
    Ok(PassOutput { y, z, u })
}

fn residual_rate<T: Scalar>(x: &[T], y: &[T], dt: T) -> Vec<T> {
    x.iter().zip(y).map(|(&a, &b)| (a - b) / dt).collect()
}

/// Fixed-point iteration over the delayed arguments, starting from `(0, 0)`.
///
/// After the tolerance is met, iteration continues while the distance still
/// halves each step, so the returned iterate sits at roundoff level whenever
/// the map contracts.
pub fn picard_solve<T: Scalar>(
    tree: &ScenarioTree<T>,
    xi: &[T],
    gen: &GeneratorSpec<T>,
    step: &Step<T>,
    config: &SolverConfig<T>,
) -> Result<Solution<T>> {
    config.validate()?;
    check_inputs(tree, xi, gen, step)?;
    let beta = config.beta_for(gen.lipschitz_instant());
    let gate = check_wellposedness(gen.lipschitz_instant(), gen.lipschitz_delay(), tree.horizon(), beta)?;
    if !gate.existence_ok {
        let k_exp = gen.lipschitz_delay() * (beta * tree.horizon()).exp();
        let six_l2 = T::lit(6.0) * gen.lipschitz_instant() * gen.lipschitz_instant();
        if config.hard_gate {
            return Err(Error::Gate {
                k_exp: k_exp.to_f64_lossy(),
                six_l2: six_l2.to_f64_lossy(),
            });
        }
        log::warn!("well-posedness gate fails (K e^(beta T) = {k_exp} >= 6 L^2 = {six_l2}); attempting anyway");
    }

    let (m, d) = (gen.m(), gen.d());
    let mut current = PassOutput {
        y: AdaptedProcess::zeros(tree, m),
        z: AdaptedProcess::zeros(tree, m * d),
        u: AdaptedProcess::zeros(tree, m),
    };
    let mut distances: Vec<T> = Vec::new();
    let mut ratios: Vec<T> = Vec::new();
    let mut growth = 0usize;
    let mut converged = false;
    let mut polish = 0usize;

    for _ in 0..config.picard_max_iters {
        let next = backward_pass(tree, xi, gen, step, Some((&current.y, &current.z)))?;
        let dist = next.y.max_abs_diff(&current.y).max(next.z.max_abs_diff(&current.z));
        let ratio = distances.last().map(|&last| if last > T::zero() { dist / last } else { T::zero() });
        if let Some(r) = ratio {
            ratios.push(r);
            growth = if r > config.divergence_ratio { growth + 1 } else { 0 };
        }
        distances.push(dist);
        current = next;

        if !dist.is_finite() || growth >= config.divergence_window {
            return Err(not_converged(true, &distances, &ratios));
        }
        if dist <= config.picard_tol {
            converged = true;
            let still_halving = ratio.is_some_and(|r| r < T::lit(0.5));
            if dist == T::zero() || !still_halving || polish >= 30 {
                break;
            }
            polish += 1;
        } else {
            converged = false;
        }
    }
    if !converged {
        let diverged = ratios.last().is_some_and(|&r| r > T::one());
        return Err(not_converged(diverged, &distances, &ratios));
    }
    let iterations_used = distances.len();
    Ok(Solution {
        y: current.y,
        z: current.z,
        u: current.u,
        diagnostics: PicardDiagnostics {
            iterate_distances: distances,
            contraction_ratios: ratios,
            converged,
            iterations_used,
            wellposedness: gate,
        },
        scheme: step.tag(),
    })
}

fn not_converged<T: Scalar>(diverged: bool, distances: &[T], ratios: &[T]) -> Error {
    Error::NotConverged {
        diverged,
        iterations: distances.len(),
        last_distance: distances.last().map_or(f64::NAN, |d| d.to_f64_lossy()),
        last_ratio: ratios.last().map_or(f64::NAN, |r| r.to_f64_lossy()),
        distances: distances.iter().map(|d| d.to_f64_lossy()).collect(),
    }
}

/// Delayed BSDE without the multivalued term.
pub fn solve_classical<T: Scalar>(
    tree: &ScenarioTree<T>,
    xi: &[T],
    gen: &GeneratorSpec<T>,
    config: &SolverConfig<T>,
) -> Result<Solution<T>> {
    picard_solve(tree, xi, gen, &Step::Plain, config)
}

/// Rejects terminal data with `phi(xi) = +inf` on some leaf.
pub fn check_terminal<T: Scalar>(tree: &ScenarioTree<T>, xi: &[T], phi: &ConvexSpec<T>) -> Result<()> {
    if xi.len() != tree.n_leaves() * phi.dim() {
        return Err(Error::DimensionMismatch {
            expected: tree.n_leaves() * phi.dim(),
            got: xi.len(),
        });
    }
    for (leaf, v) in xi.chunks(phi.dim()).enumerate() {
        if !phi.eval_phi(v)?.is_finite() {
            return Err(Error::TerminalOutsideDomain { leaf });
        }
    }
    Ok(())
}

/// Yosida-penalized equation at a single `epsilon`.
pub fn solve_penalized<T: Scalar>(
    tree: &ScenarioTree<T>,
    xi: &[T],
    gen: &GeneratorSpec<T>,
    phi: &ConvexSpec<T>,
    epsilon: T,
    config: &SolverConfig<T>,
) -> Result<Solution<T>> {
    check_terminal(tree, xi, phi)?;
    let step = Step::Penalized {
        phi,
        epsilon,
        penalty_step: config.penalty_step,
    };
    picard_solve(tree, xi, gen, &step, config)
}

/// Reference scheme projecting with the resolvent `J_dt` at every node.
pub fn prox_step_solve<T: Scalar>(
    tree: &ScenarioTree<T>,
    xi: &[T],
    gen: &GeneratorSpec<T>,
    phi: &ConvexSpec<T>,
    config: &SolverConfig<T>,
) -> Result<Solution<T>> {
    check_terminal(tree, xi, phi)?;
    picard_solve(tree, xi, gen, &Step::Prox { phi }, config)
}

/// Penalized solutions for every entry of the epsilon schedule, in order.
pub fn solve_schedule<T: Scalar>(
    tree: &ScenarioTree<T>,
    xi: &[T],
    gen: &GeneratorSpec<T>,
    phi: &ConvexSpec<T>,
    config: &SolverConfig<T>,
) -> Result<Vec<(T, Solution<T>)>> {
    config.validate()?;
    config
        .epsilon_schedule
        .iter()
        .map(|&eps| solve_penalized(tree, xi, gen, phi, eps, config).map(|s| (eps, s)))
        .collect()
}

/// One row of the epsilon table: distances between consecutive schedule runs
/// and per-run penalty summaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsilonRow<T> {
    pub epsilon: T,
    pub next_epsilon: T,
    /// `||Y^eps - Y^next||_S2` (beta-weighted, square root taken).
    pub y_distance: T,
    /// `||Z^eps - Z^next||_H2` (beta-weighted, square root taken).
    pub z_distance: T,
    /// `E int e^(beta s) |grad phi_eps(Y^eps)|^2 ds`
    pub gradient_h2: T,
    /// `E int e^(beta s) phi(J_eps Y^eps) ds`
    pub resolvent_phi: T,
}

impl<T: Scalar> EpsilonRow<T> {
    /// `sqrt(y_distance^2 + z_distance^2)`
    pub fn combined_distance(&self) -> T {
        (self.y_distance * self.y_distance + self.z_distance * self.z_distance).sqrt()
    }
}

pub fn epsilon_table<T: Scalar>(
    runs: &[(T, Solution<T>)],
    phi: &ConvexSpec<T>,
    tree: &ScenarioTree<T>,
    beta: T,
) -> Result<Vec<EpsilonRow<T>>> {
    runs.windows(2)
        .map(|w| {
            let ((eps, a), (next, b)) = (&w[0], &w[1]);
            let dy = path_norms(&a.y.difference(&b.y)?, tree, beta)?;
            let dz = path_norms(&a.z.difference(&b.z)?, tree, beta)?;
            let grad = path_norms(&a.u, tree, beta)?;
            let resolvent_phi = weighted_phi_integral(&a.y, phi, *eps, tree, beta)?;
            Ok(EpsilonRow {
                epsilon: *eps,
                next_epsilon: *next,
                y_distance: dy.s2.sqrt(),
                z_distance: dz.h2.sqrt(),
                gradient_h2: grad.h2,
                resolvent_phi,
            })
        })
        .collect()
}

/// `E sum_{i<N} dt e^(beta t_i) phi(J_eps Y_i)`
pub(crate) fn weighted_phi_integral<T: Scalar>(
    y: &AdaptedProcess<T>,
    phi: &ConvexSpec<T>,
    epsilon: T,
    tree: &ScenarioTree<T>,
    beta: T,
) -> Result<T> {
    let dt = tree.dt();
    let mut total = T::zero();
    for level in 0..tree.n_steps() {
        let w = dt * (beta * tree.grid().time(level)).exp() / T::from_usize_lossy(tree.level_len(level));
        for idx in 0..tree.level_len(level) {
            let j = phi.prox(epsilon, y.node(level, idx))?;
            total += w * phi.eval_phi(&j)?;
        }
    }
    Ok(total)
}

/// Runs the whole schedule; returns the smallest-epsilon solution and the
/// table of consecutive distances.
pub fn solve_bsvi<T: Scalar>(
    tree: &ScenarioTree<T>,
    xi: &[T],
    gen: &GeneratorSpec<T>,
    phi: &ConvexSpec<T>,
    config: &SolverConfig<T>,
) -> Result<(Solution<T>, Vec<EpsilonRow<T>>)> {
    let runs = solve_schedule(tree, xi, gen, phi, config)?;
    let beta = config.beta_for(gen.lipschitz_instant());
    let table = epsilon_table(&runs, phi, tree, beta)?;
    let (_, last) = runs.into_iter().last().expect("schedule is nonempty");
    Ok((last, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::DelayMeasure;
    use crate::lattice::build_tree;

    fn martingale_terminal(tree: &ScenarioTree<f64>, a: f64, b: f64) -> Vec<f64> {
        tree.brownian().leaves().iter().map(|w| a + b * w).collect()
    }

    #[test]
    fn wellposedness_examples() {
        let r = check_wellposedness(1.0, 0.5, 0.05, 25.0).unwrap();
        assert!(r.uniqueness_ok && r.existence_ok);
        assert!((r.uniqueness_margin - (2.0 - 0.5 * 1.25f64.exp())).abs() < 1e-15);
        let r = check_wellposedness(1.0, 1.0, 0.05, 25.0).unwrap();
        assert!(!r.uniqueness_ok && r.existence_ok);
        let r = check_wellposedness(1.0, 0.0, 30.0, 100.0).unwrap();
        assert!(r.uniqueness_ok && r.existence_ok);
        let r = check_wellposedness(0.0, 0.1, 1.0, 1.0).unwrap();
        assert!(!r.uniqueness_ok && !r.existence_ok);
        assert!(check_wellposedness(1.0, 0.1, 0.0, 1.0).is_err());
    }

    #[test]
    fn martingale_pass() {
        let tree = build_tree::<f64>(3, 1.0, 1).unwrap();
        let xi = martingale_terminal(&tree, 0.0, 1.0);
        let gen = GeneratorSpec::zero(1, 1);
        let out = backward_pass(&tree, &xi, &gen, &Step::Plain, None).unwrap();
        let w = tree.brownian();
        assert!(out.y.max_abs_diff(&w) < 1e-14);
        for level in 0..3 {
            assert!(out.z.level(level).iter().all(|z| (z - 1.0).abs() < 1e-14));
        }
        let xi = vec![2.5; tree.n_leaves()];
        let out = backward_pass(&tree, &xi, &gen, &Step::Plain, None).unwrap();
        assert!(out.y.values().iter().all(|&v| v == 2.5));
        assert!(out.z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delayed_generator_requires_frozen_paths() {
        let tree = build_tree::<f64>(3, 1.0, 1).unwrap();
        let xi = martingale_terminal(&tree, 0.0, 1.0);
        let gen = GeneratorSpec::delayed_z(0.5, 0.5, 1, 1, 1.0).unwrap();
        assert!(matches!(
            backward_pass(&tree, &xi, &gen, &Step::Plain, None),
            Err(Error::MissingFrozenPaths)
        ));
    }

    #[test]
    fn long_delay_matches_zero_generator() {
        let tree = build_tree::<f64>(4, 1.0, 1).unwrap();
        let xi: Vec<f64> = tree.brownian().leaves().iter().map(|w| w.sin()).collect();
        let zero = GeneratorSpec::zero(1, 1);
        let base = backward_pass(&tree, &xi, &zero, &Step::Plain, None).unwrap();
        let frozen = (base.y.clone(), base.z.clone());
        for r in [1.0, 1.5] {
            let gen = GeneratorSpec::delayed_z(3.0, r, 1, 1, 1.0).unwrap();
            let out = backward_pass(&tree, &xi, &gen, &Step::Plain, Some((&frozen.0, &frozen.1))).unwrap();
            assert_eq!(out, base);
        }
    }

    #[test]
    fn no_delay_converges_in_two_passes() {
        let tree = build_tree::<f64>(4, 1.0, 1).unwrap();
        let xi = martingale_terminal(&tree, 0.3, -0.7);
        let gen = GeneratorSpec::linear_instant(vec![0.4], vec![0.2], 1, 1).unwrap();
        let sol = solve_classical(&tree, &xi, &gen, &SolverConfig::default()).unwrap();
        assert_eq!(sol.diagnostics.iterations_used, 2);
        assert_eq!(sol.diagnostics.iterate_distances[1], 0.0);
        assert!(sol.u.values().iter().all(|&u| u == 0.0));

        let ma = GeneratorSpec::moving_average_z(
            crate::generators::Weight::Constant(0.5),
            DelayMeasure::DiracAtZero,
            1,
            1,
        )
        .unwrap();
        let sol = solve_classical(&tree, &xi, &ma, &SolverConfig::default()).unwrap();
        assert!(sol.diagnostics.iterate_distances[1] <= 1e-10);
    }

    #[test]
    fn quadratic_penalty_decay_factors() {
        let (c, eps, n) = (2.0f64, 0.25f64, 5);
        let tree = build_tree(n, 1.0, 1).unwrap();
        let dt = tree.dt();
        let xi = vec![1.5; tree.n_leaves()];
        let phi = ConvexSpec::quadratic(c, 1).unwrap();
        let gen = GeneratorSpec::zero(1, 1);

        let mut cfg = SolverConfig {
            penalty_step: PenaltyStep::Explicit,
            ..SolverConfig::default()
        };
        let sol = solve_penalized(&tree, &xi, &gen, &phi, eps, &cfg).unwrap();
        let mut expect = 1.5;
        for _ in 0..n {
            expect *= 1.0 - dt * c / (1.0 + eps * c);
        }
        assert!((sol.y0()[0] - expect).abs() < 1e-14);

        cfg.penalty_step = PenaltyStep::Implicit;
        let sol = solve_penalized(&tree, &xi, &gen, &phi, eps, &cfg).unwrap();
        let mut expect = 1.5;
        for _ in 0..n {
            expect /= 1.0 + dt * c / (1.0 + eps * c);
        }
        assert!((sol.y0()[0] - expect).abs() < 1e-14);
        // U is the Yosida gradient at the solution.
        let g = phi.yosida_grad(eps, sol.y0()).unwrap();
        assert!((g[0] - sol.u.root()[0]).abs() < 1e-12);
    }

    #[test]
    fn martingale_inside_half_line_needs_no_push() {
        let tree = build_tree::<f64>(4, 1.0, 1).unwrap();
        let xi: Vec<f64> = tree.brownian().leaves().iter().map(|w| -(w * w) - 0.1).collect();
        let phi = ConvexSpec::indicator_box(vec![f64::NEG_INFINITY], vec![0.0]).unwrap();
        let gen = GeneratorSpec::zero(1, 1);
        let sol = solve_penalized(&tree, &xi, &gen, &phi, 0.01, &SolverConfig::default()).unwrap();
        assert!(sol.u.values().iter().all(|&u| u == 0.0));
        let plain = solve_classical(&tree, &xi, &gen, &SolverConfig::default()).unwrap();
        assert_eq!(sol.y, plain.y);
        assert!(sol.y.values().iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn terminal_outside_domain_is_rejected() {
        let tree = build_tree::<f64>(2, 1.0, 1).unwrap();
        let xi = martingale_terminal(&tree, 0.0, 1.0);
        let phi = ConvexSpec::indicator_box(vec![-0.5], vec![0.5]).unwrap();
        let gen = GeneratorSpec::zero(1, 1);
        assert!(matches!(
            solve_penalized(&tree, &xi, &gen, &phi, 0.1, &SolverConfig::default()),
            Err(Error::TerminalOutsideDomain { leaf: 0 })
        ));
    }

    #[test]
    fn hard_gate_refuses() {
        let tree = build_tree::<f64>(3, 2.0, 1).unwrap();
        let xi = martingale_terminal(&tree, 0.0, 1.0);
        let gen = GeneratorSpec::delayed_z(2.0, 0.5, 1, 1, 2.0).unwrap().with_constants(1.0, 4.0);
        let cfg = SolverConfig {
            hard_gate: true,
            ..SolverConfig::default()
        };
        assert!(matches!(solve_classical(&tree, &xi, &gen, &cfg), Err(Error::Gate { .. })));
    }

    #[test]
    fn schedule_validation() {
        let mut cfg = SolverConfig::<f64> {
            epsilon_schedule: vec![0.5, 0.5],
            ..SolverConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.epsilon_schedule = vec![0.5, -0.1];
        assert!(cfg.validate().is_err());
        cfg.epsilon_schedule = vec![0.5];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn single_entry_schedule_gives_empty_table() {
        let tree = build_tree::<f64>(3, 1.0, 1).unwrap();
        let xi = vec![0.2; tree.n_leaves()];
        let phi = ConvexSpec::quadratic(1.0, 1).unwrap();
        let gen = GeneratorSpec::zero(1, 1);
        let cfg = SolverConfig {
            epsilon_schedule: vec![0.1],
            ..SolverConfig::default()
        };
        let (sol, table) = solve_bsvi(&tree, &xi, &gen, &phi, &cfg).unwrap();
        assert!(table.is_empty());
        let direct = solve_penalized(&tree, &xi, &gen, &phi, 0.1, &cfg).unwrap();
        assert_eq!(sol, direct);
    }

    #[test]
    fn zero_penalty_schedule_is_flat() {
        let tree = build_tree::<f64>(3, 1.0, 1).unwrap();
        let xi = martingale_terminal(&tree, 0.1, 0.9);
        let phi = ConvexSpec::zero(1);
        let gen = GeneratorSpec::linear_instant(vec![0.5], vec![0.0], 1, 1).unwrap();
        let (_, table) = solve_bsvi(&tree, &xi, &gen, &phi, &SolverConfig::default()).unwrap();
        assert_eq!(table.len(), 10);
        assert!(table.iter().all(|r| r.y_distance == 0.0 && r.z_distance == 0.0));
    }
}
