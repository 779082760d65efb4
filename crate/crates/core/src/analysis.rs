//! Norms, a priori audits, convergence-rate fits and residual checks for
//! solutions on the tree.
//!
//! All weighted norms use left-endpoint sums on the grid:
//!
//! ```text
//! ||X||_S2^2 = E sup_{i=0..N} e^(beta t_i) |X_i|^2
//! ||X||_H2^2 = E sum_{i=0}^{N-1} dt e^(beta t_i) |X_i|^2
//! ```
//!
//! Expectations over a level are plain means, since all nodes of a level are
//! equally likely.

use serde::Serialize;

use crate::convex::ConvexSpec;
use crate::error::{Error, Result};
use crate::generators::{eval_generator, GeneratorSpec, TreeHistory, ZeroHistory};
use crate::lattice::{mean_of, project_z, AdaptedProcess, ScenarioTree};
use crate::linalg;
use crate::scalar::Scalar;
use crate::solver::{weighted_phi_integral, PenaltyStep, Solution, SolutionScheme, EpsilonRow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormReport<T> {
    /// Squared S2 norm.
    pub s2: T,
    /// Squared H2 norm.
    pub h2: T,
    pub beta: T,
}

fn check_fits<T: Scalar>(p: &AdaptedProcess<T>, tree: &ScenarioTree<T>) -> Result<()> {
    if p.fits(tree) {
        Ok(())
    } else {
        Err(Error::invalid("process does not live on this tree"))
    }
}

fn level_weight<T: Scalar>(tree: &ScenarioTree<T>, beta: T, level: usize) -> T {
    (beta * tree.grid().time(level)).exp()
}

pub fn path_norms<T: Scalar>(process: &AdaptedProcess<T>, tree: &ScenarioTree<T>, beta: T) -> Result<NormReport<T>> {
    check_fits(process, tree)?;
    let n = tree.n_steps();
    let w = process.width();
    // Running sup of the weighted square along each path, carried down to the leaves.
    let mut sup: Vec<T> = vec![level_weight(tree, beta, 0) * linalg::norm_sq(process.root())];
    let mut h2 = T::zero();
    for level in 0..=n {
        let weight = level_weight(tree, beta, level);
        let vals = process.level(level);
        if level > 0 {
            sup = (0..tree.level_len(level))
                .map(|j| {
                    let here = weight * linalg::norm_sq(&vals[j * w..(j + 1) * w]);
                    sup[tree.parent(j)].max(here)
                })
                .collect();
        }
        if level < n {
            let mean_sq = vals.chunks(w).map(linalg::norm_sq).sum::<T>() / T::from_usize_lossy(tree.level_len(level));
            h2 += tree.dt() * weight * mean_sq;
        }
    }
    let s2 = sup.iter().copied().sum::<T>() / T::from_usize_lossy(sup.len());
    Ok(NormReport { s2, h2, beta })
}

/// `E sum_{i<N} dt e^(beta t_i) |F(t_i, 0, 0, 0, 0)|^2`
fn forcing_h2<T: Scalar>(gen: &GeneratorSpec<T>, tree: &ScenarioTree<T>, beta: T) -> Result<T> {
    let (m, d) = (gen.m(), gen.d());
    let hist = ZeroHistory { m, d };
    let zy = vec![T::zero(); m];
    let zz = vec![T::zero(); m * d];
    let mut total = T::zero();
    for level in 0..tree.n_steps() {
        let t = tree.grid().time(level);
        let f = eval_generator(gen, tree.grid(), t, &zy, &zz, &hist)?;
        total += tree.dt() * (beta * t).exp() * linalg::norm_sq(&f);
    }
    Ok(total)
}

fn mean_sq<T: Scalar>(xi: &[T], m: usize) -> T {
    let n = xi.len() / m;
    xi.chunks(m).map(linalg::norm_sq).sum::<T>() / T::from_usize_lossy(n)
}

/// One instance of an a priori bound: `lhs <= constant * rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundAudit<T> {
    pub epsilon: Option<T>,
    pub lhs: T,
    pub rhs: T,
    /// `lhs / rhs`; zero when both vanish, infinite when only `rhs` does.
    pub constant: T,
}

impl<T: Scalar> BoundAudit<T> {
    fn new(epsilon: Option<T>, lhs: T, rhs: T) -> Self {
        let constant = if rhs > T::zero() {
            lhs / rhs
        } else if lhs == T::zero() {
            T::zero()
        } else {
            T::infinity()
        };
        BoundAudit {
            epsilon,
            lhs,
            rhs,
            constant,
        }
    }
}

/// Spread of the estimated constants across a family of runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniformityVerdict<T> {
    pub median: T,
    pub min: T,
    pub max: T,
    pub factor: T,
    pub passed: bool,
    /// The same bound applied to every run of the schedule, coarse epsilons
    /// included.
    pub whole_schedule_passed: bool,
}

fn median<T: Scalar>(values: &[T]) -> T {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n == 0 {
        return T::zero();
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / T::lit(2.0)
    }
}

fn spread<T: Scalar>(audits: &[BoundAudit<T>]) -> (T, T, T) {
    let cs: Vec<T> = audits.iter().map(|a| a.constant).collect();
    let med = median(&cs);
    let min = cs.iter().copied().fold(T::infinity(), T::min);
    let max = cs.iter().copied().fold(T::neg_infinity(), T::max);
    (med, min, max)
}

/// Every constant within `[median / factor, median * factor]`.
pub fn two_sided_verdict<T: Scalar>(audits: &[BoundAudit<T>], factor: T) -> UniformityVerdict<T> {
    let (median, min, max) = spread(audits);
    let passed = if audits.is_empty() || max == T::zero() {
        true
    } else {
        max.is_finite() && max <= median * factor && min >= median / factor
    };
    UniformityVerdict {
        median,
        min,
        max,
        factor,
        passed,
        whole_schedule_passed: passed,
    }
}

/// One-sided check for bounds of the form `lhs <= C rhs` uniformly in
/// epsilon: every constant from the finer half of the schedule (epsilon at or
/// below the median epsilon) must be at most `median * factor`.
///
/// Constants that fall as epsilon shrinks are allowed: with the one-norm, for
/// instance, `|y - J_eps y| = eps c` wherever the penalty acts, so the distance
/// series divided by epsilon decays linearly and its coarsest entry exceeds any
/// fixed multiple of the median on a long geometric schedule. The whole-schedule
/// comparison is still reported.
pub fn upper_verdict<T: Scalar>(audits: &[BoundAudit<T>], factor: T) -> UniformityVerdict<T> {
    let (median, min, max) = spread(audits);
    let within = |c: T| c.is_finite() && c <= median * factor;
    let vacuous = audits.is_empty() || max == T::zero();
    let eps: Vec<T> = audits.iter().filter_map(|a| a.epsilon).collect();
    let passed = vacuous
        || if eps.len() == audits.len() {
            let cut = self::median(&eps);
            audits
                .iter()
                .filter(|a| a.epsilon.is_some_and(|e| e <= cut))
                .all(|a| within(a.constant))
        } else {
            within(max)
        };
    UniformityVerdict {
        median,
        min,
        max,
        factor,
        passed,
        whole_schedule_passed: vacuous || within(max),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriAudit<T> {
    /// `E|xi|^2 + E int e^(beta s) |F(s,0,0,0,0)|^2 ds`
    pub data_size: T,
    pub audits: Vec<BoundAudit<T>>,
    pub verdict: UniformityVerdict<T>,
}

/// `||Y||_S2^2 + ||Z||_H2^2` against the data size for each run; the ratio
/// should not drift with epsilon.
pub fn apriori_audit<T: Scalar>(
    runs: &[(T, Solution<T>)],
    xi: &[T],
    gen: &GeneratorSpec<T>,
    tree: &ScenarioTree<T>,
    beta: T,
) -> Result<AprioriAudit<T>> {
    let data_size = mean_sq(xi, gen.m()) + forcing_h2(gen, tree, beta)?;
    let audits = runs
        .iter()
        .map(|(eps, sol)| {
            let y = path_norms(&sol.y, tree, beta)?;
            let z = path_norms(&sol.z, tree, beta)?;
            Ok(BoundAudit::new(Some(*eps), y.s2 + z.h2, data_size))
        })
        .collect::<Result<Vec<_>>>()?;
    let verdict = two_sided_verdict(&audits, T::lit(2.0));
    Ok(AprioriAudit {
        data_size,
        audits,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YosidaAudit<T> {
    /// `E|xi|^2 + E phi(xi) + E int |F(s,0,0,0,0)|^2 ds`
    pub data_size: T,
    /// `E int e^(beta s) |grad phi_eps(Y^eps)|^2 ds`
    pub gradient: Vec<BoundAudit<T>>,
    /// `sup_t E e^(beta t) phi(J_eps Y^eps) + E int e^(beta s) phi(J_eps Y^eps) ds`
    pub resolvent_phi: Vec<BoundAudit<T>>,
    /// `sup_t E e^(beta t) |Y^eps - J_eps Y^eps|^2`, normalised by `epsilon`.
    pub distance: Vec<BoundAudit<T>>,
    pub gradient_verdict: UniformityVerdict<T>,
    pub resolvent_phi_verdict: UniformityVerdict<T>,
    pub distance_verdict: UniformityVerdict<T>,
}

impl<T> YosidaAudit<T> {
    pub fn passed(&self) -> bool {
        self.gradient_verdict.passed && self.resolvent_phi_verdict.passed && self.distance_verdict.passed
    }
}

/// Penalty-term bounds that must hold uniformly in epsilon. Each constant
/// must stay below four times the median across the schedule.
pub fn yosida_audit<T: Scalar>(
    runs: &[(T, Solution<T>)],
    phi: &ConvexSpec<T>,
    xi: &[T],
    gen: &GeneratorSpec<T>,
    tree: &ScenarioTree<T>,
    beta: T,
) -> Result<YosidaAudit<T>> {
    let m = gen.m();
    let mut phi_xi = T::zero();
    for v in xi.chunks(m) {
        phi_xi += phi.eval_phi(v)?;
    }
    phi_xi /= T::from_usize_lossy(xi.len() / m);
    let data_size = mean_sq(xi, m) + phi_xi + forcing_h2(gen, tree, T::zero())?;

    let mut gradient = Vec::with_capacity(runs.len());
    let mut resolvent_phi = Vec::with_capacity(runs.len());
    let mut distance = Vec::with_capacity(runs.len());
    for (eps, sol) in runs {
        let eps = *eps;
        gradient.push(BoundAudit::new(Some(eps), path_norms(&sol.u, tree, beta)?.h2, data_size));

        let mut sup_phi = T::zero();
        let mut sup_dist = T::zero();
        for level in 0..=tree.n_steps() {
            let w = level_weight(tree, beta, level);
            let count = T::from_usize_lossy(tree.level_len(level));
            let mut e_phi = T::zero();
            let mut e_dist = T::zero();
            for idx in 0..tree.level_len(level) {
                let y = sol.y.node(level, idx);
                let j = phi.prox(eps, y)?;
                e_phi += phi.eval_phi(&j)?;
                e_dist += linalg::dist_sq(y, &j);
            }
            sup_phi = sup_phi.max(w * e_phi / count);
            sup_dist = sup_dist.max(w * e_dist / count);
        }
        let integral = weighted_phi_integral(&sol.y, phi, eps, tree, beta)?;
        resolvent_phi.push(BoundAudit::new(Some(eps), sup_phi + integral, data_size));
        distance.push(BoundAudit::new(Some(eps), sup_dist, eps * data_size));
    }
    let four = T::lit(4.0);
    Ok(YosidaAudit {
        data_size,
        gradient_verdict: upper_verdict(&gradient, four),
        resolvent_phi_verdict: upper_verdict(&resolvent_phi, four),
        distance_verdict: upper_verdict(&distance, four),
        gradient,
        resolvent_phi,
        distance,
    })
}

/// Least-squares fit of `log distance` against `log(eps_k + eps_{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateFit<T> {
    /// Every consecutive distance is zero: the penalization is exact.
    Exact,
    Fit {
        slope: T,
        intercept: T,
        /// Root-mean-square residual of the fit in log space.
        residual: T,
        points: usize,
    },
}

pub const MIN_RATE_POINTS: usize = 4;

pub fn epsilon_rate_fit<T: Scalar>(rows: &[EpsilonRow<T>]) -> Result<RateFit<T>> {
    if !rows.is_empty() && rows.iter().all(|r| r.combined_distance() == T::zero()) {
        return Ok(RateFit::Exact);
    }
    let pts: Vec<(T, T)> = rows
        .iter()
        .filter(|r| r.combined_distance() > T::zero())
        .map(|r| ((r.epsilon + r.next_epsilon).ln(), r.combined_distance().ln()))
        .collect();
    if pts.len() < MIN_RATE_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_RATE_POINTS,
            have: pts.len(),
        });
    }
    let n = T::from_usize_lossy(pts.len());
    let mx = pts.iter().map(|p| p.0).sum::<T>() / n;
    let my = pts.iter().map(|p| p.1).sum::<T>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<T>();
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<T>();
    if sxx == T::zero() {
        return Err(Error::invalid("rate fit needs at least two distinct epsilons"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss = pts
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum::<T>();
    Ok(RateFit::Fit {
        slope,
        intercept,
        residual: (ss / n).sqrt(),
        points: pts.len(),
    })
}

/// Data of one run in a stability comparison.
#[derive(Clone, Copy)]
pub struct RunData<'a, T> {
    pub solution: &'a Solution<T>,
    pub xi: &'a [T],
    pub generator: &'a GeneratorSpec<T>,
}

/// `||dY||_S2^2 + ||dY||_H2^2 + ||dZ||_H2^2` against
/// `e^(beta T) E|d xi|^2 + E int e^(beta s) |F - F'|^2 ds`, the generator
/// difference evaluated along the first solution.
pub fn stability_audit<T: Scalar>(
    first: RunData<'_, T>,
    second: RunData<'_, T>,
    tree: &ScenarioTree<T>,
    beta: T,
) -> Result<BoundAudit<T>> {
    let (a, b) = (first.solution, second.solution);
    let m = first.generator.m();
    if second.generator.m() != m || second.generator.d() != first.generator.d() || first.xi.len() != second.xi.len() {
        return Err(Error::invalid("runs in a stability comparison must share dimensions"));
    }
    let dy = path_norms(&a.y.difference(&b.y)?, tree, beta)?;
    let dz = path_norms(&a.z.difference(&b.z)?, tree, beta)?;
    let lhs = dy.s2 + dy.h2 + dz.h2;

    let dxi: Vec<T> = linalg::sub(first.xi, second.xi);
    let terminal = (beta * tree.horizon()).exp() * mean_sq(&dxi, m);
    let mut forcing = T::zero();
    for level in 0..tree.n_steps() {
        let t = tree.grid().time(level);
        let w = tree.dt() * (beta * t).exp() / T::from_usize_lossy(tree.level_len(level));
        for idx in 0..tree.level_len(level) {
            let (y, z) = (a.y.node(level, idx), a.z.node(level, idx));
            let hist = TreeHistory {
                tree,
                paths: Some((&a.y, &a.z)),
                level,
                index: idx,
                current: None,
            };
            let f1 = eval_generator(first.generator, tree.grid(), t, y, z, &hist)?;
            let f2 = eval_generator(second.generator, tree.grid(), t, y, z, &hist)?;
            forcing += w * linalg::dist_sq(&f1, &f2);
        }
    }
    Ok(BoundAudit::new(None, lhs, terminal + forcing))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residuals<T> {
    /// Largest violation of the discrete equation at any node, including the
    /// terminal condition.
    pub equation: T,
    /// Largest violation of the subgradient inequality for `U` over the probe
    /// set, clipped below at zero.
    pub subdiff: T,
    /// `E sum_{i<N} dt phi(point_i)` where `point_i` is where `U_i` acts as a
    /// subgradient.
    pub phi_integrability: T,
}

/// Probe set for subgradient checks: origin, box corners, and up to 64 leaf
/// values of `xi` clipped into the domain.
pub fn default_probes<T: Scalar>(phi: &ConvexSpec<T>, xi: &[T]) -> Vec<Vec<T>> {
    let m = phi.dim();
    let mut probes = phi.boundary_points();
    let leaves = xi.len() / m.max(1);
    let stride = (leaves / 64).max(1);
    for leaf in (0..leaves).step_by(stride).take(64) {
        probes.push(phi.clip_to_domain(&xi[leaf * m..(leaf + 1) * m]));
    }
    probes
}

/// Rebuilds the discrete equation from the stored solution and checks it
/// node by node, together with `U_i in d phi(point_i)`.
pub fn solution_residuals<T: Scalar>(
    sol: &Solution<T>,
    xi: &[T],
    gen: &GeneratorSpec<T>,
    phi: &ConvexSpec<T>,
    tree: &ScenarioTree<T>,
    probes: &[Vec<T>],
) -> Result<Residuals<T>> {
    let m = gen.m();
    if phi.dim() != m || xi.len() != tree.n_leaves() * m {
        return Err(Error::invalid("terminal data or phi do not match the generator"));
    }
    let n = tree.n_steps();
    let dt = tree.dt();
    let mut equation = T::zero();
    for (leaf, v) in xi.chunks(m).enumerate() {
        for (a, b) in sol.y.node(n, leaf).iter().zip(v) {
            equation = equation.max((*a - *b).abs());
        }
    }
    let incs: Vec<&[T]> = tree.increments().iter().map(Vec::as_slice).collect();
    let mut subdiff = T::zero();
    let mut phi_integrability = T::zero();
    for level in 0..n {
        let t = tree.grid().time(level);
        let count = T::from_usize_lossy(tree.level_len(level));
        for idx in 0..tree.level_len(level) {
            let kids: Vec<&[T]> = tree.children(idx).map(|c| sol.y.node(level + 1, c)).collect();
            let e = mean_of(&kids);
            let zi = project_z(&kids, &incs, dt);
            for (a, b) in zi.iter().zip(sol.z.node(level, idx)) {
                equation = equation.max((*a - *b).abs());
            }
            let hist = TreeHistory {
                tree,
                paths: Some((&sol.y, &sol.z)),
                level,
                index: idx,
                current: Some((&e, &zi)),
            };
            let f = eval_generator(gen, tree.grid(), t, &e, &zi, &hist)?;
            let (y, u) = (sol.y.node(level, idx), sol.u.node(level, idx));
            for k in 0..m {
                let r = y[k] + dt * u[k] - e[k] - dt * f[k];
                equation = equation.max(r.abs());
            }

            let point = match sol.scheme {
                SolutionScheme::Penalized {
                    epsilon,
                    penalty_step: PenaltyStep::Implicit,
                } => phi.prox(epsilon, y)?,
                SolutionScheme::Penalized {
                    epsilon,
                    penalty_step: PenaltyStep::Explicit,
                } => phi.prox(epsilon, &e)?,
                SolutionScheme::Plain | SolutionScheme::Prox => y.to_vec(),
            };
            let phi_point = phi.eval_phi(&point)?;
            if !phi_point.is_finite() {
                subdiff = T::infinity();
                phi_integrability = T::infinity();
                continue;
            }
            phi_integrability += dt * phi_point / count;
            let check = phi.subgradient_check(&point, u, probes, T::zero())?;
            subdiff = subdiff.max(check.worst_violation);
        }
    }
    Ok(Residuals {
        equation,
        subdiff,
        phi_integrability,
    })
}

/// `||U^eps - U^prox||_H2^2` for each run, as an observational series.
pub fn multiplier_gap<T: Scalar>(
    runs: &[(T, Solution<T>)],
    reference: &Solution<T>,
    tree: &ScenarioTree<T>,
    beta: T,
) -> Result<Vec<(T, T)>> {
    runs.iter()
        .map(|(eps, sol)| Ok((*eps, path_norms(&sol.u.difference(&reference.u)?, tree, beta)?.h2)))
        .collect()
}
