//! Time-delayed generators `F(t, y, z, Y_t, Z_t)`.
//!
//! Past segments are read through a [`History`] accessor that already applies
//! the extension `Y(s) = Y(0)`, `Z(s) = 0` for `s < 0`. Built-in generators map
//! a `m x d` matrix `z` to `R^m` by summing over Brownian coordinates, so their
//! delay constant picks up a factor `d`.
//!
//! [`GeneratorKind::RunningIntegralZ`] is `kappa * int_0^s z(u) du`, the running
//! integral of the `Z` path. The usual textbook form reuses `s` as both the
//! bound and the free variable; the running integral is the reading used here.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::convex::ScalarFn;
use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, ScenarioTree, TimeGrid};
use crate::linalg;
use crate::scalar::Scalar;

/// Read access to the past of `(Y, Z)` as seen from the current node.
pub trait History<T> {
    fn y_at(&self, time: T) -> Result<Vec<T>>;
    fn z_at(&self, time: T) -> Result<Vec<T>>;
}

/// Probability measure on `[-T, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub enum DelayMeasure<T> {
    DiracAtZero,
    Dirac(T),
    /// Uniform on `[-T, 0]` with `T` the horizon.
    UniformOn,
    /// Atoms `(theta_k, weight_k)`.
    DiscreteMixture(Vec<(T, T)>),
}

impl<T: Scalar> DelayMeasure<T> {
    pub fn validate(&self, horizon: T) -> Result<()> {
        let tol = T::snap_tol() * T::one().max(horizon);
        let in_range = |theta: T| theta <= tol && theta >= -horizon - tol;
        match self {
            DelayMeasure::DiracAtZero | DelayMeasure::UniformOn => Ok(()),
            DelayMeasure::Dirac(theta) => {
                if in_range(*theta) {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("Dirac atom {theta} lies outside [-T, 0]")))
                }
            }
            DelayMeasure::DiscreteMixture(atoms) => {
                if atoms.is_empty() {
                    return Err(Error::invalid("discrete mixture needs at least one atom"));
                }
                let mut total = T::zero();
                for &(theta, w) in atoms {
                    if !in_range(theta) {
                        return Err(Error::invalid(format!("atom {theta} lies outside [-T, 0]")));
                    }
                    if !(w > T::zero()) {
                        return Err(Error::invalid("mixture weights must be positive"));
                    }
                    total += w;
                }
                if (total - T::one()).abs() > T::lit(1e-12).max(T::epsilon() * T::lit(16.0)) {
                    return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
                }
                Ok(())
            }
        }
    }
}

/// Bounded scalar weight `g` with `g(t) = 0` for `t < 0`.
#[derive(Clone)]
pub enum Weight<T> {
    Constant(T),
    /// `g(t) = values[k]` for the last `k` with `breaks[k] <= t`, zero before `breaks[0]`.
    Steps { breaks: Vec<T>, values: Vec<T> },
    Custom { func: ScalarFn<T>, bound: T },
}

impl<T: fmt::Debug> fmt::Debug for Weight<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weight::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            Weight::Steps { breaks, values } => f
                .debug_struct("Steps")
                .field("breaks", breaks)
                .field("values", values)
                .finish(),
            Weight::Custom { bound, .. } => f.debug_struct("Custom").field("bound", bound).finish_non_exhaustive(),
        }
    }
}

impl<T: Scalar> Weight<T> {
    pub fn eval(&self, t: T) -> T {
        if t < -T::snap_tol() {
            return T::zero();
        }
        match self {
            Weight::Constant(c) => *c,
            Weight::Steps { breaks, values } => breaks
                .iter()
                .zip(values)
                .take_while(|(&b, _)| b <= t + T::snap_tol())
                .last()
                .map_or(T::zero(), |(_, &v)| v),
            Weight::Custom { func, .. } => func(t),
        }
    }

    /// `sup |g|`.
    pub fn bound(&self) -> T {
        match self {
            Weight::Constant(c) => c.abs(),
            Weight::Steps { values, .. } => values.iter().fold(T::zero(), |m, v| m.max(v.abs())),
            Weight::Custom { bound, .. } => *bound,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Weight::Steps { breaks, values } => {
                if breaks.len() != values.len() {
                    return Err(Error::invalid("step weight needs one value per break"));
                }
                if breaks.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::invalid("step weight breaks must increase"));
                }
                Ok(())
            }
            Weight::Custom { bound, .. } if !(bound.is_finite() && *bound >= T::zero()) => {
                Err(Error::invalid("custom weight bound must be finite"))
            }
            _ => Ok(()),
        }
    }
}

/// User generator callback: `(t, y, z, history) -> F`.
pub type GeneratorFn<T> =
    Arc<dyn Fn(T, &[T], &[T], &dyn History<T>) -> std::result::Result<Vec<T>, String> + Send + Sync>;

#[derive(Clone)]
pub enum GeneratorKind<T> {
    Zero,
    /// `A y + B vec(z)` with `A` `m x m` and `B` `m x (m d)`, both row-major.
    LinearInstant { a: Vec<T>, b: Vec<T> },
    /// `kappa * z(t - delay) 1`
    DelayedZ { kappa: T, delay: T },
    /// `kappa * int_0^t z(u) du 1`
    RunningIntegralZ { kappa: T },
    /// `int g(t + theta) z(t + theta) 1 alpha(d theta)`
    MovingAverageZ { weight: Weight<T>, alpha: DelayMeasure<T> },
    /// Must be re-entrant; it may be called concurrently.
    Custom(GeneratorFn<T>),
}

impl<T: fmt::Debug> fmt::Debug for GeneratorKind<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorKind::Zero => f.write_str("Zero"),
            GeneratorKind::LinearInstant { a, b } => {
                f.debug_struct("LinearInstant").field("a", a).field("b", b).finish()
            }
            GeneratorKind::DelayedZ { kappa, delay } => f
                .debug_struct("DelayedZ")
                .field("kappa", kappa)
                .field("delay", delay)
                .finish(),
            GeneratorKind::RunningIntegralZ { kappa } => {
                f.debug_struct("RunningIntegralZ").field("kappa", kappa).finish()
            }
            GeneratorKind::MovingAverageZ { weight, alpha } => f
                .debug_struct("MovingAverageZ")
                .field("weight", weight)
                .field("alpha", alpha)
                .finish(),
            GeneratorKind::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// A generator together with its declared Lipschitz data.
///
/// `lipschitz_instant` is `L` in `|F(y,z,p) - F(y',z',p)| <= L (|y-y'| + |z-z'|)`;
/// `lipschitz_delay` is `K` in
/// `|F(y,z,p) - F(y,z,p')|^2 <= K int |p(t+theta) - p'(t+theta)|^2 alpha(d theta)`.
#[derive(Debug, Clone)]
pub struct GeneratorSpec<T> {
    kind: GeneratorKind<T>,
    m: usize,
    d: usize,
    offset: Vec<T>,
    lipschitz_instant: T,
    lipschitz_delay: T,
    alpha: DelayMeasure<T>,
}

impl<T: Scalar> GeneratorSpec<T> {
    fn with_kind(kind: GeneratorKind<T>, m: usize, d: usize, l: T, k: T, alpha: DelayMeasure<T>) -> Self {
        GeneratorSpec {
            kind,
            m,
            d,
            offset: vec![T::zero(); m],
            lipschitz_instant: l,
            lipschitz_delay: k,
            alpha,
        }
    }

    pub fn zero(m: usize, d: usize) -> Self {
        Self::with_kind(GeneratorKind::Zero, m, d, T::zero(), T::zero(), DelayMeasure::DiracAtZero)
    }

    pub fn linear_instant(a: Vec<T>, b: Vec<T>, m: usize, d: usize) -> Result<Self> {
        if a.len() != m * m {
            return Err(Error::DimensionMismatch {
                expected: m * m,
                got: a.len(),
            });
        }
        if b.len() != m * m * d {
            return Err(Error::DimensionMismatch {
                expected: m * m * d,
                got: b.len(),
            });
        }
        let l = linalg::frobenius(&a).max(linalg::frobenius(&b));
        Ok(Self::with_kind(
            GeneratorKind::LinearInstant { a, b },
            m,
            d,
            l,
            T::zero(),
            DelayMeasure::DiracAtZero,
        ))
    }

    /// `kappa * z(t - delay)`; with `delay >= T` the delayed argument is always
    /// before time zero and the generator vanishes.
    pub fn delayed_z(kappa: T, delay: T, m: usize, d: usize, horizon: T) -> Result<Self> {
        if !(delay >= T::zero()) || !delay.is_finite() || !kappa.is_finite() {
            return Err(Error::invalid("delay must be finite and nonnegative, kappa finite"));
        }
        let k = kappa * kappa * T::from_usize_lossy(d);
        Ok(Self::with_kind(
            GeneratorKind::DelayedZ { kappa, delay },
            m,
            d,
            T::zero(),
            k,
            DelayMeasure::Dirac(-delay.min(horizon)),
        ))
    }

    pub fn running_integral_z(kappa: T, m: usize, d: usize, horizon: T) -> Result<Self> {
        if !kappa.is_finite() {
            return Err(Error::invalid("kappa must be finite"));
        }
        let k = kappa * kappa * horizon * horizon * T::from_usize_lossy(d);
        Ok(Self::with_kind(
            GeneratorKind::RunningIntegralZ { kappa },
            m,
            d,
            T::zero(),
            k,
            DelayMeasure::UniformOn,
        ))
    }

    pub fn moving_average_z(weight: Weight<T>, alpha: DelayMeasure<T>, m: usize, d: usize) -> Result<Self> {
        weight.validate()?;
        let g = weight.bound();
        let k = g * g * T::from_usize_lossy(d);
        Ok(Self::with_kind(
            GeneratorKind::MovingAverageZ {
                weight,
                alpha: alpha.clone(),
            },
            m,
            d,
            T::zero(),
            k,
            alpha,
        ))
    }

    /// Custom generator; `L`, `K` and `alpha` are taken on trust and only
    /// audited statistically by [`GeneratorSpec::validate`].
    pub fn custom(func: GeneratorFn<T>, m: usize, d: usize, l: T, k: T, alpha: DelayMeasure<T>) -> Self {
        Self::with_kind(GeneratorKind::Custom(func), m, d, l, k, alpha)
    }

    /// Adds a constant term, so that `F(t, 0, 0, 0, 0) = offset`.
    pub fn with_offset(mut self, offset: Vec<T>) -> Result<Self> {
        if offset.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                got: offset.len(),
            });
        }
        self.offset = offset;
        Ok(self)
    }

    /// Overrides the declared constants (e.g. to use a larger `L` in the gate).
    pub fn with_constants(mut self, lipschitz_instant: T, lipschitz_delay: T) -> Self {
        self.lipschitz_instant = lipschitz_instant;
        self.lipschitz_delay = lipschitz_delay;
        self
    }

    pub fn kind(&self) -> &GeneratorKind<T> {
        &self.kind
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn offset(&self) -> &[T] {
        &self.offset
    }

    pub fn lipschitz_instant(&self) -> T {
        self.lipschitz_instant
    }

    pub fn lipschitz_delay(&self) -> T {
        self.lipschitz_delay
    }

    pub fn alpha(&self) -> &DelayMeasure<T> {
        &self.alpha
    }

    /// True when the generator may read values strictly before the current time.
    pub fn reads_past(&self) -> bool {
        !matches!(
            &self.kind,
            GeneratorKind::Zero
                | GeneratorKind::LinearInstant { .. }
                | GeneratorKind::MovingAverageZ {
                    alpha: DelayMeasure::DiracAtZero,
                    ..
                }
        )
    }

    /// Structural checks plus a seeded probe audit of the declared `L` and `K`.
    pub fn validate(&self, grid: &TimeGrid<T>) -> Result<()> {
        if self.m == 0 || self.d == 0 {
            return Err(Error::invalid("generator dimensions must be positive"));
        }
        if !(self.lipschitz_instant >= T::zero() && self.lipschitz_delay >= T::zero()) {
            return Err(Error::invalid("Lipschitz constants must be nonnegative"));
        }
        self.alpha.validate(grid.horizon())?;
        if let GeneratorKind::MovingAverageZ { alpha, .. } = &self.kind {
            alpha.validate(grid.horizon())?;
        }
        let audit = lipschitz_audit(self, grid, 200, 0x5eed)?;
        let tol = T::lit(1e-10);
        if audit.instant_slack < -tol {
            return Err(Error::Lipschitz {
                constant: "L",
                declared: self.lipschitz_instant.to_f64_lossy(),
                observed: audit.required_instant.to_f64_lossy(),
            });
        }
        if audit.delay_slack < -tol {
            return Err(Error::Lipschitz {
                constant: "K",
                declared: self.lipschitz_delay.to_f64_lossy(),
                observed: audit.required_delay.to_f64_lossy(),
            });
        }
        Ok(())
    }
}

/// `int v(t + theta) g(t + theta) alpha(d theta)` for a vector-valued accessor.
///
/// The uniform measure uses the trapezoid rule on the grid points of
/// `[t - T, t]`.
pub fn delayed_quadrature<T: Scalar>(
    accessor: &dyn Fn(T) -> Result<Vec<T>>,
    t: T,
    alpha: &DelayMeasure<T>,
    weight: Option<&Weight<T>>,
    grid: &TimeGrid<T>,
) -> Result<Vec<T>> {
    let g = |s: T| weight.map_or(T::one(), |w| w.eval(s));
    let point = |theta: T| -> Result<Vec<T>> {
        let s = t + theta;
        Ok(linalg::scale(&accessor(s)?, g(s)))
    };
    match alpha {
        DelayMeasure::DiracAtZero => point(T::zero()),
        DelayMeasure::Dirac(theta) => point(*theta),
        DelayMeasure::DiscreteMixture(atoms) => {
            let mut acc: Option<Vec<T>> = None;
            for &(theta, w) in atoms {
                let v = point(theta)?;
                match acc.as_mut() {
                    None => acc = Some(linalg::scale(&v, w)),
                    Some(a) => linalg::axpy(a, w, &v),
                }
            }
            Ok(acc.unwrap_or_default())
        }
        DelayMeasure::UniformOn => {
            let n = grid.n_steps();
            let inner = T::one() / T::from_usize_lossy(n);
            let end = inner / T::lit(2.0);
            let mut acc: Option<Vec<T>> = None;
            for k in 0..=n {
                let w = if k == 0 || k == n { end } else { inner };
                let v = point(-grid.dt() * T::from_usize_lossy(k))?;
                match acc.as_mut() {
                    None => acc = Some(linalg::scale(&v, w)),
                    Some(a) => linalg::axpy(a, w, &v),
                }
            }
            Ok(acc.unwrap_or_default())
        }
    }
}

/// `F(t, y, z, Y_t, Z_t)`; zero for `t < 0`.
pub fn eval_generator<T: Scalar>(
    spec: &GeneratorSpec<T>,
    grid: &TimeGrid<T>,
    t: T,
    y: &[T],
    z: &[T],
    history: &dyn History<T>,
) -> Result<Vec<T>> {
    let (m, d) = (spec.m, spec.d);
    if y.len() != m || z.len() != m * d {
        return Err(Error::DimensionMismatch {
            expected: m + m * d,
            got: y.len() + z.len(),
        });
    }
    if t < -T::snap_tol() {
        return Ok(vec![T::zero(); m]);
    }
    if t > grid.horizon() * (T::one() + T::snap_tol()) {
        return Err(Error::invalid(format!("generator evaluated beyond the horizon at t = {t}")));
    }
    let z_acc = |s: T| history.z_at(s);
    let body = match &spec.kind {
        GeneratorKind::Zero => vec![T::zero(); m],
        GeneratorKind::LinearInstant { a, b } => {
            linalg::add(&linalg::mat_vec(a, m, m, y), &linalg::mat_vec(b, m, m * d, z))
        }
        GeneratorKind::DelayedZ { kappa, delay } => {
            let past = history.z_at(t - *delay)?;
            linalg::scale(&linalg::row_sums(&past, m, d), *kappa)
        }
        GeneratorKind::RunningIntegralZ { kappa } => {
            let avg = delayed_quadrature(&z_acc, t, &DelayMeasure::UniformOn, None, grid)?;
            linalg::scale(&linalg::row_sums(&avg, m, d), *kappa * grid.horizon())
        }
        GeneratorKind::MovingAverageZ { weight, alpha } => {
            let avg = delayed_quadrature(&z_acc, t, alpha, Some(weight), grid)?;
            linalg::row_sums(&avg, m, d)
        }
        GeneratorKind::Custom(func) => {
            let v = func(t, y, z, history).map_err(|message| Error::Generator {
                time: t.to_f64_lossy(),
                message,
            })?;
            if v.len() != m {
                return Err(Error::Generator {
                    time: t.to_f64_lossy(),
                    message: format!("callback returned {} components, expected {m}", v.len()),
                });
            }
            v
        }
    };
    Ok(linalg::add(&body, &spec.offset))
}

/// History that is identically zero (for `F(t, 0, 0, 0, 0)`).
#[derive(Debug, Clone, Copy)]
pub struct ZeroHistory {
    pub m: usize,
    pub d: usize,
}

impl<T: Scalar> History<T> for ZeroHistory {
    fn y_at(&self, _time: T) -> Result<Vec<T>> {
        Ok(vec![T::zero(); self.m])
    }
    fn z_at(&self, _time: T) -> Result<Vec<T>> {
        Ok(vec![T::zero(); self.m * self.d])
    }
}

/// Past of a single path given by its values at grid levels `0..=level`.
pub struct PathHistory<'a, T> {
    pub grid: &'a TimeGrid<T>,
    pub level: usize,
    pub y: &'a [Vec<T>],
    pub z: &'a [Vec<T>],
}

impl<T: Scalar> History<T> for PathHistory<'_, T> {
    fn y_at(&self, time: T) -> Result<Vec<T>> {
        Ok(match self.grid.locate(time, self.level)? {
            None => self.y[0].clone(),
            Some(k) => self.y[k].clone(),
        })
    }
    fn z_at(&self, time: T) -> Result<Vec<T>> {
        Ok(match self.grid.locate(time, self.level)? {
            None => vec![T::zero(); self.z[0].len()],
            Some(k) => self.z[k].clone(),
        })
    }
}

/// Past of `(Y, Z)` processes seen from a tree node. When `current` is set, a
/// query at the node's own time returns those values instead of the stored
/// ones; strictly earlier times always read the stored processes.
pub struct TreeHistory<'a, T> {
    pub tree: &'a ScenarioTree<T>,
    pub paths: Option<(&'a AdaptedProcess<T>, &'a AdaptedProcess<T>)>,
    pub level: usize,
    pub index: usize,
    pub current: Option<(&'a [T], &'a [T])>,
}

impl<T: Scalar> TreeHistory<'_, T> {
    fn lookup(&self, time: T, z_kind: bool) -> Result<Vec<T>> {
        let located = self.tree.grid().locate(time, self.level)?;
        if let (Some(k), Some((cy, cz))) = (located, self.current) {
            if k == self.level {
                return Ok(if z_kind { cz.to_vec() } else { cy.to_vec() });
            }
        }
        let (py, pz) = self.paths.ok_or(Error::MissingFrozenPaths)?;
        Ok(match located {
            None if z_kind => vec![T::zero(); pz.width()],
            None => py.root().to_vec(),
            Some(k) => {
                let j = self.tree.ancestor(self.level, self.index, k);
                if z_kind {
                    pz.node(k, j).to_vec()
                } else {
                    py.node(k, j).to_vec()
                }
            }
        })
    }
}

impl<T: Scalar> History<T> for TreeHistory<'_, T> {
    fn y_at(&self, time: T) -> Result<Vec<T>> {
        self.lookup(time, false)
    }
    fn z_at(&self, time: T) -> Result<Vec<T>> {
        self.lookup(time, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorBound<T> {
    /// `E sum_i dt |F_i|^2` along the paths.
    pub actual: T,
    /// `3(2L^2+K) T E sup|Y|^2 + 3(2L^2+K) E sum dt |Z|^2 + 3 E sum dt |F(t,0,0,0,0)|^2`
    pub bound: T,
    /// `actual - bound`, expected `<= 0`.
    pub slack: T,
}

/// Square-integrability diagnostic: compares `E int |F|^2` along `(y, z)` with
/// the a priori bound built from the declared constants.
pub fn generator_bound_diagnostic<T: Scalar>(
    spec: &GeneratorSpec<T>,
    y: &AdaptedProcess<T>,
    z: &AdaptedProcess<T>,
    tree: &ScenarioTree<T>,
) -> Result<GeneratorBound<T>> {
    if !y.fits(tree) || !z.fits(tree) || y.width() != spec.m || z.width() != spec.m * spec.d {
        return Err(Error::invalid("paths do not match the tree or generator dimensions"));
    }
    let n = tree.n_steps();
    let dt = tree.dt();
    let zero_hist = ZeroHistory { m: spec.m, d: spec.d };
    let zeros_y = vec![T::zero(); spec.m];
    let zeros_z = vec![T::zero(); spec.m * spec.d];
    let (mut actual, mut z_int, mut f0_int) = (T::zero(), T::zero(), T::zero());
    for level in 0..n {
        let t = tree.grid().time(level);
        let count = tree.level_len(level);
        let w = dt / T::from_usize_lossy(count);
        let f0 = eval_generator(spec, tree.grid(), t, &zeros_y, &zeros_z, &zero_hist)?;
        f0_int += dt * linalg::norm_sq(&f0);
        for idx in 0..count {
            let (yi, zi) = (y.node(level, idx), z.node(level, idx));
            let hist = TreeHistory {
                tree,
                paths: Some((y, z)),
                level,
                index: idx,
                current: None,
            };
            let f = eval_generator(spec, tree.grid(), t, yi, zi, &hist)?;
            actual += w * linalg::norm_sq(&f);
            z_int += w * linalg::norm_sq(zi);
        }
    }
    let sup_y = expected_running_sup_sq(y, tree);
    let l = spec.lipschitz_instant;
    let c = T::lit(3.0) * (T::lit(2.0) * l * l + spec.lipschitz_delay);
    let bound = c * tree.horizon() * sup_y + c * z_int + T::lit(3.0) * f0_int;
    Ok(GeneratorBound {
        actual,
        bound,
        slack: actual - bound,
    })
}

/// `E sup_i |X_i|^2` over grid times 0..=N.
fn expected_running_sup_sq<T: Scalar>(x: &AdaptedProcess<T>, tree: &ScenarioTree<T>) -> T {
    let mut run = vec![linalg::norm_sq(x.root())];
    for level in 1..=tree.n_steps() {
        run = (0..tree.level_len(level))
            .map(|idx| run[tree.parent(idx)].max(linalg::norm_sq(x.node(level, idx))))
            .collect();
    }
    run.iter().copied().sum::<T>() / T::from_usize_lossy(run.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzAudit<T> {
    /// Smallest `L(|dy|+|dz|) - |dF|` over probes.
    pub instant_slack: T,
    /// Smallest `K int |dp|^2 alpha - |dF|^2` over probes.
    pub delay_slack: T,
    /// Largest `|dF| / (|dy|+|dz|)` seen.
    pub required_instant: T,
    /// Largest `|dF|^2 / int |dp|^2 alpha` seen.
    pub required_delay: T,
    pub probes: usize,
}

/// Random two-point probes of the declared `L` and `K` at grid times, with
/// random past paths. Deterministic for a given seed.
pub fn lipschitz_audit<T: Scalar>(
    spec: &GeneratorSpec<T>,
    grid: &TimeGrid<T>,
    probes: usize,
    seed: u64,
) -> Result<LipschitzAudit<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, d) = (spec.m, spec.d);
    let n = grid.n_steps();
    let draw = |len: usize, rng: &mut ChaCha8Rng| -> Vec<T> {
        (0..len).map(|_| T::lit(rng.random_range(-5.0..5.0))).collect()
    };
    let mut audit = LipschitzAudit {
        instant_slack: T::infinity(),
        delay_slack: T::infinity(),
        required_instant: T::zero(),
        required_delay: T::zero(),
        probes,
    };
    for _ in 0..probes {
        let level = rng.random_range(0..n);
        let t = grid.time(level);
        let y = draw(m, &mut rng);
        let z = draw(m * d, &mut rng);
        let yb = draw(m, &mut rng);
        let zb = draw(m * d, &mut rng);
        let py: Vec<Vec<T>> = (0..=level).map(|_| draw(m, &mut rng)).collect();
        let pz: Vec<Vec<T>> = (0..=level).map(|_| draw(m * d, &mut rng)).collect();
        let qy: Vec<Vec<T>> = (0..=level).map(|_| draw(m, &mut rng)).collect();
        let qz: Vec<Vec<T>> = (0..=level).map(|_| draw(m * d, &mut rng)).collect();
        let p = PathHistory {
            grid,
            level,
            y: &py,
            z: &pz,
        };
        let q = PathHistory {
            grid,
            level,
            y: &qy,
            z: &qz,
        };

        let f = eval_generator(spec, grid, t, &y, &z, &p)?;
        let f_inst = eval_generator(spec, grid, t, &yb, &zb, &p)?;
        let df = linalg::norm(&linalg::sub(&f, &f_inst));
        let dx = linalg::norm(&linalg::sub(&y, &yb)) + linalg::norm(&linalg::sub(&z, &zb));
        audit.instant_slack = audit.instant_slack.min(spec.lipschitz_instant * dx - df);
        audit.required_instant = audit.required_instant.max(df / dx);

        let f_past = eval_generator(spec, grid, t, &y, &z, &q)?;
        let dfp = linalg::dist_sq(&f, &f_past);
        let gap = |s: T| -> Result<Vec<T>> {
            let dy = linalg::dist_sq(&p.y_at(s)?, &q.y_at(s)?);
            let dz = linalg::dist_sq(&p.z_at(s)?, &q.z_at(s)?);
            Ok(vec![dy + dz])
        };
        let integral = delayed_quadrature(&gap, t, &spec.alpha, None, grid)?[0];
        audit.delay_slack = audit.delay_slack.min(spec.lipschitz_delay * integral - dfp);
        if integral > T::zero() {
            audit.required_delay = audit.required_delay.max(dfp / integral);
        }
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_tree;

    fn grid() -> TimeGrid<f64> {
        TimeGrid::new(4, 1.0).unwrap()
    }

    struct Const(f64);
    impl History<f64> for Const {
        fn y_at(&self, _t: f64) -> Result<Vec<f64>> {
            Ok(vec![self.0])
        }
        fn z_at(&self, _t: f64) -> Result<Vec<f64>> {
            Ok(vec![self.0])
        }
    }

    #[test]
    fn quadrature_examples() {
        let g = grid();
        let acc = |s: f64| -> Result<Vec<f64>> { Ok(vec![10.0 + s]) };
        assert_eq!(
            delayed_quadrature(&acc, 0.5, &DelayMeasure::DiracAtZero, None, &g).unwrap(),
            vec![10.5]
        );
        // Z-kind history before time zero is zero.
        let tree = build_tree(4, 1.0, 1).unwrap();
        let w = tree.brownian();
        let hist = TreeHistory {
            tree: &tree,
            paths: Some((&w, &w)),
            level: 1,
            index: 0,
            current: None,
        };
        let zacc = |s: f64| hist.z_at(s);
        assert_eq!(
            delayed_quadrature(&zacc, 0.25, &DelayMeasure::Dirac(-0.5), None, &g).unwrap(),
            vec![0.0]
        );
        let cacc = |_s: f64| -> Result<Vec<f64>> { Ok(vec![3.25]) };
        let mix = DelayMeasure::DiscreteMixture(vec![(-1.0, 0.5), (0.0, 0.5)]);
        assert_eq!(delayed_quadrature(&cacc, 0.75, &mix, None, &g).unwrap(), vec![3.25]);
        let u = delayed_quadrature(&cacc, 0.75, &DelayMeasure::UniformOn, None, &g).unwrap();
        assert!((u[0] - 3.25).abs() < 1e-15);
    }

    #[test]
    fn measure_validation() {
        assert!(DelayMeasure::Dirac(-1.5).validate(1.0).is_err());
        assert!(DelayMeasure::Dirac(0.1).validate(1.0).is_err());
        assert!(DelayMeasure::DiscreteMixture(vec![(-0.5, 0.4), (0.0, 0.5)]).validate(1.0).is_err());
        assert!(DelayMeasure::DiscreteMixture(vec![(-0.5, 0.5), (0.0, 0.5)]).validate(1.0).is_ok());
        assert!(DelayMeasure::DiscreteMixture(vec![(-0.5, -0.5), (0.0, 1.5)]).validate(1.0).is_err());
    }

    #[test]
    fn generator_examples() {
        let g = grid();
        let h = Const(1.0);
        let zero = GeneratorSpec::<f64>::zero(1, 1);
        assert_eq!(eval_generator(&zero, &g, 0.5, &[2.0], &[3.0], &h).unwrap(), vec![0.0]);

        let tree = build_tree(4, 1.0, 1).unwrap();
        let w = tree.brownian();
        let hist = TreeHistory {
            tree: &tree,
            paths: Some((&w, &w)),
            level: 1,
            index: 1,
            current: None,
        };
        let dz = GeneratorSpec::delayed_z(2.0, 0.5, 1, 1, 1.0).unwrap();
        assert_eq!(eval_generator(&dz, &g, 0.25, &[0.0], &[0.0], &hist).unwrap(), vec![0.0]);

        let lin = GeneratorSpec::linear_instant(vec![0.0], vec![1.0], 1, 1).unwrap();
        assert_eq!(eval_generator(&lin, &g, 0.0, &[5.0], &[1.0], &h).unwrap(), vec![1.0]);
        assert!(eval_generator(&lin, &g, 0.0, &[5.0, 1.0], &[1.0], &h).is_err());
        // Negative times give zero by convention.
        assert_eq!(eval_generator(&lin, &g, -0.1, &[5.0], &[1.0], &h).unwrap(), vec![0.0]);
    }

    #[test]
    fn moving_average_at_zero_is_instantaneous() {
        let g = grid();
        let weight = Weight::Steps {
            breaks: vec![0.0, 0.4],
            values: vec![2.0, -1.5],
        };
        let spec = GeneratorSpec::moving_average_z(weight.clone(), DelayMeasure::DiracAtZero, 1, 1).unwrap();
        for &t in &[0.0, 0.25, 0.5, 0.75] {
            let h = Const(0.8);
            let f = eval_generator(&spec, &g, t, &[0.0], &[0.0], &h).unwrap();
            assert_eq!(f[0], weight.eval(t) * 0.8);
        }
        assert!(!spec.reads_past());
    }

    #[test]
    fn custom_errors_carry_context() {
        let f: GeneratorFn<f64> = Arc::new(|_t, _y, _z, _h| Err("boom".into()));
        let spec = GeneratorSpec::custom(f, 1, 1, 1.0, 0.0, DelayMeasure::DiracAtZero);
        let err = eval_generator(&spec, &grid(), 0.25, &[0.0], &[0.0], &Const(0.0)).unwrap_err();
        assert!(matches!(err, Error::Generator { ref message, .. } if message == "boom"));
    }

    #[test]
    fn builtin_constants_pass_their_audit() {
        let g = grid();
        let specs = vec![
            GeneratorSpec::zero(2, 1),
            GeneratorSpec::linear_instant(vec![0.5, -0.2, 0.1, 0.3], vec![1.0, 0.0, 0.5, 0.0, 0.2, 0.1, -0.4, 0.3], 2, 2)
                .unwrap(),
            GeneratorSpec::delayed_z(0.7, 0.3, 1, 2, 1.0).unwrap(),
            GeneratorSpec::running_integral_z(1.3, 2, 1, 1.0).unwrap(),
            GeneratorSpec::moving_average_z(Weight::Constant(-0.9), DelayMeasure::UniformOn, 1, 1).unwrap(),
        ];
        for spec in &specs {
            spec.validate(&g).unwrap();
        }
        // Understated constants are caught.
        let low = GeneratorSpec::delayed_z(0.7, 0.3, 1, 1, 1.0).unwrap().with_constants(0.0, 0.1);
        assert!(matches!(low.validate(&g), Err(Error::Lipschitz { constant: "K", .. })));
        let low = GeneratorSpec::linear_instant(vec![2.0], vec![0.0], 1, 1).unwrap().with_constants(1.0, 0.0);
        assert!(matches!(low.validate(&g), Err(Error::Lipschitz { constant: "L", .. })));
    }
}
