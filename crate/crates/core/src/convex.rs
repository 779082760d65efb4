//! Convex penalties with closed-form resolvents.
//!
//! Every [`ConvexSpec`] is proper, convex and lower semicontinuous with
//! `phi >= phi(0) = 0`. The Moreau envelope and the Yosida gradient are always
//! derived from the resolvent `J_eps` (never by numerical minimization):
//!
//! ```text
//! phi_eps(y)      = |y - J_eps y|^2 / (2 eps) + phi(J_eps y)
//! grad phi_eps(y) = (y - J_eps y) / eps
//! ```

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

pub type ScalarFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;
/// `(epsilon, y) -> argmin_v { |y - v|^2 / (2 epsilon) + phi(v) }`
pub type ProxFn<T> = Arc<dyn Fn(T, T) -> T + Send + Sync>;

/// A one-dimensional convex function supplied as a value callback and an
/// explicit prox callback. The prox is checked against a bracketing search at
/// construction.
#[derive(Clone)]
pub struct Custom1D<T> {
    label: String,
    value: ScalarFn<T>,
    prox: ProxFn<T>,
    shift: T,
}

impl<T> fmt::Debug for Custom1D<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Custom1D").field("label", &self.label).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum ConvexKind<T> {
    Zero,
    /// Indicator of `[lo, hi]` (componentwise); bounds may be infinite.
    IndicatorBox { lo: Vec<T>, hi: Vec<T> },
    /// `c |y|^2 / 2`
    Quadratic { c: T },
    /// `c * sum_k |y_k|`
    OneNorm { c: T },
    Custom1D(Custom1D<T>),
}

#[derive(Debug, Clone)]
pub struct ConvexSpec<T> {
    kind: ConvexKind<T>,
    dim: usize,
}

/// Resolvent, envelope and gradient at one point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YosidaTriple<T> {
    pub resolvent: Vec<T>,
    pub envelope: T,
    pub gradient: Vec<T>,
    pub epsilon: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubgradientCheck<T> {
    /// `max_v <u, v - y> + phi(y) - phi(v)` over the probes.
    pub worst_violation: T,
    pub passed: bool,
}

impl<T: Scalar> ConvexSpec<T> {
    pub fn zero(dim: usize) -> Self {
        ConvexSpec {
            kind: ConvexKind::Zero,
            dim,
        }
    }

    /// Rejects boxes that do not contain the origin.
    pub fn indicator_box(lo: Vec<T>, hi: Vec<T>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::invalid("box bounds must be nonempty and of equal length"));
        }
        for (&l, &h) in lo.iter().zip(&hi) {
            if l.is_nan() || h.is_nan() {
                return Err(Error::invalid("box bounds must not be NaN"));
            }
            if l > T::zero() || h < T::zero() {
                return Err(Error::invalid("box must contain the origin (lo <= 0 <= hi)"));
            }
        }
        let dim = lo.len();
        Ok(ConvexSpec {
            kind: ConvexKind::IndicatorBox { lo, hi },
            dim,
        })
    }

    pub fn quadratic(c: T, dim: usize) -> Result<Self> {
        if !(c >= T::zero()) || !c.is_finite() {
            return Err(Error::invalid("quadratic coefficient must be finite and nonnegative"));
        }
        Ok(ConvexSpec {
            kind: ConvexKind::Quadratic { c },
            dim,
        })
    }

    pub fn one_norm(c: T, dim: usize) -> Result<Self> {
        if !(c >= T::zero()) || !c.is_finite() {
            return Err(Error::invalid("one-norm coefficient must be finite and nonnegative"));
        }
        Ok(ConvexSpec {
            kind: ConvexKind::OneNorm { c },
            dim,
        })
    }

    /// Wraps a user function. `value` is shifted so that `phi(0) = 0`; the
    /// origin must be a minimizer and `prox` must match a bracketing search
    /// on a fixed sample of points and step sizes.
    pub fn custom_1d(label: impl Into<String>, value: ScalarFn<T>, prox: ProxFn<T>) -> Result<Self> {
        let shift = value(T::zero());
        if !shift.is_finite() {
            return Err(Error::invalid("custom convex function must be finite at 0"));
        }
        let custom = Custom1D {
            label: label.into(),
            value,
            prox,
            shift,
        };
        let samples = [-25.0, -5.0, -1.3, -0.2, -1e-3, 0.05, 0.7, 2.0, 9.0, 40.0];
        for &s in &samples {
            let v = custom.eval(T::lit(s));
            if v < -T::lit(1e-12) * (T::one() + shift.abs()) {
                return Err(Error::invalid(format!(
                    "custom convex function dips below its value at 0 (at y = {s})"
                )));
            }
        }
        for &eps in &[1e-3, 0.1, 1.0, 4.0] {
            for &s in &samples {
                let (y, e) = (T::lit(s), T::lit(eps));
                let p = (custom.prox)(e, y);
                if !p.is_finite() {
                    return Err(Error::CustomProx {
                        y: s,
                        epsilon: eps,
                        gap: f64::INFINITY,
                    });
                }
                let reference = custom.bracket_prox(e, y);
                let obj = |v: T| (y - v) * (y - v) / (T::lit(2.0) * e) + custom.eval(v);
                let gap = obj(p) - obj(reference);
                if gap > T::lit(1e-9) * (T::one() + obj(reference).abs()) {
                    return Err(Error::CustomProx {
                        y: s,
                        epsilon: eps,
                        gap: gap.to_f64_lossy(),
                    });
                }
            }
        }
        Ok(ConvexSpec {
            kind: ConvexKind::Custom1D(custom),
            dim: 1,
        })
    }

    /// `right * max(y, 0) + left * max(-y, 0)` as a [`ConvexKind::Custom1D`].
    pub fn asymmetric_abs(left: T, right: T) -> Result<Self> {
        if !(left >= T::zero() && right >= T::zero()) || !left.is_finite() || !right.is_finite() {
            return Err(Error::invalid("slopes must be finite and nonnegative"));
        }
        let value: ScalarFn<T> = Arc::new(move |y: T| right * y.max(T::zero()) + left * (-y).max(T::zero()));
        let prox: ProxFn<T> = Arc::new(move |eps: T, y: T| {
            if y > eps * right {
                y - eps * right
            } else if y < -eps * left {
                y + eps * left
            } else {
                T::zero()
            }
        });
        Self::custom_1d(format!("asymmetric_abs({left}, {right})"), value, prox)
    }

    pub fn kind(&self) -> &ConvexKind<T> {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, ConvexKind::Zero)
    }

    fn check_dim(&self, y: &[T]) -> Result<()> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: y.len(),
            });
        }
        Ok(())
    }

    /// `phi(y)`, `+inf` outside the domain.
    pub fn eval_phi(&self, y: &[T]) -> Result<T> {
        self.check_dim(y)?;
        Ok(self.eval_unchecked(y))
    }

    fn eval_unchecked(&self, y: &[T]) -> T {
        match &self.kind {
            ConvexKind::Zero => T::zero(),
            ConvexKind::IndicatorBox { lo, hi } => {
                let inside = y.iter().zip(lo.iter().zip(hi)).all(|(&v, (&l, &h))| l <= v && v <= h);
                if inside {
                    T::zero()
                } else {
                    T::infinity()
                }
            }
            ConvexKind::Quadratic { c } => *c * linalg::norm_sq(y) / T::lit(2.0),
            ConvexKind::OneNorm { c } => *c * y.iter().map(|v| v.abs()).sum::<T>(),
            ConvexKind::Custom1D(f) => f.eval(y[0]),
        }
    }

    /// Resolvent `J_eps y`.
    pub fn prox(&self, epsilon: T, y: &[T]) -> Result<Vec<T>> {
        self.check_dim(y)?;
        check_eps(epsilon)?;
        Ok(self.prox_unchecked(epsilon, y))
    }

    pub(crate) fn prox_unchecked(&self, epsilon: T, y: &[T]) -> Vec<T> {
        match &self.kind {
            ConvexKind::Zero => y.to_vec(),
            ConvexKind::IndicatorBox { lo, hi } => y
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&v, (&l, &h))| v.max(l).min(h))
                .collect(),
            ConvexKind::Quadratic { c } => {
                let f = T::one() / (T::one() + epsilon * *c);
                y.iter().map(|&v| v * f).collect()
            }
            ConvexKind::OneNorm { c } => {
                let thr = epsilon * *c;
                y.iter()
                    .map(|&v| {
                        if v > thr {
                            v - thr
                        } else if v < -thr {
                            v + thr
                        } else {
                            T::zero()
                        }
                    })
                    .collect()
            }
            ConvexKind::Custom1D(f) => vec![(f.prox)(epsilon, y[0])],
        }
    }

    /// Moreau envelope `phi_eps(y)`, evaluated through the resolvent.
    pub fn moreau(&self, epsilon: T, y: &[T]) -> Result<T> {
        Ok(self.yosida(epsilon, y)?.envelope)
    }

    /// `grad phi_eps(y) = (y - J_eps y) / eps`.
    pub fn yosida_grad(&self, epsilon: T, y: &[T]) -> Result<Vec<T>> {
        self.check_dim(y)?;
        check_eps(epsilon)?;
        let j = self.prox_unchecked(epsilon, y);
        Ok(grad_from(y, &j, epsilon))
    }

    pub fn yosida(&self, epsilon: T, y: &[T]) -> Result<YosidaTriple<T>> {
        self.check_dim(y)?;
        check_eps(epsilon)?;
        let resolvent = self.prox_unchecked(epsilon, y);
        let envelope = linalg::dist_sq(y, &resolvent) / (T::lit(2.0) * epsilon) + self.eval_unchecked(&resolvent);
        let gradient = grad_from(y, &resolvent, epsilon);
        Ok(YosidaTriple {
            resolvent,
            envelope,
            gradient,
            epsilon,
        })
    }

    /// Solves `v + step * grad phi_eps(v) = x` in closed form:
    /// `v = x - step / (eps + step) * (x - J_{eps + step} x)`.
    pub fn envelope_prox(&self, epsilon: T, step: T, x: &[T]) -> Result<Vec<T>> {
        self.check_dim(x)?;
        check_eps(epsilon)?;
        check_eps(step)?;
        Ok(self.envelope_prox_unchecked(epsilon, step, x))
    }

    pub(crate) fn envelope_prox_unchecked(&self, epsilon: T, step: T, x: &[T]) -> Vec<T> {
        if self.is_zero() {
            return x.to_vec();
        }
        let j = self.prox_unchecked(epsilon + step, x);
        let w = step / (epsilon + step);
        x.iter().zip(&j).map(|(&a, &b)| a - w * (a - b)).collect()
    }

    /// Tests `(y, u) in d phi` against a finite set of probe points.
    pub fn subgradient_check(&self, y: &[T], u: &[T], probes: &[Vec<T>], tol: T) -> Result<SubgradientCheck<T>> {
        self.check_dim(y)?;
        self.check_dim(u)?;
        let phi_y = self.eval_unchecked(y);
        if !phi_y.is_finite() {
            return Err(Error::NotInDomain);
        }
        let mut worst = T::neg_infinity();
        for v in probes {
            self.check_dim(v)?;
            let phi_v = self.eval_unchecked(v);
            if !phi_v.is_finite() {
                continue;
            }
            let gap = linalg::dot(u, &linalg::sub(v, y)) + phi_y - phi_v;
            worst = worst.max(gap);
        }
        Ok(SubgradientCheck {
            worst_violation: worst,
            passed: worst <= tol,
        })
    }

    /// One-sided derivative interval `[phi'_-(y), phi'_+(y)]` for
    /// one-dimensional specs, by finite differences. Diagnostic only.
    pub fn subdifferential_interval(&self, y: T) -> Result<(T, T)> {
        if self.dim != 1 {
            return Err(Error::invalid("interval subdifferential is defined for m = 1 only"));
        }
        let fy = self.eval_unchecked(&[y]);
        if !fy.is_finite() {
            return Err(Error::NotInDomain);
        }
        let h = T::lit(1e-6) * T::one().max(y.abs());
        let left = (fy - self.eval_unchecked(&[y - h])) / h;
        let right = (self.eval_unchecked(&[y + h]) - fy) / h;
        Ok((left, right))
    }

    /// Points on the boundary of the domain (finite box faces and the origin),
    /// used as adversarial probes for normal-cone checks.
    pub fn boundary_points(&self) -> Vec<Vec<T>> {
        let mut out = vec![vec![T::zero(); self.dim]];
        if let ConvexKind::IndicatorBox { lo, hi } = &self.kind {
            let choices: Vec<Vec<T>> = lo
                .iter()
                .zip(hi)
                .map(|(&l, &h)| {
                    let mut c = vec![T::zero()];
                    if l.is_finite() {
                        c.push(l);
                    }
                    if h.is_finite() && h != l {
                        c.push(h);
                    }
                    c
                })
                .collect();
            let total: usize = choices.iter().map(Vec::len).product();
            // Corners grow as 3^m; beyond a few dimensions keep faces only.
            if total <= 729 {
                for mut code in 1..total {
                    let mut p = Vec::with_capacity(self.dim);
                    for c in &choices {
                        p.push(c[code % c.len()]);
                        code /= c.len();
                    }
                    out.push(p);
                }
            } else {
                for (k, c) in choices.iter().enumerate() {
                    for &v in &c[1..] {
                        let mut p = vec![T::zero(); self.dim];
                        p[k] = v;
                        out.push(p);
                    }
                }
            }
        }
        out
    }

    /// Projection into `Dom(phi)`; identity for everywhere-finite specs.
    pub fn clip_to_domain(&self, y: &[T]) -> Vec<T> {
        match &self.kind {
            ConvexKind::IndicatorBox { .. } => self.prox_unchecked(T::one(), y),
            _ => y.to_vec(),
        }
    }
}

impl<T: Scalar> Custom1D<T> {
    fn eval(&self, y: T) -> T {
        (self.value)(y) - self.shift
    }

    /// Minimizer of `(v - y)^2 / (2 eps) + phi(v)` by ternary search on the
    /// segment between 0 and `y`, which contains it because 0 minimizes `phi`.
    fn bracket_prox(&self, eps: T, y: T) -> T {
        let obj = |v: T| (y - v) * (y - v) / (T::lit(2.0) * eps) + self.eval(v);
        let (mut a, mut b) = (y.min(T::zero()), y.max(T::zero()));
        let third = T::lit(1.0 / 3.0);
        for _ in 0..300 {
            let m1 = a + (b - a) * third;
            let m2 = b - (b - a) * third;
            if obj(m1) <= obj(m2) {
                b = m2;
            } else {
                a = m1;
            }
        }
        (a + b) / T::lit(2.0)
    }
}

fn grad_from<T: Scalar>(y: &[T], j: &[T], epsilon: T) -> Vec<T> {
    y.iter().zip(j).map(|(&a, &b)| (a - b) / epsilon).collect()
}

fn check_eps<T: Scalar>(epsilon: T) -> Result<()> {
    if !(epsilon > T::zero()) || !epsilon.is_finite() {
        return Err(Error::invalid("epsilon must be positive and finite"));
    }
    Ok(())
}
