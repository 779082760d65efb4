//! Terminal conditions and the small test problems shipped with the crate.

use crate::convex::ConvexSpec;
use crate::error::{Error, Result};
use crate::generators::{DelayMeasure, GeneratorSpec, Weight};
use crate::lattice::{build_tree, ScenarioTree};
use crate::scalar::Scalar;
use crate::solver::SolverConfig;

/// Terminal value as a function of `W(T)`. `b` is `m x d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum Terminal<T> {
    Constant(Vec<T>),
    Linear { a: Vec<T>, b: Vec<T> },
    /// `clamp(a + b W(T), lo, hi)` componentwise.
    ClippedLinear { a: Vec<T>, b: Vec<T>, lo: Vec<T>, hi: Vec<T> },
}

impl<T: Scalar> Terminal<T> {
    pub fn dim(&self) -> usize {
        match self {
            Terminal::Constant(c) => c.len(),
            Terminal::Linear { a, .. } | Terminal::ClippedLinear { a, .. } => a.len(),
        }
    }

    /// Leaf values, `m` per leaf, in leaf order.
    pub fn leaves(&self, tree: &ScenarioTree<T>) -> Result<Vec<T>> {
        let m = self.dim();
        let d = tree.bm_dim();
        if m == 0 {
            return Err(Error::invalid("terminal value must have at least one component"));
        }
        if let Terminal::Linear { b, .. } | Terminal::ClippedLinear { b, .. } = self {
            if b.len() != m * d {
                return Err(Error::DimensionMismatch {
                    expected: m * d,
                    got: b.len(),
                });
            }
        }
        if let Terminal::ClippedLinear { lo, hi, .. } = self {
            if lo.len() != m || hi.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: lo.len().min(hi.len()),
                });
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                return Err(Error::invalid("clip bounds need lo <= hi"));
            }
        }
        let w = tree.brownian();
        let mut out = Vec::with_capacity(tree.n_leaves() * m);
        for wt in w.leaves().chunks(d) {
            for k in 0..m {
                let v = match self {
                    Terminal::Constant(c) => c[k],
                    Terminal::Linear { a, b } => a[k] + linear_part(b, k, d, wt),
                    Terminal::ClippedLinear { a, b, lo, hi } => (a[k] + linear_part(b, k, d, wt)).max(lo[k]).min(hi[k]),
                };
                if !v.is_finite() {
                    return Err(Error::invalid("terminal values must be finite"));
                }
                out.push(v);
            }
        }
        Ok(out)
    }
}

fn linear_part<T: Scalar>(b: &[T], k: usize, d: usize, w: &[T]) -> T {
    (0..d).map(|j| b[k * d + j] * w[j]).sum()
}

/// A complete problem instance.
#[derive(Debug, Clone)]
pub struct Problem<T> {
    pub name: String,
    pub horizon: T,
    pub n_steps: usize,
    pub bm_dim: usize,
    pub terminal: Terminal<T>,
    pub generator: GeneratorSpec<T>,
    pub phi: ConvexSpec<T>,
    pub config: SolverConfig<T>,
}

impl<T: Scalar> Problem<T> {
    pub fn tree(&self) -> Result<ScenarioTree<T>> {
        build_tree(self.n_steps, self.horizon, self.bm_dim)
    }

    pub fn xi(&self, tree: &ScenarioTree<T>) -> Result<Vec<T>> {
        self.terminal.leaves(tree)
    }

    pub fn beta(&self) -> T {
        self.config.beta_for(self.generator.lipschitz_instant())
    }

    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self
    }
}

fn base_config<T: Scalar>(beta: f64) -> SolverConfig<T> {
    SolverConfig {
        beta: Some(T::lit(beta)),
        ..SolverConfig::default()
    }
}

/// Box `[-1/2, 1/2]`, `F = y` pushing paths outward, `xi = clamp(0.2 + W(T))`.
pub fn indicator_box<T: Scalar>(n_steps: usize) -> Problem<T> {
    let half = T::lit(0.5);
    Problem {
        name: "indicator_box".into(),
        horizon: T::one(),
        n_steps,
        bm_dim: 1,
        terminal: Terminal::ClippedLinear {
            a: vec![T::lit(0.2)],
            b: vec![T::one()],
            lo: vec![-half],
            hi: vec![half],
        },
        generator: GeneratorSpec::linear_instant(vec![T::one()], vec![T::zero()], 1, 1).expect("1 x 1 generator"),
        phi: ConvexSpec::indicator_box(vec![-half], vec![half]).expect("box contains 0"),
        config: base_config(1.0),
    }
}

/// Quadratic penalty with `F = 0.2 + 0.3 z(t - 1/4)`.
pub fn quadratic_delayed<T: Scalar>(n_steps: usize) -> Problem<T> {
    let horizon = T::lit(0.5);
    let kappa = T::lit(0.3);
    let generator = GeneratorSpec::delayed_z(kappa, T::lit(0.25), 1, 1, horizon)
        .and_then(|g| g.with_offset(vec![T::lit(0.2)]))
        .expect("valid delayed generator");
    let k = generator.lipschitz_delay();
    Problem {
        name: "quadratic_delayed".into(),
        horizon,
        n_steps,
        bm_dim: 1,
        terminal: Terminal::Linear {
            a: vec![T::lit(0.5)],
            b: vec![T::one()],
        },
        generator: generator.with_constants(T::one(), k),
        phi: ConvexSpec::quadratic(T::lit(2.0), 1).expect("positive c"),
        config: base_config(1.0),
    }
}

/// One-norm penalty with a two-atom moving average of `z`.
pub fn one_norm_moving_average<T: Scalar>(n_steps: usize) -> Problem<T> {
    let half = T::lit(0.5);
    let generator = GeneratorSpec::moving_average_z(
        Weight::Constant(T::lit(0.4)),
        DelayMeasure::DiscreteMixture(vec![(-T::lit(0.25), half), (T::zero(), half)]),
        1,
        1,
    )
    .expect("valid moving average");
    let k = generator.lipschitz_delay();
    Problem {
        name: "one_norm_moving_average".into(),
        horizon: T::one(),
        n_steps,
        bm_dim: 1,
        terminal: Terminal::Linear {
            a: vec![T::lit(0.3)],
            b: vec![T::lit(0.8)],
        },
        generator: generator.with_constants(T::one(), k),
        phi: ConvexSpec::one_norm(half, 1).expect("positive c"),
        config: base_config(1.0),
    }
}

/// Half-line constraint `y <= 1/4` with a running integral of `z`.
pub fn half_line_running_integral<T: Scalar>(n_steps: usize) -> Problem<T> {
    let cap = T::lit(0.25);
    let generator = GeneratorSpec::running_integral_z(T::lit(0.2), 1, 1, T::one())
        .and_then(|g| g.with_offset(vec![T::lit(0.5)]))
        .expect("valid running integral");
    let k = generator.lipschitz_delay();
    Problem {
        name: "half_line_running_integral".into(),
        horizon: T::one(),
        n_steps,
        bm_dim: 1,
        terminal: Terminal::ClippedLinear {
            a: vec![T::zero()],
            b: vec![T::one()],
            lo: vec![T::neg_infinity()],
            hi: vec![cap],
        },
        generator: generator.with_constants(T::one(), k),
        phi: ConvexSpec::indicator_box(vec![T::neg_infinity()], vec![cap]).expect("half line contains 0"),
        config: base_config(1.0),
    }
}

/// Every shipped problem at `n_steps = 4`.
pub fn shipped<T: Scalar>() -> Vec<Problem<T>> {
    vec![
        indicator_box(4),
        quadratic_delayed(4),
        one_norm_moving_average(4),
        half_line_running_integral(4),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_variants() {
        let tree = build_tree::<f64>(2, 1.0, 1).unwrap();
        let h = 0.5f64.sqrt();
        let lin = Terminal::Linear {
            a: vec![1.0],
            b: vec![2.0],
        }
        .leaves(&tree)
        .unwrap();
        assert_eq!(lin, vec![1.0 + 4.0 * h, 1.0, 1.0, 1.0 - 4.0 * h]);
        let clipped = Terminal::ClippedLinear {
            a: vec![0.0],
            b: vec![1.0],
            lo: vec![-0.5],
            hi: vec![0.5],
        }
        .leaves(&tree)
        .unwrap();
        assert_eq!(clipped, vec![0.5, 0.0, 0.0, -0.5]);
        assert_eq!(Terminal::Constant(vec![3.0, 4.0]).leaves(&tree).unwrap().len(), 8);
        assert!(Terminal::Linear {
            a: vec![1.0],
            b: vec![1.0, 2.0]
        }
        .leaves(&tree)
        .is_err());
    }

    #[test]
    fn shipped_generators_pass_their_audit() {
        for p in shipped::<f64>() {
            let tree = p.tree().unwrap();
            p.generator.validate(tree.grid()).unwrap();
            p.config.validate().unwrap();
            let xi = p.xi(&tree).unwrap();
            crate::solver::check_terminal(&tree, &xi, &p.phi).unwrap();
        }
    }
}
