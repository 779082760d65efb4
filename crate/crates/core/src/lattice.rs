//! Time grid and the non-recombining Rademacher scenario tree.
//!
//! Level `i` of the tree holds `2^(d*i)` nodes laid out contiguously, level
//! after level. The children of node `j` at level `i` are `j*b .. j*b + b` at
//! level `i + 1` where `b = 2^d`; child `k` moves coordinate `l` of the
//! Brownian surrogate by `+sqrt(dt)` when bit `l` of `k` is clear and by
//! `-sqrt(dt)` when it is set. Every child has conditional probability `1/b`,
//! so conditional expectations are plain means over siblings.

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Default ceiling on the number of tree nodes.
pub const DEFAULT_MAX_NODES: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<T> {
    n_steps: usize,
    horizon: T,
    dt: T,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(n_steps: usize, horizon: T) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::invalid("horizon must be positive and finite"));
        }
        Ok(TimeGrid {
            n_steps,
            horizon,
            dt: horizon / T::from_usize_lossy(n_steps),
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// Grid time `t_i`; `t_N` is exactly the horizon.
    pub fn time(&self, i: usize) -> T {
        if i == self.n_steps {
            self.horizon
        } else {
            self.horizon * T::from_usize_lossy(i) / T::from_usize_lossy(self.n_steps)
        }
    }

    /// Left-constant grid lookup: the index `k <= max_level` with `t_k <= time < t_{k+1}`,
    /// or `None` when `time < 0`. Times within a few ulps of a grid point snap to it.
    pub(crate) fn locate(&self, time: T, max_level: usize) -> Result<Option<usize>> {
        let mut x = time / self.dt;
        let r = x.round();
        if (x - r).abs() <= T::snap_tol() * T::one().max(x.abs()) {
            x = r;
        }
        if x < T::zero() {
            return Ok(None);
        }
        if x > T::from_usize_lossy(max_level) {
            return Err(Error::FutureQuery {
                query: time.to_f64_lossy(),
                now: self.time(max_level).to_f64_lossy(),
            });
        }
        Ok(Some(x.floor().to_usize().unwrap_or(0)))
    }
}

/// Full `2^d`-ary tree over a [`TimeGrid`].
#[derive(Debug, Clone)]
pub struct ScenarioTree<T> {
    grid: TimeGrid<T>,
    bm_dim: usize,
    branching: usize,
    offsets: Vec<usize>,
    increments: Vec<Vec<T>>,
}

/// Builds a tree under the default node cap.
pub fn build_tree<T: Scalar>(n_steps: usize, horizon: T, bm_dim: usize) -> Result<ScenarioTree<T>> {
    ScenarioTree::new(n_steps, horizon, bm_dim, DEFAULT_MAX_NODES)
}

impl<T: Scalar> ScenarioTree<T> {
    pub fn new(n_steps: usize, horizon: T, bm_dim: usize, max_nodes: usize) -> Result<Self> {
        let grid = TimeGrid::new(n_steps, horizon)?;
        if bm_dim == 0 {
            return Err(Error::invalid("bm_dim must be at least 1"));
        }
        let nodes = node_count(n_steps, bm_dim);
        if nodes > max_nodes as u128 {
            return Err(Error::TreeTooLarge {
                nodes,
                cap: max_nodes,
            });
        }
        let branching = 1usize << bm_dim;
        let mut offsets = Vec::with_capacity(n_steps + 2);
        let mut acc = 0usize;
        let mut width = 1usize;
        for _ in 0..=n_steps {
            offsets.push(acc);
            acc += width;
            width *= branching;
        }
        offsets.push(acc);

        let step = grid.dt().sqrt();
        let increments = (0..branching)
            .map(|k| {
                (0..bm_dim)
                    .map(|l| if (k >> l) & 1 == 0 { step } else { -step })
                    .collect()
            })
            .collect();

        Ok(ScenarioTree {
            grid,
            bm_dim,
            branching,
            offsets,
            increments,
        })
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn dt(&self) -> T {
        self.grid.dt
    }

    pub fn horizon(&self) -> T {
        self.grid.horizon
    }

    pub fn bm_dim(&self) -> usize {
        self.bm_dim
    }

    /// Number of children per node, `2^bm_dim`.
    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn total_nodes(&self) -> usize {
        self.offsets[self.n_steps() + 1]
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.offsets[level + 1] - self.offsets[level]
    }

    pub fn n_leaves(&self) -> usize {
        self.level_len(self.n_steps())
    }

    /// Index of the first node of `level` in level-major storage.
    pub fn offset(&self, level: usize) -> usize {
        self.offsets[level]
    }

    /// Brownian increment carried by child `k` of any node.
    pub fn increment(&self, k: usize) -> &[T] {
        &self.increments[k]
    }

    pub fn increments(&self) -> &[Vec<T>] {
        &self.increments
    }

    pub fn children(&self, index: usize) -> std::ops::Range<usize> {
        index * self.branching..(index + 1) * self.branching
    }

    pub fn parent(&self, index: usize) -> usize {
        index / self.branching
    }

    /// Index of the ancestor at `target` of node `index` at `level`.
    pub fn ancestor(&self, level: usize, index: usize, target: usize) -> usize {
        debug_assert!(target <= level);
        index >> (self.bm_dim * (level - target))
    }

    /// The discrete Brownian path `W(t_i)` at every node.
    pub fn brownian(&self) -> AdaptedProcess<T> {
        let mut w = AdaptedProcess::zeros(self, self.bm_dim);
        for level in 1..=self.n_steps() {
            for idx in 0..self.level_len(level) {
                let parent = w.node(level - 1, self.parent(idx)).to_vec();
                let k = idx % self.branching;
                let v = linalg::add(&parent, &self.increments[k]);
                w.node_mut(level, idx).copy_from_slice(&v);
            }
        }
        w
    }
}

fn node_count(n_steps: usize, bm_dim: usize) -> u128 {
    let b: u128 = 1u128.checked_shl(bm_dim as u32).unwrap_or(u128::MAX);
    let mut total: u128 = 0;
    let mut width: u128 = 1;
    for _ in 0..=n_steps {
        total = total.saturating_add(width);
        width = width.saturating_mul(b);
    }
    total
}

/// Which extension applies before time zero: `Y(t) = Y(0)` or `Z(t) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessKind {
    Y,
    Z,
}

/// One value of fixed width per tree node, stored level-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess<T> {
    width: usize,
    bm_dim: usize,
    n_steps: usize,
    values: Vec<T>,
}

impl<T: Scalar> AdaptedProcess<T> {
    pub fn zeros(tree: &ScenarioTree<T>, width: usize) -> Self {
        AdaptedProcess {
            width,
            bm_dim: tree.bm_dim,
            n_steps: tree.n_steps(),
            values: vec![T::zero(); tree.total_nodes() * width],
        }
    }

    pub fn from_fn<F>(tree: &ScenarioTree<T>, width: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> Vec<T>,
    {
        let mut p = Self::zeros(tree, width);
        for level in 0..=tree.n_steps() {
            for idx in 0..tree.level_len(level) {
                let v = f(level, idx);
                assert_eq!(v.len(), width, "from_fn produced a value of the wrong width");
                p.node_mut(level, idx).copy_from_slice(&v);
            }
        }
        p
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fits(&self, tree: &ScenarioTree<T>) -> bool {
        self.bm_dim == tree.bm_dim
            && self.n_steps == tree.n_steps()
            && self.values.len() == tree.total_nodes() * self.width
    }

    #[inline]
    fn slot(&self, level: usize, index: usize) -> usize {
        // offset(level) = (b^level - 1) / (b - 1)
        let b = 1usize << self.bm_dim;
        ((b.pow(level as u32) - 1) / (b - 1) + index) * self.width
    }

    #[inline]
    pub fn node(&self, level: usize, index: usize) -> &[T] {
        let s = self.slot(level, index);
        &self.values[s..s + self.width]
    }

    #[inline]
    pub fn node_mut(&mut self, level: usize, index: usize) -> &mut [T] {
        let s = self.slot(level, index);
        let w = self.width;
        &mut self.values[s..s + w]
    }

    pub fn root(&self) -> &[T] {
        self.node(0, 0)
    }

    /// All values at `level`, concatenated.
    pub fn level(&self, level: usize) -> &[T] {
        let start = self.slot(level, 0);
        let len = (1usize << (self.bm_dim * level)) * self.width;
        &self.values[start..start + len]
    }

    pub fn leaves(&self) -> &[T] {
        self.level(self.n_steps)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn difference(&self, other: &Self) -> Result<Self> {
        if self.width != other.width || self.values.len() != other.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                got: other.values.len(),
            });
        }
        Ok(AdaptedProcess {
            values: linalg::sub(&self.values, &other.values),
            ..self.clone()
        })
    }

    /// Largest componentwise absolute difference over all nodes.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn map<F: FnMut(&[T]) -> Vec<T>>(&self, width: usize, mut f: F) -> Self {
        let values = self.values.chunks(self.width).flat_map(|c| {
            let v = f(c);
            debug_assert_eq!(v.len(), width);
            v
        });
        AdaptedProcess {
            width,
            bm_dim: self.bm_dim,
            n_steps: self.n_steps,
            values: values.collect(),
        }
    }
}

/// Exact `E[. | F_i]` at a node from the values at its children.
pub fn conditional_expectation<T: Scalar>(tree: &ScenarioTree<T>, children: &[&[T]]) -> Result<Vec<T>> {
    if children.len() != tree.branching() {
        return Err(Error::Arity {
            expected: tree.branching(),
            got: children.len(),
        });
    }
    Ok(mean_of(children))
}

pub(crate) fn mean_of<T: Scalar>(children: &[&[T]]) -> Vec<T> {
    let m = children[0].len();
    let w = T::one() / T::from_usize_lossy(children.len());
    let mut out = vec![T::zero(); m];
    for c in children {
        linalg::axpy(&mut out, T::one(), c);
    }
    for x in &mut out {
        *x *= w;
    }
    out
}

/// Martingale-representation coefficient `E[Y_{i+1} dW^T | F_i] / dt`, as a
/// row-major `m x d` matrix.
pub fn z_projection<T: Scalar>(children: &[&[T]], increments: &[&[T]], dt: T) -> Result<Vec<T>> {
    if children.is_empty() || children.len() != increments.len() {
        return Err(Error::Arity {
            expected: increments.len(),
            got: children.len(),
        });
    }
    if !children.len().is_power_of_two() {
        return Err(Error::invalid("child count must be a power of two"));
    }
    Ok(project_z(children, increments, dt))
}

pub(crate) fn project_z<T: Scalar>(children: &[&[T]], increments: &[&[T]], dt: T) -> Vec<T> {
    let m = children[0].len();
    let d = increments[0].len();
    let mut z = vec![T::zero(); m * d];
    for (c, inc) in children.iter().zip(increments) {
        for k in 0..m {
            for l in 0..d {
                z[k * d + l] += c[k] * inc[l];
            }
        }
    }
    let w = T::one() / (T::from_usize_lossy(children.len()) * dt);
    for x in &mut z {
        *x *= w;
    }
    z
}

/// Value of `process` seen from node (`level`, `index`) at `query_time <= t_level`.
///
/// On-grid and off-grid times in `[0, t_level]` read the ancestor at the last
/// grid time not after `query_time`. Negative times return `Y(0)` (root value)
/// for [`ProcessKind::Y`] and zero for [`ProcessKind::Z`].
pub fn history_value<T: Scalar>(
    process: &AdaptedProcess<T>,
    tree: &ScenarioTree<T>,
    level: usize,
    index: usize,
    query_time: T,
    kind: ProcessKind,
) -> Result<Vec<T>> {
    if !process.fits(tree) {
        return Err(Error::invalid("process does not belong to this tree"));
    }
    if level > tree.n_steps() || index >= tree.level_len(level) {
        return Err(Error::invalid(format!("node ({level}, {index}) is not in the tree")));
    }
    match tree.grid().locate(query_time, level)? {
        None => Ok(match kind {
            ProcessKind::Y => process.root().to_vec(),
            ProcessKind::Z => vec![T::zero(); process.width()],
        }),
        Some(k) => Ok(process.node(k, tree.ancestor(level, index, k)).to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_trees() {
        let t = build_tree(1, 1.0_f64, 1).unwrap();
        assert_eq!(t.n_leaves(), 2);
        assert_eq!(t.increment(0), &[1.0]);
        assert_eq!(t.increment(1), &[-1.0]);

        let t = build_tree(2, 1.0_f64, 1).unwrap();
        let w = t.brownian();
        let h = 0.5_f64.sqrt();
        let expect = [2.0 * h, 0.0, 0.0, -2.0 * h];
        for (a, b) in w.leaves().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }

        let t = build_tree(3, 0.75_f64, 1).unwrap();
        assert_eq!(t.n_leaves(), 8);
        assert_eq!(t.dt(), 0.25);
        assert_eq!(t.increment(0), &[0.5]);
    }

    #[test]
    fn grid_end_is_horizon() {
        let g = TimeGrid::new(7, 0.3_f64).unwrap();
        assert_eq!(g.time(7), 0.3);
        assert!((g.dt() * 7.0 - 0.3).abs() <= 4.0 * f64::EPSILON);
        assert!(TimeGrid::new(0, 1.0_f64).is_err());
        assert!(TimeGrid::new(3, -1.0_f64).is_err());
    }

    #[test]
    fn node_cap_is_enforced() {
        let err = ScenarioTree::new(30, 1.0_f64, 1, DEFAULT_MAX_NODES).unwrap_err();
        assert!(matches!(err, Error::TreeTooLarge { .. }));
        assert!(err.to_string().contains("nodes"));
        assert!(ScenarioTree::new(4, 1.0_f64, 2, 341).is_ok());
        assert!(ScenarioTree::new(4, 1.0_f64, 2, 340).is_err());
        // 2^(64*2) children per node saturates instead of overflowing.
        assert!(ScenarioTree::new(2, 1.0_f64, 64, DEFAULT_MAX_NODES).is_err());
    }

    #[test]
    fn two_dim_tree_layout() {
        let t = build_tree(2, 1.0_f64, 2).unwrap();
        assert_eq!(t.branching(), 4);
        assert_eq!(t.total_nodes(), 1 + 4 + 16);
        let pats: Vec<Vec<f64>> = t.increments().to_vec();
        let h = 0.5_f64.sqrt();
        assert_eq!(pats, vec![vec![h, h], vec![-h, h], vec![h, -h], vec![-h, -h]]);
        assert_eq!(t.ancestor(2, 13, 1), 3);
        assert_eq!(t.ancestor(2, 13, 0), 0);
    }

    #[test]
    fn expectation_examples() {
        let t1 = build_tree(1, 1.0_f64, 1).unwrap();
        assert_eq!(conditional_expectation(&t1, &[&[1.0], &[3.0]]).unwrap(), vec![2.0]);
        assert_eq!(conditional_expectation(&t1, &[&[0.7], &[0.7]]).unwrap(), vec![0.7]);
        assert!(matches!(
            conditional_expectation(&t1, &[&[1.0]]),
            Err(Error::Arity { expected: 2, got: 1 })
        ));
        let t2 = build_tree(1, 1.0_f64, 2).unwrap();
        let e = conditional_expectation(&t2, &[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]]).unwrap();
        assert_eq!(e, vec![0.5, 0.5]);
    }

    #[test]
    fn z_projection_examples() {
        let dt = 0.25_f64;
        let s = dt.sqrt();
        let inc: [&[f64]; 2] = [&[s], &[-s]];
        assert_eq!(z_projection(&[&[s], &[-s]], &inc, dt).unwrap(), vec![1.0]);
        assert_eq!(z_projection(&[&[3.0], &[3.0]], &inc, dt).unwrap(), vec![0.0]);
        assert_eq!(z_projection(&[&[2.0 * s], &[0.0]], &inc, dt).unwrap(), vec![1.0]);
        assert!(z_projection(&[&[1.0]], &inc, dt).is_err());
    }

    #[test]
    fn history_extension_and_identity() {
        let t = build_tree(4, 1.0_f64, 1).unwrap();
        let w = t.brownian();
        let y = AdaptedProcess::from_fn(&t, 1, |l, j| vec![10.0 * l as f64 + j as f64 + 1.0]);
        // Y-kind before zero reads the root; Z-kind reads zero.
        assert_eq!(history_value(&y, &t, 3, 5, -0.3, ProcessKind::Y).unwrap(), y.root());
        assert_eq!(history_value(&y, &t, 3, 5, -0.3, ProcessKind::Z).unwrap(), vec![0.0]);
        // Query at the node's own time is the node's own value.
        assert_eq!(history_value(&w, &t, 3, 5, 0.75, ProcessKind::Y).unwrap(), w.node(3, 5));
        // Off-grid queries are left-constant.
        assert_eq!(history_value(&y, &t, 3, 5, 0.6, ProcessKind::Y).unwrap(), y.node(2, 2));
        // Times a hair below a grid point snap onto it.
        assert_eq!(
            history_value(&y, &t, 3, 5, 0.5 - 1e-17, ProcessKind::Y).unwrap(),
            y.node(2, 2)
        );
        assert!(matches!(
            history_value(&y, &t, 3, 5, 0.8, ProcessKind::Y),
            Err(Error::FutureQuery { .. })
        ));
    }

    #[test]
    fn runs_in_single_precision() {
        let t = build_tree(3, 0.75_f32, 1).unwrap();
        let w = t.brownian();
        assert_eq!(w.leaves()[0], 1.5_f32);
        let e = conditional_expectation(&t, &[&[1.0_f32], &[3.0]]).unwrap();
        assert_eq!(e, vec![2.0_f32]);
    }
}
