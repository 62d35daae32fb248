//! Finite filtered probability space.
//!
//! The Brownian motion is replaced by a non-recombining binary tree whose
//! edges carry the increments `+sqrt(dt)` and `-sqrt(dt)` with probability
//! one half each. Nodes are numbered in level order: the root is node 0, the
//! children of node `k` are `2k + 1` ("+") and `2k + 2` ("-"), and the nodes
//! of level `n` occupy the contiguous index range `2^n - 1 .. 2^(n+1) - 1`.
//! An adapted process is one spatial array per node, so adaptedness holds by
//! construction.

use std::ops::Range;

use crate::error::{invalid, Result};
use crate::grid::{Mask, SpatialGrid};

/// Largest supported number of time steps (2^21 leaves).
pub const MAX_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeTopology {
    n_steps: usize,
    horizon: f64,
    dt: f64,
}

impl TreeTopology {
    pub fn new(n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps == 0 {
            return invalid("tree needs at least one time step");
        }
        if n_steps > MAX_STEPS {
            return invalid(format!(
                "n_steps = {n_steps} exceeds the supported maximum {MAX_STEPS}"
            ));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return invalid(format!(
                "horizon must be positive and finite, got {horizon}"
            ));
        }
        Ok(Self {
            n_steps,
            horizon,
            dt: horizon / n_steps as f64,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.dt.sqrt()
    }

    pub fn node_count(&self) -> usize {
        (1usize << (self.n_steps + 1)) - 1
    }

    pub fn leaf_count(&self) -> usize {
        1usize << self.n_steps
    }

    pub fn level_size(&self, level: usize) -> usize {
        1usize << level
    }

    /// Node indices of the given level.
    pub fn level_range(&self, level: usize) -> Range<usize> {
        ((1usize << level) - 1)..((1usize << (level + 1)) - 1)
    }

    pub fn depth(&self, node: usize) -> usize {
        (usize::BITS - 1 - (node + 1).leading_zeros()) as usize
    }

    pub fn prob(&self, node: usize) -> f64 {
        self.level_prob(self.depth(node))
    }

    pub fn level_prob(&self, level: usize) -> f64 {
        0.5f64.powi(level as i32)
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        (node > 0).then(|| (node - 1) / 2)
    }

    /// `("+" child, "-" child)`, or `None` for a leaf.
    pub fn children(&self, node: usize) -> Option<(usize, usize)> {
        (self.depth(node) < self.n_steps).then(|| (2 * node + 1, 2 * node + 2))
    }

    /// Brownian increment on the edge entering `node`.
    pub fn increment(&self, node: usize) -> Option<f64> {
        self.parent(node).map(|_| {
            if node % 2 == 1 {
                self.sqrt_dt()
            } else {
                -self.sqrt_dt()
            }
        })
    }

    /// Left endpoint of time step `level`.
    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    /// Sample path of W up to `node` (W at the node's time).
    pub fn brownian_value(&self, mut node: usize) -> f64 {
        let mut w = 0.0;
        while let Some(inc) = self.increment(node) {
            w += inc;
            node = (node - 1) / 2;
        }
        w
    }
}

/// A space-time-random field: one spatial array (over interior grid points)
/// per tree node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    tree: TreeTopology,
    n_x: usize,
    data: Vec<f64>,
}

impl AdaptedField {
    pub fn zeros(tree: TreeTopology, n_x: usize) -> Self {
        Self {
            tree,
            n_x,
            data: vec![0.0; tree.node_count() * n_x],
        }
    }

    pub fn from_data(tree: TreeTopology, n_x: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != tree.node_count() * n_x {
            return invalid(format!(
                "field data has length {}, expected {} nodes x {n_x} points",
                data.len(),
                tree.node_count()
            ));
        }
        Ok(Self { tree, n_x, data })
    }

    /// Builds a field from `f(node, t, x)`, evaluated at every node and
    /// interior grid point.
    pub fn from_fn(
        tree: TreeTopology,
        grid: &SpatialGrid,
        mut f: impl FnMut(usize, f64, f64) -> f64,
    ) -> Self {
        let n_x = grid.n_x();
        let mut data = Vec::with_capacity(tree.node_count() * n_x);
        for node in 0..tree.node_count() {
            let t = tree.time(tree.depth(node));
            data.extend(grid.points().map(|x| f(node, t, x)));
        }
        Self { tree, n_x, data }
    }

    /// Deterministic field `f(t, x)`, identical on all nodes of a level.
    pub fn deterministic(
        tree: TreeTopology,
        grid: &SpatialGrid,
        f: impl Fn(f64, f64) -> f64,
    ) -> Self {
        Self::from_fn(tree, grid, |_, t, x| f(t, x))
    }

    pub fn constant(tree: TreeTopology, n_x: usize, value: f64) -> Self {
        Self {
            tree,
            n_x,
            data: vec![value; tree.node_count() * n_x],
        }
    }

    pub fn tree(&self) -> &TreeTopology {
        &self.tree
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn node(&self, node: usize) -> &[f64] {
        &self.data[node * self.n_x..(node + 1) * self.n_x]
    }

    pub fn node_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.data[node * self.n_x..(node + 1) * self.n_x]
    }

    /// All node arrays of one level, concatenated.
    pub fn level(&self, level: usize) -> &[f64] {
        let r = self.tree.level_range(level);
        &self.data[r.start * self.n_x..r.end * self.n_x]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut [f64] {
        let r = self.tree.level_range(level);
        &mut self.data[r.start * self.n_x..r.end * self.n_x]
    }

    pub fn root(&self) -> &[f64] {
        self.node(0)
    }

    pub fn leaves(&self) -> LeafField {
        LeafField {
            tree: self.tree,
            n_x: self.n_x,
            data: self.level(self.tree.n_steps()).to_vec(),
        }
    }

    pub fn same_shape(&self, other: &AdaptedField) -> bool {
        self.tree == other.tree && self.n_x == other.n_x
    }

    pub fn check_shape(&self, other: &AdaptedField, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            invalid(format!(
                "{what}: shape mismatch ({} steps x {} points vs {} steps x {} points)",
                self.tree.n_steps(),
                self.n_x,
                other.tree.n_steps(),
                other.n_x
            ))
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &AdaptedField) {
        debug_assert!(self.same_shape(other));
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += s * b);
    }

    /// Zeroes every point outside `mask`.
    pub fn restrict(&mut self, mask: &Mask) {
        for chunk in self.data.chunks_mut(self.n_x) {
            mask.apply(chunk);
        }
    }

    pub fn restricted(&self, mask: &Mask) -> Self {
        let mut out = self.clone();
        out.restrict(mask);
        out
    }

    /// Zeroes all leaf arrays. Sources and controls live on levels
    /// `0..n_steps`, so leaf values never enter a computation.
    pub fn clear_leaves(&mut self) {
        let n = self.tree.n_steps();
        self.level_mut(n).fill(0.0);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Terminal data: one spatial array per leaf (an `F_T`-measurable random
/// field).
#[derive(Debug, Clone, PartialEq)]
pub struct LeafField {
    tree: TreeTopology,
    n_x: usize,
    data: Vec<f64>,
}

impl LeafField {
    pub fn zeros(tree: TreeTopology, n_x: usize) -> Self {
        Self {
            tree,
            n_x,
            data: vec![0.0; tree.leaf_count() * n_x],
        }
    }

    pub fn from_data(tree: TreeTopology, n_x: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != tree.leaf_count() * n_x {
            return invalid(format!(
                "terminal data has length {}, expected {} leaves x {n_x} points",
                data.len(),
                tree.leaf_count()
            ));
        }
        Ok(Self { tree, n_x, data })
    }

    pub fn tree(&self) -> &TreeTopology {
        &self.tree
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn leaf(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_x..(j + 1) * self.n_x]
    }

    pub fn same_shape(&self, other: &LeafField) -> bool {
        self.tree == other.tree && self.n_x == other.n_x
    }

    /// `E<a, b>_{L^2(G)}` over the leaves.
    pub fn inner(&self, other: &LeafField, grid: &SpatialGrid) -> f64 {
        debug_assert!(self.same_shape(other));
        let p = self.tree.level_prob(self.tree.n_steps());
        p * grid.h() * dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self, grid: &SpatialGrid) -> f64 {
        self.inner(self, grid)
    }

    pub fn axpy(&mut self, s: f64, other: &LeafField) {
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += s * b);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `E[f(t_level)]`: probability-weighted sum of the node arrays at `level`.
pub fn expectation_at(field: &AdaptedField, level: usize) -> Result<Vec<f64>> {
    let tree = field.tree();
    if level > tree.n_steps() {
        return invalid(format!(
            "level {level} is beyond the horizon ({} steps)",
            tree.n_steps()
        ));
    }
    let p = tree.level_prob(level);
    let mut out = vec![0.0; field.n_x()];
    for chunk in field.level(level).chunks(field.n_x()) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += p * v);
    }
    Ok(out)
}

/// One-step conditional expectation: the two-point average of the children
/// of `node`.
pub fn conditional_expectation(field: &AdaptedField, node: usize) -> Result<Vec<f64>> {
    let Some((plus, minus)) = field.tree().children(node) else {
        return invalid(format!("node {node} is a leaf"));
    };
    Ok(field
        .node(plus)
        .iter()
        .zip(field.node(minus))
        .map(|(a, b)| 0.5 * (a + b))
        .collect())
}

/// `Z = (z_+ - z_-) / (2 sqrt(dt))`, the martingale-difference component.
pub fn martingale_difference(child_plus: &[f64], child_minus: &[f64], dt: f64) -> Result<Vec<f64>> {
    if child_plus.len() != child_minus.len() {
        return invalid(format!(
            "children have different lengths ({} vs {})",
            child_plus.len(),
            child_minus.len()
        ));
    }
    if !(dt > 0.0) {
        return invalid(format!("dt must be positive, got {dt}"));
    }
    let s = 0.5 / dt.sqrt();
    Ok(child_plus
        .iter()
        .zip(child_minus)
        .map(|(a, b)| s * (a - b))
        .collect())
}

/// Space-time-probability inner product on `(0,T) x G x Omega`, with
/// left-endpoint quadrature over levels `0..n_steps`:
/// `sum_n dt sum_{nodes at n} p(node) sum_j h f g`, restricted to `mask`.
pub fn inner_product(
    f: &AdaptedField,
    g: &AdaptedField,
    grid: &SpatialGrid,
    mask: Option<&Mask>,
) -> Result<f64> {
    f.check_shape(g, "inner product")?;
    if f.n_x() != grid.n_x() {
        return invalid(format!(
            "field has {} points, grid has {}",
            f.n_x(),
            grid.n_x()
        ));
    }
    let tree = f.tree();
    let n_x = f.n_x();
    let mut total = 0.0;
    for level in 0..tree.n_steps() {
        let (fl, gl) = (f.level(level), g.level(level));
        let level_sum = match mask {
            None => dot(fl, gl),
            Some(m) => fl
                .chunks(n_x)
                .zip(gl.chunks(n_x))
                .map(|(a, b)| m.masked_dot(a, b))
                .sum(),
        };
        total += tree.level_prob(level) * level_sum;
    }
    Ok(tree.dt() * grid.h() * total)
}

/// `|f|^2` in `L^2_F(0,T; L^2)` (restricted to `mask`).
pub fn norm_sq(f: &AdaptedField, grid: &SpatialGrid, mask: Option<&Mask>) -> f64 {
    inner_product(f, f, grid, mask).expect("field paired with itself")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> SpatialGrid {
        SpatialGrid::new(n, 1.0).unwrap()
    }

    #[test]
    fn build_tree_counts() {
        let t = TreeTopology::new(2, 1.0).unwrap();
        assert_eq!(t.node_count(), 7);
        assert_eq!(t.leaf_count(), 4);
        assert_eq!(t.prob(6), 0.25);
        let t = TreeTopology::new(1, 2.0).unwrap();
        assert_eq!(t.dt(), 2.0);
        assert_eq!(t.node_count(), 3);
        assert_eq!(TreeTopology::new(10, 1.0).unwrap().node_count(), 2047);
    }

    #[test]
    fn build_tree_rejects_bad_input() {
        assert!(TreeTopology::new(0, 1.0).is_err());
        assert!(TreeTopology::new(3, 0.0).is_err());
        assert!(TreeTopology::new(3, -1.0).is_err());
    }

    #[test]
    fn topology_accessors() {
        let t = TreeTopology::new(3, 1.0).unwrap();
        for node in 0..t.node_count() {
            match t.children(node) {
                Some((p, m)) => {
                    assert_eq!(t.parent(p), Some(node));
                    assert_eq!(t.parent(m), Some(node));
                    assert_eq!(t.depth(p), t.depth(node) + 1);
                    assert!(t.increment(p).unwrap() > 0.0);
                    assert!(t.increment(m).unwrap() < 0.0);
                }
                None => assert_eq!(t.depth(node), 3),
            }
        }
        for level in 0..=3 {
            let s: f64 = t.level_range(level).map(|k| t.prob(k)).sum();
            assert_eq!(s, 1.0);
        }
        assert_eq!(t.parent(0), None);
        // leftmost leaf is the all-"+" path
        assert!((t.brownian_value(7) - 3.0 * t.sqrt_dt()).abs() < 1e-15);
    }

    #[test]
    fn expectation_examples() {
        let t = TreeTopology::new(3, 1.0).unwrap();
        let f = AdaptedField::constant(t, 4, 3.0);
        assert_eq!(expectation_at(&f, 2).unwrap(), vec![3.0; 4]);

        let g = grid(2);
        let t1 = TreeTopology::new(1, 1.0).unwrap();
        let f = AdaptedField::from_fn(t1, &g, |node, _, _| match node {
            1 => 1.0,
            2 => -1.0,
            _ => 0.0,
        });
        assert_eq!(expectation_at(&f, 1).unwrap(), vec![0.0; 2]);
        assert!(expectation_at(&f, 2).is_err());
    }

    #[test]
    fn expectation_matches_path_enumeration() {
        let t = TreeTopology::new(4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = (0..t.node_count() * 3)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let f = AdaptedField::from_data(t, 3, data).unwrap();
        for level in 0..=4 {
            // oracle: walk every leaf path, take its ancestor at `level`
            let mut oracle = vec![0.0; 3];
            for leaf in t.level_range(4) {
                let mut node = leaf;
                while t.depth(node) > level {
                    node = t.parent(node).unwrap();
                }
                for (o, v) in oracle.iter_mut().zip(f.node(node)) {
                    *o += v / t.leaf_count() as f64;
                }
            }
            let e = expectation_at(&f, level).unwrap();
            for (a, b) in e.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn tower_property() {
        let t = TreeTopology::new(5, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = (0..t.node_count() * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let f = AdaptedField::from_data(t, 2, data).unwrap();
        for level in 0..5 {
            let mut avg = AdaptedField::zeros(t, 2);
            for node in t.level_range(level) {
                let c = conditional_expectation(&f, node).unwrap();
                avg.node_mut(node).copy_from_slice(&c);
            }
            let lhs = expectation_at(&f, level + 1).unwrap();
            let rhs = expectation_at(&avg, level).unwrap();
            for (a, b) in lhs.iter().zip(&rhs) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn martingale_difference_examples() {
        assert_eq!(
            martingale_difference(&[5.0], &[1.0], 0.25).unwrap(),
            vec![4.0]
        );
        assert_eq!(
            martingale_difference(&[2.0, 3.0], &[2.0, 3.0], 0.1).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            martingale_difference(&[0.0], &[2.0], 1.0).unwrap(),
            vec![-1.0]
        );
        assert!(martingale_difference(&[0.0], &[2.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn inner_product_examples() {
        let g = grid(9);
        let t = TreeTopology::new(4, 1.0).unwrap();
        let one = AdaptedField::constant(t, 9, 1.0);
        // h * n_x = 9/10 of the domain length with Dirichlet nodes excluded
        let ip = inner_product(&one, &one, &g, None).unwrap();
        assert!((ip - 0.9).abs() < 1e-14);
        let zero = AdaptedField::zeros(t, 9);
        assert_eq!(inner_product(&zero, &one, &g, None).unwrap(), 0.0);
        let other = AdaptedField::zeros(TreeTopology::new(3, 1.0).unwrap(), 9);
        assert!(inner_product(&one, &other, &g, None).is_err());
    }

    #[test]
    fn inner_product_matches_flattened_oracle() {
        let g = grid(3);
        let t = TreeTopology::new(3, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_field = || {
            let d = (0..t.node_count() * 3)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            AdaptedField::from_data(t, 3, d).unwrap()
        };
        let (f, h) = (rand_field(), rand_field());
        // flatten with per-entry quadrature weights
        let mut oracle = 0.0;
        for node in 0..t.node_count() {
            if t.depth(node) == t.n_steps() {
                continue;
            }
            let w = t.dt() * t.prob(node) * g.h();
            for j in 0..3 {
                oracle += w * f.node(node)[j] * h.node(node)[j];
            }
        }
        let ip = inner_product(&f, &h, &g, None).unwrap();
        assert!((ip - oracle).abs() < 1e-14);
        let sym = inner_product(&h, &f, &g, None).unwrap();
        assert_eq!(ip, sym);
    }
}
