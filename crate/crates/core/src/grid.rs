//! Uniform 1-D Dirichlet grid on `G = (0, L)`.
//!
//! Only interior points `x_j = j h`, `j = 1..=n_x`, are stored; boundary
//! values are identically zero and enter the stencils as closure terms.

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    n_x: usize,
    length: f64,
    h: f64,
}

impl SpatialGrid {
    pub fn new(n_x: usize, length: f64) -> Result<Self> {
        if n_x == 0 {
            return invalid("grid needs at least one interior point");
        }
        if !(length > 0.0 && length.is_finite()) {
            return invalid(format!("domain length must be positive, got {length}"));
        }
        Ok(Self {
            n_x,
            length,
            h: length / (n_x + 1) as f64,
        })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Interior point coordinates.
    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (1..=self.n_x).map(move |j| j as f64 * self.h)
    }

    /// Points of the closed domain, boundary included.
    pub fn closure_points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_x + 1).map(move |j| j as f64 * self.h)
    }

    fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() == self.n_x {
            Ok(())
        } else {
            invalid(format!(
                "array has {} points, grid has {}",
                u.len(),
                self.n_x
            ))
        }
    }

    /// Second difference `(u_{j-1} - 2u_j + u_{j+1}) / h^2`.
    pub fn apply_laplacian(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u)?;
        let mut out = vec![0.0; self.n_x];
        self.laplacian_into(u, &mut out);
        Ok(out)
    }

    pub(crate) fn laplacian_into(&self, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        let inv = 1.0 / (self.h * self.h);
        for j in 0..n {
            let left = if j > 0 { u[j - 1] } else { 0.0 };
            let right = if j + 1 < n { u[j + 1] } else { 0.0 };
            out[j] = (left - 2.0 * u[j] + right) * inv;
        }
    }

    /// Centered difference `(u_{j+1} - u_{j-1}) / (2h)`.
    pub fn apply_gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u)?;
        let mut out = vec![0.0; self.n_x];
        self.gradient_into(u, &mut out);
        Ok(out)
    }

    /// The centered-difference matrix is antisymmetric, so this also
    /// computes `-(gradient)^T u`.
    pub(crate) fn gradient_into(&self, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        let inv = 0.5 / self.h;
        for j in 0..n {
            let left = if j > 0 { u[j - 1] } else { 0.0 };
            let right = if j + 1 < n { u[j + 1] } else { 0.0 };
            out[j] = (right - left) * inv;
        }
    }

    /// Solves `(I - coeff * Laplacian) u = rhs`.
    pub fn implicit_step_solve(&self, rhs: &[f64], coeff: f64) -> Result<Vec<f64>> {
        self.check_len(rhs)?;
        if !(coeff >= 0.0) {
            return invalid(format!(
                "implicit coefficient must be non-negative, got {coeff}"
            ));
        }
        let solver = ImplicitSolver::new(self, coeff);
        let mut out = rhs.to_vec();
        solver.solve_in_place(&mut out);
        Ok(out)
    }

    /// `h * sum u v`.
    pub fn dot(&self, u: &[f64], v: &[f64]) -> f64 {
        self.h * u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn norm_sq(&self, u: &[f64]) -> f64 {
        self.dot(u, u)
    }
}

/// Thomas-algorithm factorization of `I - coeff * Laplacian`. The matrix is
/// symmetric, so the same factorization serves the transposed solve.
#[derive(Debug, Clone)]
pub struct ImplicitSolver {
    off: f64,
    // modified superdiagonal and inverse pivots of the forward sweep
    c_prime: Vec<f64>,
    inv_pivot: Vec<f64>,
}

impl ImplicitSolver {
    pub fn new(grid: &SpatialGrid, coeff: f64) -> Self {
        let n = grid.n_x();
        let r = coeff / (grid.h() * grid.h());
        let diag = 1.0 + 2.0 * r;
        let off = -r;
        let mut c_prime = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        let mut prev_c = 0.0;
        for j in 0..n {
            let pivot = diag - off * prev_c;
            inv_pivot[j] = 1.0 / pivot;
            c_prime[j] = off * inv_pivot[j];
            prev_c = c_prime[j];
        }
        Self {
            off,
            c_prime,
            inv_pivot,
        }
    }

    pub fn solve_in_place(&self, d: &mut [f64]) {
        let n = d.len();
        if n == 0 {
            return;
        }
        d[0] *= self.inv_pivot[0];
        for j in 1..n {
            d[j] = (d[j] - self.off * d[j - 1]) * self.inv_pivot[j];
        }
        for j in (0..n - 1).rev() {
            d[j] -= self.c_prime[j] * d[j + 1];
        }
    }
}

/// Open interval `(a, b)` inside `G`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subdomain {
    pub lo: f64,
    pub hi: f64,
}

impl Subdomain {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi && lo >= 0.0) {
            return invalid(format!(
                "subdomain ({lo}, {hi}) is not a non-empty interval in [0, inf)"
            ));
        }
        Ok(Self { lo, hi })
    }

    pub fn within(&self, grid: &SpatialGrid) -> Result<()> {
        if self.hi > grid.length() {
            return invalid(format!(
                "subdomain ({}, {}) leaves the domain (0, {})",
                self.lo,
                self.hi,
                grid.length()
            ));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo < x && x < self.hi
    }

    pub fn intersects(&self, other: &Subdomain) -> bool {
        self.lo.max(other.lo) < self.hi.min(other.hi)
    }

    pub fn measure(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mask(&self, grid: &SpatialGrid) -> Mask {
        Mask(grid.points().map(|x| self.contains(x)).collect())
    }
}

/// Indicator of a subdomain over the interior grid points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn full(n_x: usize) -> Self {
        Self(vec![true; n_x])
    }

    pub fn empty(n_x: usize) -> Self {
        Self(vec![false; n_x])
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn intersection(&self, other: &Mask) -> Mask {
        Mask(self.0.iter().zip(&other.0).map(|(a, b)| *a && *b).collect())
    }

    /// Multiplies `u` by the indicator in place.
    pub fn apply(&self, u: &mut [f64]) {
        for (v, keep) in u.iter_mut().zip(&self.0) {
            if !keep {
                *v = 0.0;
            }
        }
    }

    pub fn masked_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.0)
            .filter(|(_, keep)| **keep)
            .map(|((x, y), _)| x * y)
            .sum()
    }
}

/// `1_S u`.
pub fn restrict(u: &[f64], mask: &Mask) -> Result<Vec<f64>> {
    if u.len() != mask.len() {
        return invalid(format!(
            "array has {} points, mask has {}",
            u.len(),
            mask.len()
        ));
    }
    let mut out = u.to_vec();
    mask.apply(&mut out);
    Ok(out)
}
