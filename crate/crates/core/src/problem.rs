//! Problem data for the controlled stochastic heat equation
//!
//! ```text
//! dy - y_xx dt = [a1 y + B1 y_x + 1_O u1 + 1_O1 v1 + 1_O2 v2] dt + [a2 y + B2 y_x + u2] dW
//! ```
//!
//! on `(0, T) x (0, L)` with homogeneous Dirichlet conditions.

use crate::error::{invalid, Result};
use crate::grid::{Mask, SpatialGrid, Subdomain};
use crate::prob_tree::{AdaptedField, TreeTopology};

/// Follower index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Player {
    One,
    Two,
}

impl Player {
    pub const BOTH: [Player; 2] = [Player::One, Player::Two];

    pub fn index(self) -> usize {
        match self {
            Player::One => 0,
            Player::Two => 1,
        }
    }
}

impl std::fmt::Display for Player {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.index() + 1)
    }
}

/// Bounded coefficient fields, evaluated at the left endpoint of each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub a1: AdaptedField,
    pub a2: AdaptedField,
    pub b1: AdaptedField,
    pub b2: AdaptedField,
}

impl Coefficients {
    pub fn constant(tree: TreeTopology, n_x: usize, a1: f64, a2: f64, b1: f64, b2: f64) -> Self {
        Self {
            a1: AdaptedField::constant(tree, n_x, a1),
            a2: AdaptedField::constant(tree, n_x, a2),
            b1: AdaptedField::constant(tree, n_x, b1),
            b2: AdaptedField::constant(tree, n_x, b2),
        }
    }

    pub fn zero(tree: TreeTopology, n_x: usize) -> Self {
        Self::constant(tree, n_x, 0.0, 0.0, 0.0, 0.0)
    }

    fn fields(&self) -> [(&'static str, &AdaptedField); 4] {
        [
            ("a1", &self.a1),
            ("a2", &self.a2),
            ("b1", &self.b1),
            ("b2", &self.b2),
        ]
    }
}

/// Everything needed to build a [`ProblemSpec`].
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub grid: SpatialGrid,
    pub tree: TreeTopology,
    pub coefficients: Coefficients,
    /// Leader control region `O`.
    pub control: Subdomain,
    /// Follower control regions `O1`, `O2`.
    pub followers: [Subdomain; 2],
    /// Common observation region `O_d` of both follower functionals.
    pub observation: Subdomain,
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    pub targets: [AdaptedField; 2],
    pub y0: Vec<f64>,
}

/// Validated problem instance with cached subdomain masks.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    grid: SpatialGrid,
    tree: TreeTopology,
    coefficients: Coefficients,
    control: Subdomain,
    followers: [Subdomain; 2],
    observation: Subdomain,
    alpha: [f64; 2],
    beta: [f64; 2],
    targets: [AdaptedField; 2],
    y0: Vec<f64>,
    control_mask: Mask,
    follower_masks: [Mask; 2],
    observation_mask: Mask,
}

impl ProblemSpec {
    pub fn new(data: ProblemData) -> Result<Self> {
        let ProblemData {
            grid,
            tree,
            coefficients,
            control,
            followers,
            observation,
            alpha,
            beta,
            mut targets,
            y0,
        } = data;
        let n_x = grid.n_x();
        for s in [&control, &followers[0], &followers[1], &observation] {
            s.within(&grid)?;
        }
        // single observation set shared by both players, meeting the leader region
        if !observation.intersects(&control) {
            return invalid(format!(
                "observation region ({}, {}) must intersect the control region ({}, {})",
                observation.lo, observation.hi, control.lo, control.hi
            ));
        }
        for i in 0..2 {
            if !(alpha[i] > 0.0 && alpha[i].is_finite()) {
                return invalid(format!("alpha{} must be positive, got {}", i + 1, alpha[i]));
            }
            if !(beta[i] > 0.0 && beta[i].is_finite()) {
                return invalid(format!("beta{} must be positive, got {}", i + 1, beta[i]));
            }
        }
        for (name, f) in coefficients.fields() {
            if f.tree() != &tree || f.n_x() != n_x {
                return invalid(format!("coefficient {name} does not match the grid/tree"));
            }
            if !f.is_finite() {
                return invalid(format!("coefficient {name} is not bounded"));
            }
        }
        if y0.len() != n_x {
            return invalid(format!("y0 has {} points, grid has {n_x}", y0.len()));
        }
        if y0.iter().any(|v| !v.is_finite()) {
            return invalid("y0 has non-finite entries");
        }
        let observation_mask = observation.mask(&grid);
        for (i, t) in targets.iter_mut().enumerate() {
            if t.tree() != &tree || t.n_x() != n_x {
                return invalid(format!("target y{},d does not match the grid/tree", i + 1));
            }
            if !t.is_finite() {
                return invalid(format!("target y{},d has non-finite entries", i + 1));
            }
            t.restrict(&observation_mask);
            t.clear_leaves();
        }
        Ok(Self {
            control_mask: control.mask(&grid),
            follower_masks: [followers[0].mask(&grid), followers[1].mask(&grid)],
            observation_mask,
            grid,
            tree,
            coefficients,
            control,
            followers,
            observation,
            alpha,
            beta,
            targets,
            y0,
        })
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn tree(&self) -> &TreeTopology {
        &self.tree
    }

    pub fn n_x(&self) -> usize {
        self.grid.n_x()
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coefficients
    }

    pub fn control(&self) -> &Subdomain {
        &self.control
    }

    pub fn follower_region(&self, i: Player) -> &Subdomain {
        &self.followers[i.index()]
    }

    pub fn observation(&self) -> &Subdomain {
        &self.observation
    }

    pub fn control_mask(&self) -> &Mask {
        &self.control_mask
    }

    pub fn follower_mask(&self, i: Player) -> &Mask {
        &self.follower_masks[i.index()]
    }

    pub fn observation_mask(&self) -> &Mask {
        &self.observation_mask
    }

    pub fn alpha(&self, i: Player) -> f64 {
        self.alpha[i.index()]
    }

    pub fn beta(&self, i: Player) -> f64 {
        self.beta[i.index()]
    }

    pub fn target(&self, i: Player) -> &AdaptedField {
        &self.targets[i.index()]
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    pub fn zero_field(&self) -> AdaptedField {
        AdaptedField::zeros(self.tree, self.n_x())
    }

    /// Same problem with different initial state.
    pub fn with_y0(&self, y0: Vec<f64>) -> Result<Self> {
        if y0.len() != self.n_x() {
            return invalid(format!(
                "y0 has {} points, grid has {}",
                y0.len(),
                self.n_x()
            ));
        }
        Ok(Self { y0, ..self.clone() })
    }

    /// Same problem with different targets (masked to `O_d`).
    pub fn with_targets(&self, targets: [AdaptedField; 2]) -> Result<Self> {
        let mut data = self.to_data();
        data.targets = targets;
        Self::new(data)
    }

    /// Same problem with different follower weights.
    pub fn with_weights(&self, alpha: [f64; 2], beta: [f64; 2]) -> Result<Self> {
        let mut data = self.to_data();
        data.alpha = alpha;
        data.beta = beta;
        Self::new(data)
    }

    /// Initial state and targets set to zero; the leader-to-state map of
    /// this problem is the linear part of the original one.
    pub fn homogeneous(&self) -> Self {
        let zero = self.zero_field();
        Self {
            y0: vec![0.0; self.n_x()],
            targets: [zero.clone(), zero],
            ..self.clone()
        }
    }

    pub fn to_data(&self) -> ProblemData {
        ProblemData {
            grid: self.grid,
            tree: self.tree,
            coefficients: self.coefficients.clone(),
            control: self.control,
            followers: self.followers,
            observation: self.observation,
            alpha: self.alpha,
            beta: self.beta,
            targets: self.targets.clone(),
            y0: self.y0.clone(),
        }
    }
}
