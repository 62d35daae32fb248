//! Forward stochastic parabolic equations on the scenario tree.
//!
//! One step from a node at level `n` with state `y`:
//!
//! ```text
//! (I - dt Lap) y* = y + dt (a1 y + B1 Dy + f)      implicit diffusion
//! y(+/-)          = y* +/- sqrt(dt) (a2 y + B2 Dy + g)
//! ```
//!
//! with `f` the drift source and `g` the diffusion source, all evaluated at
//! the left endpoint of the step.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::grid::ImplicitSolver;
use crate::prob_tree::AdaptedField;
use crate::problem::{Player, ProblemSpec};

/// Levels with at least this many nodes are stepped in parallel.
pub(crate) const PAR_LEVEL_MIN: usize = 64;

/// Inputs of the generic forward equation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardInputs {
    pub y0: Vec<f64>,
    pub drift: AdaptedField,
    pub diffusion: AdaptedField,
}

impl ForwardInputs {
    pub fn zeros(spec: &ProblemSpec) -> Self {
        Self {
            y0: vec![0.0; spec.n_x()],
            drift: spec.zero_field(),
            diffusion: spec.zero_field(),
        }
    }
}

fn check_source(spec: &ProblemSpec, f: &AdaptedField, what: &str) -> Result<()> {
    if f.tree() != spec.tree() || f.n_x() != spec.n_x() {
        return invalid(format!("{what} does not match the problem grid/tree"));
    }
    Ok(())
}

/// Solves the forward equation with initial state `y0`, drift source
/// `drift`, diffusion source `diffusion` and, optionally, follower controls
/// entering the drift as `1_O1 v1 + 1_O2 v2`.
pub fn solve_forward(
    spec: &ProblemSpec,
    y0: &[f64],
    drift: &AdaptedField,
    diffusion: &AdaptedField,
    followers: Option<(&AdaptedField, &AdaptedField)>,
) -> Result<AdaptedField> {
    if y0.len() != spec.n_x() {
        return invalid(format!(
            "y0 has {} points, grid has {}",
            y0.len(),
            spec.n_x()
        ));
    }
    check_source(spec, drift, "drift source")?;
    check_source(spec, diffusion, "diffusion source")?;
    match followers {
        None => Ok(forward_sweep(spec, y0, Some(drift), Some(diffusion))),
        Some((v1, v2)) => {
            check_source(spec, v1, "follower control v1")?;
            check_source(spec, v2, "follower control v2")?;
            let mut total = drift.clone();
            total.axpy(1.0, &v1.restricted(spec.follower_mask(Player::One)));
            total.axpy(1.0, &v2.restricted(spec.follower_mask(Player::Two)));
            Ok(forward_sweep(spec, y0, Some(&total), Some(diffusion)))
        }
    }
}

/// `y^i = L_i(v_i)`: zero initial state, drift `1_Oi v_i`.
pub fn solve_follower_response(
    spec: &ProblemSpec,
    i: Player,
    v: &AdaptedField,
) -> Result<AdaptedField> {
    check_source(spec, v, "follower control")?;
    let drift = v.restricted(spec.follower_mask(i));
    Ok(forward_sweep(
        spec,
        &vec![0.0; spec.n_x()],
        Some(&drift),
        None,
    ))
}

/// `q(y0, u1, u2)`: the state driven by the leaders alone.
pub fn solve_free_drift(
    spec: &ProblemSpec,
    u1: &AdaptedField,
    u2: &AdaptedField,
) -> Result<AdaptedField> {
    check_source(spec, u1, "leader control u1")?;
    check_source(spec, u2, "leader control u2")?;
    let drift = u1.restricted(spec.control_mask());
    Ok(forward_sweep(spec, spec.y0(), Some(&drift), Some(u2)))
}

/// Unchecked sweep; `None` sources are zero.
pub(crate) fn forward_sweep(
    spec: &ProblemSpec,
    y0: &[f64],
    drift: Option<&AdaptedField>,
    diffusion: Option<&AdaptedField>,
) -> AdaptedField {
    let tree = *spec.tree();
    let grid = *spec.grid();
    let n_x = grid.n_x();
    let dt = tree.dt();
    let sq = tree.sqrt_dt();
    let solver = ImplicitSolver::new(&grid, dt);
    let coef = spec.coefficients();

    let mut y = AdaptedField::zeros(tree, n_x);
    y.node_mut(0).copy_from_slice(y0);

    for level in 0..tree.n_steps() {
        let start = tree.level_range(level).start * n_x;
        let size = tree.level_size(level);
        let (head, tail) = y.data_mut().split_at_mut(start + size * n_x);
        let current = &head[start..];
        let next = &mut tail[..2 * size * n_x];

        let a1 = coef.a1.level(level);
        let a2 = coef.a2.level(level);
        let b1 = coef.b1.level(level);
        let b2 = coef.b2.level(level);
        let f = drift.map(|d| d.level(level));
        let g = diffusion.map(|d| d.level(level));

        let step = |(j, (kids, state)): (usize, (&mut [f64], &[f64]))| {
            let r = j * n_x..(j + 1) * n_x;
            let mut grad = vec![0.0; n_x];
            grid.gradient_into(state, &mut grad);
            let mut star: Vec<f64> = (0..n_x)
                .map(|k| {
                    let idx = r.start + k;
                    let src = f.map_or(0.0, |f| f[idx]);
                    state[k] + dt * (a1[idx] * state[k] + b1[idx] * grad[k] + src)
                })
                .collect();
            solver.solve_in_place(&mut star);
            let (plus, minus) = kids.split_at_mut(n_x);
            for k in 0..n_x {
                let idx = r.start + k;
                let src = g.map_or(0.0, |g| g[idx]);
                let noise = sq * (a2[idx] * state[k] + b2[idx] * grad[k] + src);
                plus[k] = star[k] + noise;
                minus[k] = star[k] - noise;
            }
        };

        if size >= PAR_LEVEL_MIN {
            next.par_chunks_mut(2 * n_x)
                .zip(current.par_chunks(n_x))
                .enumerate()
                .for_each(step);
        } else {
            next.chunks_mut(2 * n_x)
                .zip(current.chunks(n_x))
                .enumerate()
                .for_each(step);
        }
    }
    y
}
