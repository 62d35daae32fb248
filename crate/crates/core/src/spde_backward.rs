//! Backward stochastic parabolic equations
//!
//! ```text
//! dz + z_xx dt = [-a1 z - a2 Z + (B1 z + B2 Z)_x + G] dt + Z dW,   z(T) = z_T
//! ```
//!
//! solved as the exact transpose of the forward sweep. From a node at level
//! `n` with children values `z(+)`, `z(-)`:
//!
//! ```text
//! Z   = (z(+) - z(-)) / (2 sqrt(dt))
//! w   = (I - dt Lap)^{-1} (z(+) + z(-)) / 2
//! z_n = w + dt (a1 w - D(B1 w)) + dt (a2 Z - D(B2 Z)) - dt G
//! ```
//!
//! where `D` is the centered difference (whose transpose is `-D`). The value
//! `w` is what a drift source of the forward equation pairs with, so for any
//! forward solution `y` with inputs `(y0, f, g)`
//!
//! ```text
//! E<y(T), z_T> - <y0, z(0)> = <f, w>_Q + <g, Z>_Q + <y, G>_Q
//! ```
//!
//! holds to round-off.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::grid::ImplicitSolver;
use crate::prob_tree::{dot, inner_product, AdaptedField, LeafField};
use crate::problem::ProblemSpec;
use crate::spde_forward::{ForwardInputs, PAR_LEVEL_MIN};

/// Adapted solution `(z, Z)` of a backward equation.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPair {
    /// `z` on every level, `z(T)` on the leaves.
    pub z: AdaptedField,
    /// Martingale-difference component on levels `0..n_steps` (zero on the
    /// leaves).
    pub big_z: AdaptedField,
    /// `(I - dt Lap)^{-1} E[z_{n+1} | F_n]` on levels `0..n_steps`: the trace
    /// of `z` that pairs with forward drift sources and feeds controls.
    pub drift_dual: AdaptedField,
}

impl BackwardPair {
    pub fn initial(&self) -> &[f64] {
        self.z.root()
    }
}

pub fn solve_backward(
    spec: &ProblemSpec,
    terminal: &LeafField,
    source: &AdaptedField,
) -> Result<BackwardPair> {
    if terminal.tree() != spec.tree() || terminal.n_x() != spec.n_x() {
        return invalid("terminal data must be one array per leaf of the problem tree");
    }
    if source.tree() != spec.tree() || source.n_x() != spec.n_x() {
        return invalid("backward source does not match the problem grid/tree");
    }
    Ok(backward_sweep(spec, Some(terminal), Some(source)))
}

/// Unchecked sweep; `None` inputs are zero.
pub(crate) fn backward_sweep(
    spec: &ProblemSpec,
    terminal: Option<&LeafField>,
    source: Option<&AdaptedField>,
) -> BackwardPair {
    let tree = *spec.tree();
    let grid = *spec.grid();
    let n_x = grid.n_x();
    let dt = tree.dt();
    let half_inv_sq = 0.5 / tree.sqrt_dt();
    let solver = ImplicitSolver::new(&grid, dt);
    let coef = spec.coefficients();

    let mut z = AdaptedField::zeros(tree, n_x);
    let mut big_z = AdaptedField::zeros(tree, n_x);
    let mut drift_dual = AdaptedField::zeros(tree, n_x);
    if let Some(t) = terminal {
        z.level_mut(tree.n_steps()).copy_from_slice(t.data());
    }

    for level in (0..tree.n_steps()).rev() {
        let start = tree.level_range(level).start * n_x;
        let size = tree.level_size(level);
        let (head, tail) = z.data_mut().split_at_mut(start + size * n_x);
        let current = &mut head[start..];
        let kids = &tail[..2 * size * n_x];
        let zz_level = big_z.level_mut(level);
        let w_level = drift_dual.level_mut(level);

        let a1 = coef.a1.level(level);
        let a2 = coef.a2.level(level);
        let b1 = coef.b1.level(level);
        let b2 = coef.b2.level(level);
        let g = source.map(|s| s.level(level));

        let step = |(j, (((zn, zz), w), kids)): (
            usize,
            (((&mut [f64], &mut [f64]), &mut [f64]), &[f64]),
        )| {
            let r0 = j * n_x;
            let (plus, minus) = kids.split_at(n_x);
            for k in 0..n_x {
                w[k] = 0.5 * (plus[k] + minus[k]);
                zz[k] = half_inv_sq * (plus[k] - minus[k]);
            }
            solver.solve_in_place(w);
            let mut bw = vec![0.0; n_x];
            let mut bz = vec![0.0; n_x];
            for k in 0..n_x {
                bw[k] = b1[r0 + k] * w[k];
                bz[k] = b2[r0 + k] * zz[k];
            }
            let mut dbw = vec![0.0; n_x];
            let mut dbz = vec![0.0; n_x];
            grid.gradient_into(&bw, &mut dbw);
            grid.gradient_into(&bz, &mut dbz);
            for k in 0..n_x {
                let idx = r0 + k;
                let src = g.map_or(0.0, |g| g[idx]);
                zn[k] = w[k] + dt * (a1[idx] * w[k] - dbw[k]) + dt * (a2[idx] * zz[k] - dbz[k])
                    - dt * src;
            }
        };

        if size >= PAR_LEVEL_MIN {
            current
                .par_chunks_mut(n_x)
                .zip(zz_level.par_chunks_mut(n_x))
                .zip(w_level.par_chunks_mut(n_x))
                .zip(kids.par_chunks(2 * n_x))
                .enumerate()
                .for_each(step);
        } else {
            current
                .chunks_mut(n_x)
                .zip(zz_level.chunks_mut(n_x))
                .zip(w_level.chunks_mut(n_x))
                .zip(kids.chunks(2 * n_x))
                .enumerate()
                .for_each(step);
        }
    }
    BackwardPair {
        z,
        big_z,
        drift_dual,
    }
}

/// The individual terms of the duality identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityTerms {
    /// `E<y(T), z_T>`
    pub terminal: f64,
    /// `<y0, z(0)>`
    pub initial: f64,
    /// `<f, w>_Q`
    pub drift: f64,
    /// `<g, Z>_Q`
    pub diffusion: f64,
    /// `<y, G>_Q`
    pub source: f64,
}

impl DualityTerms {
    /// `|lhs - rhs|` over the sum of the magnitudes of all terms (0 when all
    /// terms vanish).
    pub fn relative_residual(&self) -> f64 {
        let lhs = self.terminal - self.initial;
        let rhs = self.drift + self.diffusion + self.source;
        let scale = self.terminal.abs()
            + self.initial.abs()
            + self.drift.abs()
            + self.diffusion.abs()
            + self.source.abs();
        if scale == 0.0 {
            0.0
        } else {
            (lhs - rhs).abs() / scale
        }
    }
}

pub fn duality_terms(
    spec: &ProblemSpec,
    inputs: &ForwardInputs,
    y: &AdaptedField,
    source: &AdaptedField,
    pair: &BackwardPair,
) -> Result<DualityTerms> {
    let grid = spec.grid();
    let tree = spec.tree();
    let n = tree.n_steps();
    let p_leaf = tree.level_prob(n);
    Ok(DualityTerms {
        terminal: p_leaf * grid.h() * dot(y.level(n), pair.z.level(n)),
        initial: grid.dot(&inputs.y0, pair.initial()),
        drift: inner_product(&inputs.drift, &pair.drift_dual, grid, None)?,
        diffusion: inner_product(&inputs.diffusion, &pair.big_z, grid, None)?,
        source: inner_product(y, source, grid, None)?,
    })
}

/// Relative residual of the discrete duality identity between a forward
/// solution and a backward pair.
pub fn duality_check(
    spec: &ProblemSpec,
    inputs: &ForwardInputs,
    y: &AdaptedField,
    source: &AdaptedField,
    pair: &BackwardPair,
) -> Result<f64> {
    Ok(duality_terms(spec, inputs, y, source, pair)?.relative_residual())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{SpatialGrid, Subdomain};
    use crate::prob_tree::{martingale_difference, TreeTopology};
    use crate::problem::fixtures::{random_field, random_spec};
    use crate::problem::{Coefficients, ProblemData};
    use crate::spde_forward::solve_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_leaf(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> LeafField {
        random_field(*spec.tree(), spec.n_x(), rng, 1.0).leaves()
    }

    #[test]
    fn zero_data_gives_zero_pair() {
        let spec = random_spec(4, 3, 1);
        let pair = solve_backward(
            &spec,
            &LeafField::zeros(*spec.tree(), 4),
            &spec.zero_field(),
        )
        .unwrap();
        assert_eq!(pair.z.max_abs(), 0.0);
        assert_eq!(pair.big_z.max_abs(), 0.0);
    }

    fn deterministic_spec(a2: f64, b2: f64) -> ProblemSpec {
        let grid = SpatialGrid::new(5, 1.0).unwrap();
        let tree = TreeTopology::new(4, 1.0).unwrap();
        let zero = AdaptedField::zeros(tree, 5);
        ProblemSpec::new(ProblemData {
            grid,
            tree,
            coefficients: Coefficients::constant(tree, 5, 0.8, a2, 0.3, b2),
            control: Subdomain::new(0.2, 0.8).unwrap(),
            followers: [
                Subdomain::new(0.0, 0.5).unwrap(),
                Subdomain::new(0.5, 1.0).unwrap(),
            ],
            observation: Subdomain::new(0.3, 0.7).unwrap(),
            alpha: [1.0, 1.0],
            beta: [1.0, 1.0],
            targets: [zero.clone(), zero],
            y0: vec![0.0; 5],
        })
        .unwrap()
    }

    #[test]
    fn deterministic_data_has_no_martingale_part() {
        let spec = deterministic_spec(0.0, 0.0);
        let tree = *spec.tree();
        let terminal = LeafField::from_data(
            tree,
            5,
            [0.3, -0.1, 0.7, 0.2, 0.5].repeat(tree.leaf_count()),
        )
        .unwrap();
        let source = AdaptedField::deterministic(tree, spec.grid(), |t, x| t * x - 0.2);
        let pair = solve_backward(&spec, &terminal, &source).unwrap();
        assert!(pair.big_z.max_abs() < 1e-15);
    }

    #[test]
    fn big_z_matches_martingale_difference_of_stored_z() {
        let spec = random_spec(5, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tree = *spec.tree();
        let pair = solve_backward(
            &spec,
            &random_leaf(&spec, &mut rng),
            &random_field(tree, 5, &mut rng, 1.0),
        )
        .unwrap();
        for node in 0..tree.node_count() {
            if let Some((p, m)) = tree.children(node) {
                let md = martingale_difference(pair.z.node(p), pair.z.node(m), tree.dt()).unwrap();
                for (a, b) in md.iter().zip(pair.big_z.node(node)) {
                    assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
                }
            }
        }
    }

    #[test]
    fn duality_identity_holds_to_round_off() {
        for seed in 0..10 {
            let spec = random_spec(3 + seed as usize % 4, 2 + seed as usize % 4, 100 + seed);
            let tree = *spec.tree();
            let n_x = spec.n_x();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = ForwardInputs {
                y0: random_field(tree, n_x, &mut rng, 1.0).root().to_vec(),
                drift: random_field(tree, n_x, &mut rng, 1.0),
                diffusion: random_field(tree, n_x, &mut rng, 1.0),
            };
            let y =
                solve_forward(&spec, &inputs.y0, &inputs.drift, &inputs.diffusion, None).unwrap();
            let terminal = random_leaf(&spec, &mut rng);
            let source = random_field(tree, n_x, &mut rng, 1.0);
            let pair = solve_backward(&spec, &terminal, &source).unwrap();
            let r = duality_check(&spec, &inputs, &y, &source, &pair).unwrap();
            assert!(r <= 1e-12, "seed {seed}: residual {r:e}");
        }
        let spec = random_spec(3, 2, 0);
        let zero_inputs = ForwardInputs::zeros(&spec);
        let y = solve_forward(
            &spec,
            &zero_inputs.y0,
            &zero_inputs.drift,
            &zero_inputs.diffusion,
            None,
        )
        .unwrap();
        let pair = backward_sweep(&spec, None, None);
        assert_eq!(
            duality_check(&spec, &zero_inputs, &y, &spec.zero_field(), &pair).unwrap(),
            0.0
        );
    }

    #[test]
    fn backward_is_linear() {
        let spec = random_spec(4, 3, 7);
        let tree = *spec.tree();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (ta, tb) = (random_leaf(&spec, &mut rng), random_leaf(&spec, &mut rng));
        let (sa, sb) = (
            random_field(tree, 4, &mut rng, 1.0),
            random_field(tree, 4, &mut rng, 1.0),
        );
        let pa = solve_backward(&spec, &ta, &sa).unwrap();
        let pb = solve_backward(&spec, &tb, &sb).unwrap();
        let mut tc = ta.scaled(2.0);
        tc.axpy(-0.5, &tb);
        let mut sc = sa.scaled(2.0);
        sc.axpy(-0.5, &sb);
        let pc = solve_backward(&spec, &tc, &sc).unwrap();
        for (c, (a, b)) in [(&pc.z, (&pa.z, &pb.z)), (&pc.big_z, (&pa.big_z, &pb.big_z))] {
            for ((x, y), w) in c.data().iter().zip(a.data()).zip(b.data()) {
                assert!((x - (2.0 * y - 0.5 * w)).abs() < 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn rejects_malformed_terminal() {
        let spec = random_spec(4, 3, 9);
        let bad = LeafField::zeros(TreeTopology::new(2, 1.0).unwrap(), 4);
        assert!(solve_backward(&spec, &bad, &spec.zero_field()).is_err());
    }

    /// Independent implicit discretization of the deterministic backward
    /// equation `-z_t - z_xx = -a1 z + (B1 z)_x + G`, `z(T) = z_T`, used only
    /// as a consistency check against the transposed sweep.
    fn direct_backward(
        spec: &ProblemSpec,
        z_t: &[f64],
        a1: f64,
        b1: f64,
        g: impl Fn(f64, f64) -> f64,
    ) -> Vec<f64> {
        let grid = *spec.grid();
        let tree = *spec.tree();
        let dt = tree.dt();
        let mut z = z_t.to_vec();
        for level in (0..tree.n_steps()).rev() {
            let t = tree.time(level);
            let dz = grid
                .apply_gradient(&z.iter().map(|v| b1 * v).collect::<Vec<_>>())
                .unwrap();
            let rhs: Vec<f64> = z
                .iter()
                .zip(&dz)
                .zip(grid.points())
                .map(|((v, d), x)| v + dt * (a1 * v - d) - dt * g(t, x))
                .collect();
            z = grid.implicit_step_solve(&rhs, dt).unwrap();
        }
        z
    }

    #[test]
    fn consistent_with_direct_scheme_on_deterministic_data() {
        let mut errs = vec![];
        for (n_x, n_t) in [(15, 6), (31, 10), (63, 14)] {
            let grid = SpatialGrid::new(n_x, 1.0).unwrap();
            let tree = TreeTopology::new(n_t, 0.5).unwrap();
            let zero = AdaptedField::zeros(tree, n_x);
            let spec = ProblemSpec::new(ProblemData {
                grid,
                tree,
                coefficients: Coefficients::constant(tree, n_x, 0.5, 0.0, 0.4, 0.0),
                control: Subdomain::new(0.2, 0.8).unwrap(),
                followers: [
                    Subdomain::new(0.0, 0.5).unwrap(),
                    Subdomain::new(0.5, 1.0).unwrap(),
                ],
                observation: Subdomain::new(0.3, 0.7).unwrap(),
                alpha: [1.0, 1.0],
                beta: [1.0, 1.0],
                targets: [zero.clone(), zero],
                y0: vec![0.0; n_x],
            })
            .unwrap();
            let g = |t: f64, x: f64| (std::f64::consts::PI * x).sin() * (1.0 + t);
            let z_t: Vec<f64> = grid.points().map(|x| x * (1.0 - x)).collect();
            let terminal = LeafField::from_data(tree, n_x, z_t.repeat(tree.leaf_count())).unwrap();
            let source = AdaptedField::deterministic(tree, &grid, g);
            let pair = solve_backward(&spec, &terminal, &source).unwrap();
            let direct = direct_backward(&spec, &z_t, 0.5, 0.4, g);
            let err = pair
                .initial()
                .iter()
                .zip(&direct)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let size = direct.iter().map(|v| v.abs()).fold(0.0, f64::max);
            errs.push((tree.dt(), err / size));
        }
        // the two schemes place the source on opposite sides of the implicit
        // solve, so they agree to first order in dt
        for w in errs.windows(2) {
            let rate = (w[0].1 / w[1].1).ln() / (w[0].0 / w[1].0).ln();
            assert!((0.8..1.3).contains(&rate), "{errs:?}");
        }
    }
}
