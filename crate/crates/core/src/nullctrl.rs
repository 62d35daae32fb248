//! The leaders' problem: coupled optimality and adjoint systems, the control
//! Gramian and penalized-HUM null controls.
//!
//! Optimality system, for given leaders:
//!
//! ```text
//! y   = forward(y0, drift 1_O u1 + sum_i 1_Oi v_i, diffusion u2)
//! z^i = backward(0, -alpha_i (y - y_{i,d}) 1_Od),   v_i = -(1/beta_i) 1_Oi w(z^i)
//! ```
//!
//! Adjoint system, for terminal data `phi_T`:
//!
//! ```text
//! phi   = backward(phi_T, sum_i alpha_i psi^i 1_Od)
//! psi^i = forward(0, drift (1/beta_i) 1_Oi w(phi))
//! ```
//!
//! Both are solved by damped Picard iteration. Pairing them gives
//!
//! ```text
//! E<y(T), phi_T> - <y0, phi(0)> = <u1, 1_O w(phi)>_Q + <u2, Phi>_Q + sum_i alpha_i <y_{i,d}, psi^i>_Q
//! ```
//!
//! so with leaders `(1_O w(phi), Phi)` the map `phi_T -> y(T)` on the
//! homogeneous problem is the self-adjoint positive Gramian `Lambda`.

use crate::carleman::{weighted_target_norm, WeightConfig};
use crate::error::{invalid, Error, Result};
use crate::krylov::conjugate_gradient;
use crate::nash::{follower_adjoint, q_weights, solve_state, FollowerPair, LeaderPair};
use crate::prob_tree::{inner_product, AdaptedField, LeafField};
use crate::problem::{Player, ProblemSpec};
use crate::spde_backward::{backward_sweep, BackwardPair};
use crate::spde_forward::forward_sweep;

/// Penalty and iteration controls for the leaders' problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyConfig {
    /// Penalty weight `eps` of `eps/2 |phi_T|^2`.
    pub eps: f64,
    /// CG stops once `|r| <= cg_tol * eps * |phi_T|`, i.e. relative to the
    /// terminal state it implies.
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    /// Relative change between Picard iterates.
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    /// Initial Picard damping, halved on divergence down to 1/8.
    pub damping: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            cg_tol: 1e-10,
            cg_max_iters: 2000,
            picard_tol: 1e-13,
            picard_max_iters: 500,
            damping: 1.0,
        }
    }
}

pub const MIN_DAMPING: f64 = 0.125;

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eps", self.eps),
            ("cg_tol", self.cg_tol),
            ("picard_tol", self.picard_tol),
            ("damping", self.damping),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        if self.damping > 1.0 {
            return invalid(format!("damping must not exceed 1, got {}", self.damping));
        }
        if self.cg_max_iters == 0 || self.picard_max_iters == 0 {
            return invalid("iteration limits must be positive");
        }
        Ok(())
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self {
            eps,
            ..self.clone()
        }
    }
}

struct PicardOutcome {
    x: Vec<f64>,
    iterations: usize,
    contraction: f64,
}

/// Damped fixed-point iteration `x <- (1 - d) x + d F(x)` from `x = 0`,
/// restarted with halved damping when successive changes keep growing.
fn picard<F>(cfg: &PenaltyConfig, weights: &[f64], len: usize, map: F) -> Result<PicardOutcome>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let norm = |v: &[f64]| -> f64 {
        v.iter()
            .enumerate()
            .map(|(k, x)| weights[k % weights.len()] * x * x)
            .sum::<f64>()
            .sqrt()
    };
    let mut damping = cfg.damping;
    let mut total = 0;
    let mut contraction = 0.0;
    loop {
        let mut x = vec![0.0; len];
        let mut prev: Option<f64> = None;
        let mut growth = 0;
        let mut diverged = false;
        for _ in 0..cfg.picard_max_iters {
            let fx = map(&x);
            let mut change = 0.0;
            let new: Vec<f64> = x
                .iter()
                .zip(&fx)
                .map(|(a, b)| a + damping * (b - a))
                .collect();
            for (k, (a, b)) in new.iter().zip(&x).enumerate() {
                change += weights[k % weights.len()] * (a - b) * (a - b);
            }
            let change = change.sqrt();
            let size = norm(&new);
            x = new;
            total += 1;
            if !change.is_finite() {
                diverged = true;
                break;
            }
            if change <= cfg.picard_tol * size || change == 0.0 {
                return Ok(PicardOutcome {
                    x,
                    iterations: total,
                    contraction,
                });
            }
            if let Some(p) = prev {
                contraction = change / p;
                growth = if contraction > 1.0 { growth + 1 } else { 0 };
                if growth >= 3 {
                    diverged = true;
                    break;
                }
            }
            prev = Some(change);
        }
        if !diverged || damping * 0.5 < MIN_DAMPING {
            return Err(Error::CouplingDivergence {
                iterations: total,
                contraction,
                damping,
            });
        }
        damping *= 0.5;
    }
}

fn split(spec: &ProblemSpec, flat: &[f64]) -> [AdaptedField; 2] {
    let half = flat.len() / 2;
    let f = |d: &[f64]| {
        AdaptedField::from_data(*spec.tree(), spec.n_x(), d.to_vec()).expect("flat length")
    };
    [f(&flat[..half]), f(&flat[half..])]
}

fn join(a: &AdaptedField, b: &AdaptedField) -> Vec<f64> {
    let mut out = a.data().to_vec();
    out.extend_from_slice(b.data());
    out
}

/// Solution of the optimality system.
#[derive(Debug, Clone)]
pub struct OptimalityState {
    pub y: AdaptedField,
    /// Equilibrium followers `v_i = -(1/beta_i) 1_Oi w(z^i)`.
    pub followers: FollowerPair,
    /// `(z^i, Z^i)`, zero on the leaves.
    pub z: [BackwardPair; 2],
    pub iterations: usize,
    pub contraction: f64,
}

impl OptimalityState {
    pub fn terminal(&self) -> LeafField {
        self.y.leaves()
    }
}

fn followers_from_state(spec: &ProblemSpec, y: &AdaptedField) -> FollowerPair {
    let mut out = FollowerPair::zeros(spec);
    for i in Player::BOTH {
        let mut v = follower_adjoint(spec, i, y);
        v.restrict(spec.follower_mask(i));
        v.scale(-1.0 / spec.beta(i));
        v.clear_leaves();
        *out.get_mut(i) = v;
    }
    out
}

pub fn solve_optimality_system(
    spec: &ProblemSpec,
    leaders: &LeaderPair,
    cfg: &PenaltyConfig,
) -> Result<OptimalityState> {
    cfg.validate()?;
    // checks leader shapes
    solve_state(spec, leaders, &FollowerPair::zeros(spec))?;
    let weights = q_weights(spec);
    let len = 2 * weights.len();
    let out = picard(cfg, &weights, len, |x| {
        let [v1, v2] = split(spec, x);
        let y = solve_state(spec, leaders, &FollowerPair { v1, v2 }).expect("checked shapes");
        let v = followers_from_state(spec, &y);
        join(&v.v1, &v.v2)
    })?;
    let [v1, v2] = split(spec, &out.x);
    let followers = FollowerPair { v1, v2 };
    let y = solve_state(spec, leaders, &followers)?;
    let z = Player::BOTH.map(|i| {
        let mut src = y.clone();
        src.axpy(-1.0, spec.target(i));
        src.restrict(spec.observation_mask());
        src.scale(-spec.alpha(i));
        backward_sweep(spec, None, Some(&src))
    });
    Ok(OptimalityState {
        y,
        followers,
        z,
        iterations: out.iterations,
        contraction: out.contraction,
    })
}

/// Solution of the adjoint system.
#[derive(Debug, Clone)]
pub struct AdjointState {
    /// `(phi, Phi)` with its drift trace.
    pub phi: BackwardPair,
    /// `psi^1, psi^2`, zero at the root.
    pub psi: [AdaptedField; 2],
    pub iterations: usize,
    pub contraction: f64,
}

impl AdjointState {
    /// Leader controls `(1_O w(phi), Phi)` built from this state.
    pub fn leaders(&self, spec: &ProblemSpec) -> LeaderPair {
        LeaderPair::new(spec, self.phi.drift_dual.clone(), self.phi.big_z.clone())
            .expect("same topology")
    }
}

fn adjoint_source(spec: &ProblemSpec, psi: &[AdaptedField; 2]) -> AdaptedField {
    let mut src = psi[0].scaled(spec.alpha(Player::One));
    src.axpy(spec.alpha(Player::Two), &psi[1]);
    src.restrict(spec.observation_mask());
    src
}

fn psi_from_phi(spec: &ProblemSpec, w: &AdaptedField) -> [AdaptedField; 2] {
    let zero = vec![0.0; spec.n_x()];
    Player::BOTH.map(|i| {
        let mut drift = w.restricted(spec.follower_mask(i));
        drift.scale(1.0 / spec.beta(i));
        forward_sweep(spec, &zero, Some(&drift), None)
    })
}

pub fn solve_adjoint_system(
    spec: &ProblemSpec,
    phi_t: &LeafField,
    cfg: &PenaltyConfig,
) -> Result<AdjointState> {
    cfg.validate()?;
    if phi_t.tree() != spec.tree() || phi_t.n_x() != spec.n_x() {
        return invalid("phi_T must be one array per leaf of the problem tree");
    }
    let weights = q_weights(spec);
    let len = 2 * weights.len();
    let out = picard(cfg, &weights, len, |x| {
        let psi = split(spec, x);
        let phi = backward_sweep(spec, Some(phi_t), Some(&adjoint_source(spec, &psi)));
        let [p1, p2] = psi_from_phi(spec, &phi.drift_dual);
        join(&p1, &p2)
    })?;
    let psi_iter = split(spec, &out.x);
    let phi = backward_sweep(spec, Some(phi_t), Some(&adjoint_source(spec, &psi_iter)));
    let psi = psi_from_phi(spec, &phi.drift_dual);
    Ok(AdjointState {
        phi,
        psi,
        iterations: out.iterations,
        contraction: out.contraction,
    })
}

/// The five terms of the pairing between the optimality and adjoint
/// systems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledDuality {
    /// `E<y(T), phi_T>`
    pub terminal: f64,
    /// `<y0, phi(0)>`
    pub initial: f64,
    /// `<u1, 1_O w(phi)>_Q`
    pub leader_drift: f64,
    /// `<u2, Phi>_Q`
    pub leader_diffusion: f64,
    /// `sum_i alpha_i <y_{i,d}, psi^i>_Q`
    pub targets: f64,
}

impl CoupledDuality {
    pub fn relative_residual(&self) -> f64 {
        let lhs = self.terminal - self.initial;
        let rhs = self.leader_drift + self.leader_diffusion + self.targets;
        let scale = self.terminal.abs()
            + self.initial.abs()
            + self.leader_drift.abs()
            + self.leader_diffusion.abs()
            + self.targets.abs();
        if scale == 0.0 {
            0.0
        } else {
            (lhs - rhs).abs() / scale
        }
    }
}

/// Evaluates each term of the coupled duality identity separately.
pub fn coupled_duality(
    spec: &ProblemSpec,
    leaders: &LeaderPair,
    state: &OptimalityState,
    adjoint: &AdjointState,
    phi_t: &LeafField,
) -> Result<CoupledDuality> {
    let grid = spec.grid();
    let mut targets = 0.0;
    for i in Player::BOTH {
        targets +=
            spec.alpha(i) * inner_product(spec.target(i), &adjoint.psi[i.index()], grid, None)?;
    }
    Ok(CoupledDuality {
        terminal: state.terminal().inner(phi_t, grid),
        initial: grid.dot(spec.y0(), adjoint.phi.initial()),
        leader_drift: inner_product(
            &leaders.u1,
            &adjoint.phi.drift_dual,
            grid,
            Some(spec.control_mask()),
        )?,
        leader_diffusion: inner_product(&leaders.u2, &adjoint.phi.big_z, grid, None)?,
        targets,
    })
}

/// `Lambda phi_T`: terminal state of the homogeneous optimality system
/// driven by the leaders built from the adjoint system.
pub fn apply_gramian(
    spec: &ProblemSpec,
    phi_t: &LeafField,
    cfg: &PenaltyConfig,
) -> Result<LeafField> {
    Ok(gramian_parts(spec, phi_t, cfg)?.0)
}

fn gramian_parts(
    spec: &ProblemSpec,
    phi_t: &LeafField,
    cfg: &PenaltyConfig,
) -> Result<(LeafField, AdjointState)> {
    let adjoint = solve_adjoint_system(spec, phi_t, cfg)?;
    let hom = spec.homogeneous();
    let state = solve_optimality_system(&hom, &adjoint.leaders(spec), cfg)?;
    Ok((state.terminal(), adjoint))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullControlDiagnostics {
    pub eps: f64,
    pub cg_iterations: usize,
    pub cg_residuals: Vec<f64>,
    /// `E|y(T)|^2`
    pub terminal_norm_sq: f64,
    /// `E|phi_T|^2`
    pub phi_t_norm_sq: f64,
    /// `|y(T) + eps phi_T| / (eps |phi_T|)`, 0 when `phi_T = 0`.
    pub identity_residual: f64,
    /// `|1_O u1|^2 + |u2|^2`
    pub control_norm_sq: f64,
    /// `|y(T)| / eps`: the factor in `|y(T)| <= eps * factor`.
    pub terminal_bound_factor: f64,
}

#[derive(Debug, Clone)]
pub struct NullControlSolution {
    pub leaders: LeaderPair,
    pub phi_t: LeafField,
    pub adjoint: AdjointState,
    pub state: OptimalityState,
    pub diagnostics: NullControlDiagnostics,
}

/// Free terminal state `y_f(T)`: the optimality system with zero leaders.
pub fn free_terminal_state(spec: &ProblemSpec, cfg: &PenaltyConfig) -> Result<LeafField> {
    Ok(solve_optimality_system(spec, &LeaderPair::zeros(spec), cfg)?.terminal())
}

/// Minimizes `J_eps(phi_T) = 1/2 <Lambda phi_T, phi_T> + eps/2 |phi_T|^2 +
/// E<y_f(T), phi_T>` by CG on `(Lambda + eps I) phi_T = -y_f(T)`, then
/// returns the leaders `(1_O w(phi), Phi)`.
pub fn solve_null_control(spec: &ProblemSpec, cfg: &PenaltyConfig) -> Result<NullControlSolution> {
    solve_null_control_from(spec, cfg, None)
}

/// As [`solve_null_control`], starting CG from `initial` (e.g. the solution
/// at a nearby `eps`).
pub fn solve_null_control_from(
    spec: &ProblemSpec,
    cfg: &PenaltyConfig,
    initial: Option<&LeafField>,
) -> Result<NullControlSolution> {
    cfg.validate()?;
    let grid = *spec.grid();
    let tree = *spec.tree();
    let n_x = spec.n_x();
    let b = free_terminal_state(spec, cfg)?;
    let rhs: Vec<f64> = b.data().iter().map(|v| -v).collect();
    let inner = |a: &[f64], c: &[f64]| {
        tree.level_prob(tree.n_steps()) * grid.h() * crate::prob_tree::dot(a, c)
    };
    let norm = |a: &[f64]| inner(a, a).sqrt();
    let eps = cfg.eps;

    let to_leaf = |x: &[f64]| LeafField::from_data(tree, n_x, x.to_vec()).expect("leaf length");
    let outcome = if b.norm_sq(&grid) == 0.0 && initial.is_none() {
        None
    } else {
        let x0 = initial.map(|f| f.data().to_vec());
        let apply = |x: &[f64]| -> Result<Vec<f64>> {
            let lx = apply_gramian(spec, &to_leaf(x), cfg)?;
            Ok(lx.data().iter().zip(x).map(|(l, x)| l + eps * x).collect())
        };
        let done = |r: f64, x: &[f64]| r <= cfg.cg_tol * eps * norm(x);
        Some(conjugate_gradient(
            apply,
            inner,
            &rhs,
            x0,
            cfg.cg_max_iters,
            done,
        )?)
    };
    let (phi_t, cg_iterations, cg_residuals) = match outcome {
        Some(o) => (to_leaf(&o.x), o.iterations, o.residuals),
        None => (LeafField::zeros(tree, n_x), 0, vec![0.0]),
    };

    let adjoint = solve_adjoint_system(spec, &phi_t, cfg)?;
    let leaders = adjoint.leaders(spec);
    let state = solve_optimality_system(spec, &leaders, cfg)?;
    let y_t = state.terminal();
    let mut miss = y_t.clone();
    miss.axpy(eps, &phi_t);
    let phi_norm = phi_t.norm_sq(&grid).sqrt();
    let identity_residual = if phi_norm > 0.0 {
        miss.norm_sq(&grid).sqrt() / (eps * phi_norm)
    } else {
        miss.norm_sq(&grid).sqrt()
    };
    let terminal_norm_sq = y_t.norm_sq(&grid);
    let diagnostics = NullControlDiagnostics {
        eps,
        cg_iterations,
        cg_residuals,
        terminal_norm_sq,
        phi_t_norm_sq: phi_norm * phi_norm,
        identity_residual,
        control_norm_sq: leaders.norm_sq(spec),
        terminal_bound_factor: terminal_norm_sq.sqrt() / eps,
    };
    Ok(NullControlSolution {
        leaders,
        phi_t,
        adjoint,
        state,
        diagnostics,
    })
}

/// Inputs and value of the empirical cost-bound ratio
/// `|(u1, u2)|^2 / (E|y0|^2 + sum_i alpha_i^2 E int rho^2 |y_{i,d}|^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub control_norm_sq: f64,
    pub initial_energy: f64,
    pub weighted_targets: [f64; 2],
    pub phi_t_norm_sq: f64,
    /// `None` when numerator and denominator both vanish.
    pub ratio: Option<f64>,
}

impl CostReport {
    pub fn denominator(&self) -> f64 {
        self.initial_energy + self.weighted_targets.iter().sum::<f64>()
    }
}

pub fn control_cost_report(
    spec: &ProblemSpec,
    leaders: &LeaderPair,
    phi_t: &LeafField,
    weights: &WeightConfig,
) -> Result<CostReport> {
    let mut wt = [0.0; 2];
    for i in Player::BOTH {
        let a = spec.alpha(i);
        wt[i.index()] = a * a * weighted_target_norm(spec, weights, i)?;
    }
    let control_norm_sq = leaders.norm_sq(spec);
    let initial_energy = spec.grid().norm_sq(spec.y0());
    let den = initial_energy + wt[0] + wt[1];
    let ratio = if den > 0.0 {
        Some(control_norm_sq / den)
    } else if control_norm_sq == 0.0 {
        None
    } else {
        Some(f64::INFINITY)
    };
    Ok(CostReport {
        control_norm_sq,
        initial_energy,
        weighted_targets: wt,
        phi_t_norm_sq: phi_t.norm_sq(spec.grid()),
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nash::solve_nash;
    use crate::problem::fixtures::{random_field, random_spec};
    use crate::spde_forward::solve_free_drift;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_leaf(spec: &ProblemSpec, seed: u64) -> LeafField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_field(*spec.tree(), spec.n_x(), &mut rng, 1.0).leaves()
    }

    fn random_leaders(spec: &ProblemSpec, seed: u64) -> LeaderPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u1 = random_field(*spec.tree(), spec.n_x(), &mut rng, 1.0);
        let u2 = random_field(*spec.tree(), spec.n_x(), &mut rng, 1.0);
        LeaderPair::new(spec, u1, u2).unwrap()
    }

    fn cfg() -> PenaltyConfig {
        PenaltyConfig::default()
    }

    #[test]
    fn zero_data_gives_zero_states() {
        let spec = random_spec(6, 4, 1).homogeneous();
        let s = solve_optimality_system(&spec, &LeaderPair::zeros(&spec), &cfg()).unwrap();
        assert_eq!(s.y.max_abs(), 0.0);
        let a = solve_adjoint_system(&spec, &LeafField::zeros(*spec.tree(), 6), &cfg()).unwrap();
        assert_eq!(a.phi.z.max_abs(), 0.0);
        assert_eq!(a.psi[0].max_abs() + a.psi[1].max_abs(), 0.0);
        let sol = solve_null_control(&spec, &cfg()).unwrap();
        assert_eq!(sol.leaders.norm_sq(&spec), 0.0);
        assert_eq!(sol.diagnostics.terminal_norm_sq, 0.0);
    }

    #[test]
    fn optimality_system_reproduces_the_nash_equilibrium() {
        let spec = random_spec(7, 5, 2);
        let leaders = random_leaders(&spec, 3);
        let s = solve_optimality_system(&spec, &leaders, &cfg()).unwrap();
        let v = solve_nash(&spec, &leaders).unwrap();
        let mut d = v.clone();
        d.axpy(-1.0, &s.followers);
        assert!(d.norm_sq(&spec).sqrt() <= 1e-10 * v.norm_sq(&spec).sqrt());
        assert!(s.contraction < 1.0);
        // invariants of the coupled state
        for z in &s.z {
            assert_eq!(
                z.z.level(spec.tree().n_steps())
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>(),
                0.0
            );
        }
        assert_eq!(s.y.root(), spec.y0());
    }

    #[test]
    fn huge_beta_decouples_the_followers() {
        let spec = random_spec(7, 4, 4)
            .with_weights([1.0, 1.0], [1e9, 1e9])
            .unwrap();
        let leaders = random_leaders(&spec, 5);
        let s = solve_optimality_system(&spec, &leaders, &cfg()).unwrap();
        let q = solve_free_drift(&spec, &leaders.u1, &leaders.u2).unwrap();
        let mut d = s.y.clone();
        d.axpy(-1.0, &q);
        assert!(d.max_abs() <= 1e-6 * q.max_abs().max(1.0));
    }

    #[test]
    fn five_term_identity_holds() {
        for seed in 0..4 {
            let spec = random_spec(6, 5, 10 + seed);
            let leaders = random_leaders(&spec, 20 + seed);
            let phi_t = random_leaf(&spec, 30 + seed);
            let s = solve_optimality_system(&spec, &leaders, &cfg()).unwrap();
            let a = solve_adjoint_system(&spec, &phi_t, &cfg()).unwrap();
            let terms = coupled_duality(&spec, &leaders, &s, &a, &phi_t).unwrap();
            assert!(terms.relative_residual() <= 1e-8, "{terms:?}");
            assert!(terms.targets.abs() > 0.0 && terms.leader_diffusion.abs() > 0.0);
            for p in &a.psi {
                assert_eq!(p.root().iter().map(|v| v.abs()).sum::<f64>(), 0.0);
            }
        }
    }

    #[test]
    fn gramian_is_symmetric_and_positive() {
        let spec = random_spec(6, 4, 40);
        let grid = *spec.grid();
        let a = random_leaf(&spec, 41);
        let b = random_leaf(&spec, 42);
        let la = apply_gramian(&spec, &a, &cfg()).unwrap();
        let lb = apply_gramian(&spec, &b, &cfg()).unwrap();
        let (x, y) = (la.inner(&b, &grid), a.inner(&lb, &grid));
        assert!((x - y).abs() <= 1e-8 * x.abs().max(y.abs()), "{x} {y}");

        let (l, adj) = gramian_parts(&spec, &a, &cfg()).unwrap();
        let quad = l.inner(&a, &grid);
        let direct = adj.leaders(&spec).norm_sq(&spec);
        assert!(quad > 0.0);
        assert!((quad - direct).abs() <= 1e-8 * direct, "{quad} {direct}");
        assert_eq!(
            apply_gramian(&spec, &LeafField::zeros(*spec.tree(), 6), &cfg())
                .unwrap()
                .norm_sq(&grid),
            0.0
        );
    }

    #[test]
    fn linear_term_matches_its_dual_form() {
        let spec = random_spec(6, 4, 50);
        let phi_t = random_leaf(&spec, 51);
        let b = free_terminal_state(&spec, &cfg()).unwrap();
        let a = solve_adjoint_system(&spec, &phi_t, &cfg()).unwrap();
        let lhs = b.inner(&phi_t, spec.grid());
        let mut rhs = spec.grid().dot(spec.y0(), a.phi.initial());
        for i in Player::BOTH {
            rhs += spec.alpha(i)
                * inner_product(spec.target(i), &a.psi[i.index()], spec.grid(), None).unwrap();
        }
        assert!(
            (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()),
            "{lhs} {rhs}"
        );
    }

    #[test]
    fn null_control_normal_equations_and_eps_sweep() {
        let spec = random_spec(6, 5, 60);
        let mut prev: Option<NullControlDiagnostics> = None;
        for eps in [1e-1, 1e-2, 1e-3] {
            let sol = solve_null_control(&spec, &cfg().with_eps(eps)).unwrap();
            let d = sol.diagnostics;
            assert!(d.identity_residual <= 1e-8, "{d:?}");
            if let Some(p) = prev {
                assert!(d.terminal_norm_sq < p.terminal_norm_sq);
                assert!(d.control_norm_sq >= p.control_norm_sq);
            }
            prev = Some(d);
        }
    }

    #[test]
    fn cost_report_scales_with_initial_data() {
        use crate::carleman::WeightConfig;
        use crate::grid::Subdomain;
        let base = random_spec(9, 4, 70);
        let zero = base.zero_field();
        let spec = base.with_targets([zero.clone(), zero]).unwrap();
        let w = WeightConfig::new(
            spec.grid(),
            1.0,
            8.0,
            2.0,
            Subdomain::new(0.45, 0.55).unwrap(),
        )
        .unwrap();
        let c = cfg().with_eps(1e-2);
        let one = solve_null_control(&spec, &c).unwrap();
        let r1 = control_cost_report(&spec, &one.leaders, &one.phi_t, &w).unwrap();
        let doubled = spec
            .with_y0(spec.y0().iter().map(|v| 2.0 * v).collect())
            .unwrap();
        let two = solve_null_control(&doubled, &c).unwrap();
        let r2 = control_cost_report(&doubled, &two.leaders, &two.phi_t, &w).unwrap();
        assert!((r2.control_norm_sq / r1.control_norm_sq - 4.0).abs() < 1e-6);
        assert!((r2.ratio.unwrap() / r1.ratio.unwrap() - 1.0).abs() < 1e-6);

        let hom = spec.homogeneous();
        let r0 = control_cost_report(
            &hom,
            &LeaderPair::zeros(&hom),
            &LeafField::zeros(*hom.tree(), 9),
            &w,
        )
        .unwrap();
        assert_eq!(r0.ratio, None);
    }

    #[test]
    fn bad_configuration_is_rejected() {
        let spec = random_spec(4, 2, 80);
        for bad in [
            cfg().with_eps(0.0),
            PenaltyConfig {
                damping: 1.5,
                ..cfg()
            },
            PenaltyConfig {
                picard_max_iters: 0,
                ..cfg()
            },
        ] {
            assert!(solve_null_control(&spec, &bad).is_err());
        }
    }

    #[test]
    fn weak_coupling_diverges_then_fails() {
        // tiny beta: the Picard map is far from a contraction
        let spec = random_spec(8, 5, 90)
            .with_weights([1.0, 1.0], [1e-5, 1e-5])
            .unwrap();
        let leaders = random_leaders(&spec, 91);
        match solve_optimality_system(&spec, &leaders, &cfg()) {
            Err(Error::CouplingDivergence { damping, .. }) => assert!(damping < 1.0),
            other => panic!("{other:?}"),
        }
    }
}
