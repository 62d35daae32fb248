//! The followers' Nash game for fixed leader controls.
//!
//! Follower `i` minimizes
//!
//! ```text
//! J_i = alpha_i / 2 |y - y_{i,d}|^2_{O_d} + beta_i / 2 |v_i|^2
//! ```
//!
//! and the equilibrium solves `M(v1, v2) = rhs` with
//! `M_i(v) = alpha_i L_i*[(L1 v1 + L2 v2) 1_{O_d}] + beta_i v_i`, where
//! `L_i` maps `v_i` to the state it drives from rest and `L_i*` is its
//! transpose, realized by a backward sweep:
//! `L_i* g = -1_{O_i} w` with `w` the drift trace of the backward pair with
//! zero terminal value and source `g`.
//!
//! Dividing row `i` by `alpha_i` makes the operator self-adjoint and
//! positive, so the solve is plain conjugate gradient on the scaled system.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::krylov::{conjugate_gradient, conjugate_residual, KrylovOutcome};
use crate::prob_tree::{inner_product, norm_sq, AdaptedField};
use crate::problem::{Player, ProblemSpec};
use crate::spde_backward::backward_sweep;
use crate::spde_forward::forward_sweep;

fn check_field(spec: &ProblemSpec, f: &AdaptedField, what: &str) -> Result<()> {
    if f.tree() != spec.tree() || f.n_x() != spec.n_x() {
        return invalid(format!("{what} does not match the problem grid/tree"));
    }
    Ok(())
}

/// Follower controls `(v1, v2)`, supported in `O1` and `O2`. Leaf values
/// are never used by the dynamics and are kept at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerPair {
    pub v1: AdaptedField,
    pub v2: AdaptedField,
}

impl FollowerPair {
    /// Projects onto the follower regions.
    pub fn new(spec: &ProblemSpec, v1: AdaptedField, v2: AdaptedField) -> Result<Self> {
        check_field(spec, &v1, "follower control v1")?;
        check_field(spec, &v2, "follower control v2")?;
        let mut pair = Self { v1, v2 };
        for i in Player::BOTH {
            let v = pair.get_mut(i);
            v.restrict(spec.follower_mask(i));
            v.clear_leaves();
        }
        Ok(pair)
    }

    pub fn zeros(spec: &ProblemSpec) -> Self {
        Self {
            v1: spec.zero_field(),
            v2: spec.zero_field(),
        }
    }

    pub fn get(&self, i: Player) -> &AdaptedField {
        match i {
            Player::One => &self.v1,
            Player::Two => &self.v2,
        }
    }

    pub fn get_mut(&mut self, i: Player) -> &mut AdaptedField {
        match i {
            Player::One => &mut self.v1,
            Player::Two => &mut self.v2,
        }
    }

    /// `|v1|^2 + |v2|^2` in the space-time-probability norm.
    pub fn norm_sq(&self, spec: &ProblemSpec) -> f64 {
        norm_sq(&self.v1, spec.grid(), None) + norm_sq(&self.v2, spec.grid(), None)
    }

    pub fn inner(&self, other: &FollowerPair, spec: &ProblemSpec) -> f64 {
        let g = spec.grid();
        inner_product(&self.v1, &other.v1, g, None).expect("same shape")
            + inner_product(&self.v2, &other.v2, g, None).expect("same shape")
    }

    pub fn axpy(&mut self, s: f64, other: &FollowerPair) {
        self.v1.axpy(s, &other.v1);
        self.v2.axpy(s, &other.v2);
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = self.v1.data().to_vec();
        out.extend_from_slice(self.v2.data());
        out
    }

    fn unflatten(spec: &ProblemSpec, flat: &[f64]) -> Self {
        let half = flat.len() / 2;
        let field = |d: &[f64]| {
            AdaptedField::from_data(*spec.tree(), spec.n_x(), d.to_vec()).expect("flat length")
        };
        Self {
            v1: field(&flat[..half]),
            v2: field(&flat[half..]),
        }
    }
}

/// Leader controls: `u1` acts in `O` through the drift, `u2` everywhere
/// through the diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderPair {
    pub u1: AdaptedField,
    pub u2: AdaptedField,
}

impl LeaderPair {
    /// Projects `u1` onto `O`.
    pub fn new(spec: &ProblemSpec, u1: AdaptedField, u2: AdaptedField) -> Result<Self> {
        check_field(spec, &u1, "leader control u1")?;
        check_field(spec, &u2, "leader control u2")?;
        let mut u1 = u1;
        let mut u2 = u2;
        u1.restrict(spec.control_mask());
        u1.clear_leaves();
        u2.clear_leaves();
        Ok(Self { u1, u2 })
    }

    pub fn zeros(spec: &ProblemSpec) -> Self {
        Self {
            u1: spec.zero_field(),
            u2: spec.zero_field(),
        }
    }

    /// `|1_O u1|^2 + |u2|^2`.
    pub fn norm_sq(&self, spec: &ProblemSpec) -> f64 {
        norm_sq(&self.u1, spec.grid(), Some(spec.control_mask()))
            + norm_sq(&self.u2, spec.grid(), None)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            u1: self.u1.scaled(s),
            u2: self.u2.scaled(s),
        }
    }
}

/// State driven by the given leaders and followers from `spec.y0()`.
pub fn solve_state(
    spec: &ProblemSpec,
    leaders: &LeaderPair,
    followers: &FollowerPair,
) -> Result<AdaptedField> {
    check_field(spec, &leaders.u1, "leader control u1")?;
    check_field(spec, &leaders.u2, "leader control u2")?;
    check_field(spec, &followers.v1, "follower control v1")?;
    check_field(spec, &followers.v2, "follower control v2")?;
    let mut drift = leaders.u1.restricted(spec.control_mask());
    drift.axpy(
        1.0,
        &followers.v1.restricted(spec.follower_mask(Player::One)),
    );
    drift.axpy(
        1.0,
        &followers.v2.restricted(spec.follower_mask(Player::Two)),
    );
    Ok(forward_sweep(
        spec,
        spec.y0(),
        Some(&drift),
        Some(&leaders.u2),
    ))
}

/// `J_i(v1, v2)` for the given leaders.
pub fn eval_j_i(
    spec: &ProblemSpec,
    i: Player,
    leaders: &LeaderPair,
    followers: &FollowerPair,
) -> Result<f64> {
    let y = solve_state(spec, leaders, followers)?;
    let mut miss = y;
    miss.axpy(-1.0, spec.target(i));
    let grid = spec.grid();
    Ok(
        0.5 * spec.alpha(i) * norm_sq(&miss, grid, Some(spec.observation_mask()))
            + 0.5 * spec.beta(i) * norm_sq(followers.get(i), grid, Some(spec.follower_mask(i))),
    )
}

/// The leaders' cost `(|1_O u1|^2 + |u2|^2) / 2`.
pub fn eval_j(spec: &ProblemSpec, leaders: &LeaderPair) -> Result<f64> {
    check_field(spec, &leaders.u1, "leader control u1")?;
    check_field(spec, &leaders.u2, "leader control u2")?;
    Ok(0.5 * leaders.norm_sq(spec))
}

/// `L_i* g` for both players at once: `-1_{O_i} w(g)`.
pub fn apply_l_star(spec: &ProblemSpec, g: &AdaptedField) -> Result<FollowerPair> {
    check_field(spec, g, "adjoint argument")?;
    Ok(l_star(spec, g))
}

fn l_star(spec: &ProblemSpec, g: &AdaptedField) -> FollowerPair {
    let w = backward_sweep(spec, None, Some(g)).drift_dual;
    let mut out = FollowerPair {
        v1: w.scaled(-1.0),
        v2: w.scaled(-1.0),
    };
    for i in Player::BOTH {
        out.get_mut(i).restrict(spec.follower_mask(i));
    }
    out
}

/// `(L1 v1 + L2 v2) 1_{O_d}`.
fn observed_response(spec: &ProblemSpec, v: &FollowerPair) -> AdaptedField {
    let mut drift = v.v1.restricted(spec.follower_mask(Player::One));
    drift.axpy(1.0, &v.v2.restricted(spec.follower_mask(Player::Two)));
    let mut y = forward_sweep(spec, &vec![0.0; spec.n_x()], Some(&drift), None);
    y.restrict(spec.observation_mask());
    y
}

/// `M(v1, v2)`.
pub fn apply_m(spec: &ProblemSpec, followers: &FollowerPair) -> Result<FollowerPair> {
    check_field(spec, &followers.v1, "follower control v1")?;
    check_field(spec, &followers.v2, "follower control v2")?;
    Ok(apply_m_scaled(spec, followers, false))
}

/// `M v`, or `diag(1/alpha) M v` when `scaled`.
fn apply_m_scaled(spec: &ProblemSpec, v: &FollowerPair, scaled: bool) -> FollowerPair {
    let mut out = l_star(spec, &observed_response(spec, v));
    for i in Player::BOTH {
        let (a, b) = (spec.alpha(i), spec.beta(i));
        let (sa, sb) = if scaled { (1.0, b / a) } else { (a, b) };
        let o = out.get_mut(i);
        o.scale(sa);
        o.axpy(sb, &v.get(i).restricted(spec.follower_mask(i)));
        o.clear_leaves();
    }
    out
}

/// `rhs_i = alpha_i L_i*((y_{i,d} - q) 1_{O_d})` with `q` the state driven
/// by the leaders alone.
pub fn nash_rhs(spec: &ProblemSpec, leaders: &LeaderPair) -> Result<FollowerPair> {
    let q = solve_state(spec, leaders, &FollowerPair::zeros(spec))?;
    let mut out = FollowerPair::zeros(spec);
    for i in Player::BOTH {
        let mut g = spec.target(i).clone();
        g.axpy(-1.0, &q);
        g.restrict(spec.observation_mask());
        let part = l_star(spec, &g);
        *out.get_mut(i) = part.get(i).scaled(spec.alpha(i));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct NashOptions {
    /// Stopping tolerance on the relative residual of the scaled system.
    pub tol: f64,
    /// Accepted relative residual of `M v = rhs` after the solve.
    pub residual_tol: f64,
    pub max_iters: usize,
    /// Random directions for the coercivity and symmetry probes.
    pub probes: usize,
    pub seed: u64,
    pub initial_guess: Option<FollowerPair>,
}

impl Default for NashOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            residual_tol: 1e-10,
            max_iters: 1000,
            probes: 4,
            seed: 0x6e61_7368,
            initial_guess: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashDiagnostics {
    pub solver: &'static str,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    /// `|M v - rhs| / |rhs|` (0 for zero data).
    pub relative_residual: f64,
    /// Smallest sampled Rayleigh quotient `<Mv, v> / |v|^2`.
    pub min_rayleigh: f64,
    /// Largest sampled `|<Sv, w> - <v, Sw>| / (|Sv||w|)` of the scaled
    /// operator `S`.
    pub symmetry_defect: f64,
}

#[derive(Debug, Clone)]
pub struct NashSolution {
    pub followers: FollowerPair,
    pub diagnostics: NashDiagnostics,
}

fn random_field(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> AdaptedField {
    let d = (0..spec.tree().node_count() * spec.n_x())
        .map(|_| StandardNormal.sample(&mut *rng))
        .collect();
    AdaptedField::from_data(*spec.tree(), spec.n_x(), d).expect("sized")
}

fn random_direction(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> FollowerPair {
    let (v1, v2) = (random_field(spec, rng), random_field(spec, rng));
    FollowerPair::new(spec, v1, v2).expect("shape")
}

/// `v2 = c v1 + e` on the overlap of the two regions: the players'
/// responses then partly cancel, which is where `M` can lose coercivity.
fn correlated_direction(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> FollowerPair {
    let base = random_field(spec, rng);
    let mut v2 = random_field(spec, rng).scaled(0.1);
    let c: f64 = rand::Rng::random_range(rng, -1.0..0.0);
    v2.axpy(c, &base);
    FollowerPair::new(spec, base, v2).expect("shape")
}

/// Sampled Rayleigh quotients of `M` and symmetry defect of the scaled
/// operator.
pub fn probe_operator(spec: &ProblemSpec, probes: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_rayleigh = f64::INFINITY;
    let mut defect: f64 = 0.0;
    let mut prev: Option<(FollowerPair, FollowerPair)> = None;
    for k in 0..probes {
        let v = if k % 2 == 0 {
            random_direction(spec, &mut rng)
        } else {
            correlated_direction(spec, &mut rng)
        };
        let vv = v.norm_sq(spec);
        if vv == 0.0 {
            continue;
        }
        let mv = apply_m_scaled(spec, &v, false);
        min_rayleigh = min_rayleigh.min(mv.inner(&v, spec) / vv);
        let sv = apply_m_scaled(spec, &v, true);
        if let Some((w, sw)) = &prev {
            let a = sv.inner(w, spec);
            let b = v.inner(sw, spec);
            let scale = (sv.norm_sq(spec) * w.norm_sq(spec)).sqrt();
            if scale > 0.0 {
                defect = defect.max((a - b).abs() / scale);
            }
        }
        prev = Some((v, sv));
    }
    (min_rayleigh, defect)
}

pub fn solve_nash(spec: &ProblemSpec, leaders: &LeaderPair) -> Result<FollowerPair> {
    Ok(solve_nash_with(spec, leaders, &NashOptions::default())?.followers)
}

pub fn solve_nash_with(
    spec: &ProblemSpec,
    leaders: &LeaderPair,
    opts: &NashOptions,
) -> Result<NashSolution> {
    if !(opts.tol > 0.0 && opts.residual_tol > 0.0) {
        return invalid("solver tolerances must be positive");
    }
    let (min_rayleigh, symmetry_defect) = probe_operator(spec, opts.probes, opts.seed);
    if !(min_rayleigh > 0.0) {
        return Err(Error::CoercivityViolation {
            beta1: spec.beta(Player::One),
            beta2: spec.beta(Player::Two),
            quotient: min_rayleigh,
        });
    }
    let rhs = nash_rhs(spec, leaders)?;
    let rhs_norm = rhs.norm_sq(spec).sqrt();

    // scaled system S v = diag(1/alpha) rhs
    let mut scaled_rhs = rhs.clone();
    for i in Player::BOTH {
        scaled_rhs.get_mut(i).scale(1.0 / spec.alpha(i));
    }
    let b = scaled_rhs.flatten();
    let weights = q_weights(spec);
    let inner = |a: &[f64], c: &[f64]| -> f64 {
        let half = weights.len();
        a.iter()
            .zip(c)
            .enumerate()
            .map(|(k, (x, y))| weights[k % half] * x * y)
            .sum()
    };
    let b_norm = inner(&b, &b).sqrt();
    let x0 = match &opts.initial_guess {
        Some(g) => Some(FollowerPair::new(spec, g.v1.clone(), g.v2.clone())?.flatten()),
        None => None,
    };
    let apply =
        |x: &[f64]| Ok(apply_m_scaled(spec, &FollowerPair::unflatten(spec, x), true).flatten());
    let done = |r: f64, _: &[f64]| r <= opts.tol * b_norm;
    let (solver, outcome): (&'static str, KrylovOutcome) = if symmetry_defect <= 1e-10 {
        (
            "conjugate gradient",
            conjugate_gradient(apply, inner, &b, x0, opts.max_iters, done)?,
        )
    } else {
        (
            "conjugate residual",
            conjugate_residual(apply, inner, &b, x0, opts.max_iters, done)?,
        )
    };
    let followers = FollowerPair::unflatten(spec, &outcome.x);

    let mut res = apply_m_scaled(spec, &followers, false);
    res.axpy(-1.0, &rhs);
    let res_norm = res.norm_sq(spec).sqrt();
    let relative_residual = if rhs_norm > 0.0 {
        res_norm / rhs_norm
    } else {
        res_norm
    };
    if relative_residual > opts.residual_tol {
        return Err(Error::SolverFailure {
            solver,
            iterations: outcome.iterations,
            residuals: outcome.residuals,
        });
    }
    Ok(NashSolution {
        followers,
        diagnostics: NashDiagnostics {
            solver,
            iterations: outcome.iterations,
            residual_history: outcome.residuals,
            relative_residual,
            min_rayleigh,
            symmetry_defect,
        },
    })
}

/// Quadrature weight of every entry of an adapted field (zero on leaves).
pub(crate) fn q_weights(spec: &ProblemSpec) -> Vec<f64> {
    let tree = spec.tree();
    let n_x = spec.n_x();
    let base = tree.dt() * spec.grid().h();
    let mut w = vec![0.0; tree.node_count() * n_x];
    for level in 0..tree.n_steps() {
        let r = tree.level_range(level);
        w[r.start * n_x..r.end * n_x].fill(base * tree.level_prob(level));
    }
    w
}

/// `|v_i + (1/beta_i) 1_{O_i} w(z^i)|` for both players, where `z^i` solves
/// the backward equation with zero terminal value and source
/// `-alpha_i (y - y_{i,d}) 1_{O_d}`.
pub fn verify_characterization(
    spec: &ProblemSpec,
    leaders: &LeaderPair,
    followers: &FollowerPair,
) -> Result<[f64; 2]> {
    let y = solve_state(spec, leaders, followers)?;
    let mut out = [0.0; 2];
    for i in Player::BOTH {
        let w = follower_adjoint(spec, i, &y);
        let mut r = followers.get(i).restricted(spec.follower_mask(i));
        r.axpy(1.0 / spec.beta(i), &w.restricted(spec.follower_mask(i)));
        out[i.index()] = norm_sq(&r, spec.grid(), None).sqrt();
    }
    Ok(out)
}

/// Drift trace of `z^i`, the backward pair with source
/// `-alpha_i (y - y_{i,d}) 1_{O_d}`.
pub(crate) fn follower_adjoint(spec: &ProblemSpec, i: Player, y: &AdaptedField) -> AdaptedField {
    let mut src = y.clone();
    src.axpy(-1.0, spec.target(i));
    src.restrict(spec.observation_mask());
    src.scale(-spec.alpha(i));
    backward_sweep(spec, None, Some(&src)).drift_dual
}

/// Central difference `(J_i(v + s d) - J_i(v - s d)) / 2s` along a
/// direction in player `i`'s control.
pub fn directional_derivative(
    spec: &ProblemSpec,
    i: Player,
    leaders: &LeaderPair,
    followers: &FollowerPair,
    direction: &AdaptedField,
    step: f64,
) -> Result<f64> {
    let mut plus = followers.clone();
    plus.get_mut(i).axpy(step, direction);
    let mut minus = followers.clone();
    minus.get_mut(i).axpy(-step, direction);
    Ok((eval_j_i(spec, i, leaders, &plus)? - eval_j_i(spec, i, leaders, &minus)?) / (2.0 * step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Subdomain;
    use crate::problem::fixtures::{random_field, random_spec};
    use crate::spde_forward::solve_follower_response;

    fn random_leaders(spec: &ProblemSpec, seed: u64) -> LeaderPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u1 = random_field(*spec.tree(), spec.n_x(), &mut rng, 1.0);
        let u2 = random_field(*spec.tree(), spec.n_x(), &mut rng, 0.5);
        LeaderPair::new(spec, u1, u2).unwrap()
    }

    fn unit_direction(spec: &ProblemSpec, i: Player, seed: u64) -> AdaptedField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_direction(spec, &mut rng);
        let d = d.get(i).clone();
        let n = norm_sq(&d, spec.grid(), None).sqrt();
        d.scaled(1.0 / n)
    }

    #[test]
    fn zero_data_gives_zero_equilibrium() {
        let spec = random_spec(6, 4, 3).homogeneous();
        let v = solve_nash(&spec, &LeaderPair::zeros(&spec)).unwrap();
        assert_eq!(v.norm_sq(&spec), 0.0);
        assert_eq!(
            eval_j_i(&spec, Player::One, &LeaderPair::zeros(&spec), &v).unwrap(),
            0.0
        );
        assert_eq!(eval_j(&spec, &LeaderPair::zeros(&spec)).unwrap(), 0.0);
        assert_eq!(apply_m(&spec, &v).unwrap().norm_sq(&spec), 0.0);
    }

    #[test]
    fn j_i_of_constant_control_matches_closed_form() {
        let spec = random_spec(9, 3, 4).homogeneous();
        let c = 0.7;
        let v1 = AdaptedField::constant(*spec.tree(), spec.n_x(), c);
        let v = FollowerPair::new(&spec, v1, spec.zero_field()).unwrap();
        let y = solve_follower_response(&spec, Player::One, &v.v1).unwrap();
        let y_part = norm_sq(&y, spec.grid(), Some(spec.observation_mask()));
        let h = spec.grid().h();
        let measure = spec.follower_mask(Player::One).count() as f64 * h;
        let expect = 0.5 * spec.beta(Player::One) * c * c * measure * 1.0
            + 0.5 * spec.alpha(Player::One) * y_part;
        let got = eval_j_i(&spec, Player::One, &LeaderPair::zeros(&spec), &v).unwrap();
        assert!((got - expect).abs() < 1e-12 * expect, "{got} {expect}");
    }

    #[test]
    fn leader_cost_of_unit_control() {
        let spec = random_spec(99, 2, 5);
        let u1 = AdaptedField::constant(*spec.tree(), spec.n_x(), 1.0);
        let l = LeaderPair::new(&spec, u1, spec.zero_field()).unwrap();
        let j = eval_j(&spec, &l).unwrap();
        assert!((j - 0.5 * spec.control().measure()).abs() < 0.02, "{j}");
    }

    #[test]
    fn m_reduces_to_beta_without_observation() {
        let spec = random_spec(8, 3, 6);
        let mut data = spec.to_data();
        // observation region between grid points: empty mask
        data.observation = Subdomain::new(0.4, 0.41).unwrap();
        data.control = Subdomain::new(0.3, 0.5).unwrap();
        let spec = ProblemSpec::new(data).unwrap();
        assert_eq!(spec.observation_mask().count(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_direction(&spec, &mut rng);
        let mv = apply_m(&spec, &v).unwrap();
        for i in Player::BOTH {
            let expect = v.get(i).scaled(spec.beta(i));
            for (a, b) in mv.get(i).data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn l_star_is_the_transpose_of_l() {
        let spec = random_spec(7, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_direction(&spec, &mut rng);
        let g = random_field(*spec.tree(), 7, &mut rng, 1.0);
        for i in Player::BOTH {
            let y = solve_follower_response(&spec, i, v.get(i)).unwrap();
            let lhs = inner_product(&y, &g, spec.grid(), None).unwrap();
            let ls = apply_l_star(&spec, &g).unwrap();
            let rhs = inner_product(v.get(i), ls.get(i), spec.grid(), None).unwrap();
            assert!(
                (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0),
                "{lhs} {rhs}"
            );
        }
    }

    #[test]
    fn scaled_operator_is_symmetric_and_positive() {
        let spec = random_spec(6, 4, 8);
        let (rayleigh, defect) = probe_operator(&spec, 6, 3);
        assert!(rayleigh > 0.0);
        assert!(defect < 1e-12, "{defect}");
    }

    #[test]
    fn equilibrium_satisfies_first_order_conditions() {
        let spec = random_spec(8, 5, 9);
        let leaders = random_leaders(&spec, 10);
        let sol = solve_nash_with(&spec, &leaders, &NashOptions::default()).unwrap();
        assert!(sol.diagnostics.relative_residual <= 1e-10);
        let v = sol.followers;
        for i in Player::BOTH {
            let scale = eval_j_i(&spec, i, &leaders, &v).unwrap() + 0.5 * spec.beta(i);
            for k in 0..5 {
                let d = unit_direction(&spec, i, 100 + k);
                let g = directional_derivative(&spec, i, &leaders, &v, &d, 1e-5).unwrap();
                assert!(g.abs() <= 1e-6 * scale, "player {i}: {g} vs {scale}");
            }
            // away from equilibrium the derivative is visible
            let d = unit_direction(&spec, i, 7);
            let mut off = v.clone();
            off.get_mut(i).axpy(0.1, &d);
            let g = directional_derivative(&spec, i, &leaders, &off, &d, 1e-5).unwrap();
            assert!(g.abs() > 1e-3 * scale);
        }
        let res = verify_characterization(&spec, &leaders, &v).unwrap();
        assert!(res[0] <= 1e-8 && res[1] <= 1e-8, "{res:?}");
    }

    #[test]
    fn characterization_residual_is_linear_in_perturbation() {
        let spec = random_spec(6, 4, 11);
        let leaders = random_leaders(&spec, 12);
        let v = solve_nash(&spec, &leaders).unwrap();
        let d = unit_direction(&spec, Player::Two, 5);
        let r = |s: f64| {
            let mut p = v.clone();
            p.v2.axpy(s, &d);
            verify_characterization(&spec, &leaders, &p).unwrap()[1]
        };
        let (r1, r2) = (r(1e-3), r(2e-3));
        assert!(r1 > 1e-6);
        assert!((r2 / r1 - 2.0).abs() < 1e-4, "{r1} {r2}");
    }

    #[test]
    fn equilibrium_is_unique() {
        let spec = random_spec(6, 4, 13);
        let leaders = random_leaders(&spec, 14);
        let a = solve_nash(&spec, &leaders).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let guess = random_direction(&spec, &mut rng);
        let opts = NashOptions {
            initial_guess: Some(guess),
            ..NashOptions::default()
        };
        let b = solve_nash_with(&spec, &leaders, &opts).unwrap().followers;
        let mut diff = a.clone();
        diff.axpy(-1.0, &b);
        assert!(diff.norm_sq(&spec).sqrt() <= 1e-9 * a.norm_sq(&spec).sqrt().max(1.0));
    }

    #[test]
    fn equilibrium_grows_at_most_affinely_in_leaders() {
        let spec = random_spec(6, 4, 15);
        let v0 = solve_nash(&spec, &LeaderPair::zeros(&spec))
            .unwrap()
            .norm_sq(&spec)
            .sqrt();
        let hom = spec.homogeneous();
        let mut bound = v0;
        let mut pairs = vec![];
        for k in 0..50 {
            let l = random_leaders(&spec, 1000 + k);
            // linear part K u on the homogeneous problem
            let ku = solve_nash(&hom, &l).unwrap().norm_sq(&hom).sqrt();
            bound = bound.max(ku / l.norm_sq(&spec).sqrt());
            pairs.push(l);
        }
        for l in pairs.iter().take(10) {
            for s in [1.0, 10.0, 100.0] {
                let ls = l.scaled(s);
                let v = solve_nash(&spec, &ls).unwrap().norm_sq(&spec).sqrt();
                let ratio = v / (1.0 + ls.norm_sq(&spec).sqrt());
                assert!(ratio <= bound * (1.0 + 1e-9), "{ratio} > {bound}");
            }
        }
    }

    #[test]
    fn small_beta_with_unequal_alpha_is_rejected() {
        let spec = random_spec(8, 4, 16);
        // large alpha mismatch, tiny beta: M loses coercivity
        let bad = spec.with_weights([1.0, 1e4], [1e-6, 1e-6]).unwrap();
        let opts = NashOptions {
            probes: 8,
            ..Default::default()
        };
        assert!(matches!(
            solve_nash_with(&bad, &LeaderPair::zeros(&bad), &opts),
            Err(Error::CoercivityViolation { .. })
        ));
        let ok = spec.with_weights([1.0, 1.0], [10.0, 10.0]).unwrap();
        assert!(probe_operator(&ok, 4, 1).0 > 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let spec = random_spec(6, 3, 17);
        let other = random_spec(5, 3, 17);
        assert!(LeaderPair::new(&spec, other.zero_field(), spec.zero_field()).is_err());
        assert!(FollowerPair::new(&spec, spec.zero_field(), other.zero_field()).is_err());
    }
}
