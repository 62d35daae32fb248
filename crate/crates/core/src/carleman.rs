//! Carleman weight functions and the weighted-norm diagnostics built on them.
//!
//! ```text
//! alpha  = (e^{mu eta} - e^{2 mu |eta|}) / (t (T - t))     varphi = e^{mu eta} / (t (T - t))
//! theta  = e^{lambda alpha}
//! ```
//!
//! The barred weights replace `t (T - t)` by `l(t)`, which is frozen at
//! `T^2/4` on `[0, T/2]`, and `rho(t) = e^{-lambda alpha*(t)}` with
//! `alpha*` the spatial minimum of the barred `alpha`. Weight products are
//! formed in log space so that vanishing `theta` never meets a blowing-up
//! power of `varphi` as `0 * inf`.

use crate::error::{invalid, Error, Result};
use crate::grid::{SpatialGrid, Subdomain};
use crate::nullctrl::AdjointState;
use crate::prob_tree::dot;
use crate::problem::{Player, ProblemSpec};

/// `eta(x) = s(x) (L - s(x))` with the Mobius map
/// `s(x) = L x / (x + k (L - x))`, `k = c / (L - c)`, which sends the centre
/// `c` of `O'` to `L/2`. Its only critical point is `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eta {
    length: f64,
    k: f64,
    center: f64,
}

impl Eta {
    fn denom(&self, x: f64) -> f64 {
        x + self.k * (self.length - x)
    }

    fn s(&self, x: f64) -> f64 {
        self.length * x / self.denom(x)
    }

    pub fn value(&self, x: f64) -> f64 {
        let s = self.s(x);
        s * (self.length - s)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let d = self.denom(x);
        let ds = self.k * self.length * self.length / (d * d);
        ds * (self.length - 2.0 * self.s(x))
    }

    /// `|eta|_inf = L^2 / 4`, attained at the centre.
    pub fn sup(&self) -> f64 {
        0.25 * self.length * self.length
    }

    pub fn center(&self) -> f64 {
        self.center
    }
}

pub fn build_eta(grid: &SpatialGrid, o_prime: &Subdomain) -> Result<Eta> {
    let l = grid.length();
    if !(o_prime.lo > 0.0 && o_prime.hi < l && o_prime.lo < o_prime.hi) {
        return invalid(format!(
            "O' = ({}, {}) must satisfy 0 < a < b < {l}",
            o_prime.lo, o_prime.hi
        ));
    }
    let c = 0.5 * (o_prime.lo + o_prime.hi);
    Ok(Eta {
        length: l,
        k: c / (l - c),
        center: c,
    })
}

/// Parameters of the weight functions.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightConfig {
    pub lambda: f64,
    pub mu: f64,
    pub o_prime: Subdomain,
    eta: Eta,
    grid: SpatialGrid,
    horizon: f64,
}

pub const DEFAULT_LAMBDA: f64 = 8.0;
pub const DEFAULT_MU: f64 = 2.0;

impl WeightConfig {
    pub fn new(
        grid: &SpatialGrid,
        horizon: f64,
        lambda: f64,
        mu: f64,
        o_prime: Subdomain,
    ) -> Result<Self> {
        if !(lambda > 1.0 && lambda.is_finite()) {
            return invalid(format!("lambda must exceed 1, got {lambda}"));
        }
        if !(mu > 1.0 && mu.is_finite()) {
            return invalid(format!("mu must exceed 1, got {mu}"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        let eta = build_eta(grid, &o_prime)?;
        Ok(Self {
            lambda,
            mu,
            o_prime,
            eta,
            grid: *grid,
            horizon,
        })
    }

    /// Also requires `O'` to lie inside `O ∩ O_d`.
    pub fn for_spec(spec: &ProblemSpec, lambda: f64, mu: f64, o_prime: Subdomain) -> Result<Self> {
        let inside = |s: &Subdomain| s.lo <= o_prime.lo && o_prime.hi <= s.hi;
        if !(inside(spec.control()) && inside(spec.observation())) {
            return invalid(format!(
                "O' = ({}, {}) must lie inside both the control and the observation region",
                o_prime.lo, o_prime.hi
            ));
        }
        Self::new(spec.grid(), spec.tree().horizon(), lambda, mu, o_prime)
    }

    pub fn eta(&self) -> &Eta {
        &self.eta
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn check_spec(&self, spec: &ProblemSpec) -> Result<()> {
        if spec.grid() != &self.grid || spec.tree().horizon() != self.horizon {
            return invalid("weight configuration was built for a different grid or horizon");
        }
        Ok(())
    }

    /// `2 mu |eta|_inf` exponent.
    fn top(&self) -> f64 {
        (2.0 * self.mu * self.eta.sup()).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub alpha: f64,
    pub varphi: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModifiedWeights {
    pub ell: f64,
    pub alpha_bar: f64,
    pub varphi_bar: f64,
    pub theta_bar: f64,
}

/// `(alpha, varphi, theta)` at `(t, x)`; singular at `t = 0` and `t = T`.
pub fn weights(t: f64, x: f64, cfg: &WeightConfig) -> Result<Weights> {
    let tt = cfg.horizon;
    if !(t > 0.0 && t < tt) {
        return Err(Error::Pole(t));
    }
    Ok(weights_with(t * (tt - t), x, cfg))
}

fn weights_with(denom: f64, x: f64, cfg: &WeightConfig) -> Weights {
    let e = (cfg.mu * cfg.eta.value(x)).exp();
    let alpha = (e - cfg.top()) / denom;
    Weights {
        alpha,
        varphi: e / denom,
        theta: (cfg.lambda * alpha).exp(),
    }
}

/// `l(t)`: `T^2/4` on `[0, T/2]`, `t (T - t)` on `[T/2, T)`.
pub fn ell(t: f64, horizon: f64) -> Result<f64> {
    if !(t >= 0.0 && t < horizon) {
        return Err(Error::Pole(t));
    }
    Ok(if t <= 0.5 * horizon {
        0.25 * horizon * horizon
    } else {
        t * (horizon - t)
    })
}

pub fn modified_weights(t: f64, x: f64, cfg: &WeightConfig) -> Result<ModifiedWeights> {
    let l = ell(t, cfg.horizon)?;
    let w = weights_with(l, x, cfg);
    Ok(ModifiedWeights {
        ell: l,
        alpha_bar: w.alpha,
        varphi_bar: w.varphi,
        theta_bar: w.theta,
    })
}

/// `(alpha*(t), varphi*(t))`: min of the barred `alpha` and max of the
/// barred `varphi` over the grid points of the closed interval.
pub fn star_weights(t: f64, cfg: &WeightConfig) -> Result<(f64, f64)> {
    let l = ell(t, cfg.horizon)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in cfg.grid.closure_points() {
        let w = weights_with(l, x, cfg);
        lo = lo.min(w.alpha);
        hi = hi.max(w.varphi);
    }
    Ok((lo, hi))
}

/// `ln rho(t) = -lambda alpha*(t)`.
pub fn log_rho(t: f64, cfg: &WeightConfig) -> Result<f64> {
    Ok(-cfg.lambda * star_weights(t, cfg)?.0)
}

/// `rho(t) = e^{-lambda alpha*(t)}`, overflowing to `+inf` near `T`.
pub fn rho(t: f64, cfg: &WeightConfig) -> Result<f64> {
    Ok(log_rho(t, cfg)?.exp())
}

/// Largest finite log-contribution before the norm is reported as `+inf`.
const LOG_OVERFLOW: f64 = 700.0;

/// `E int int rho^2 |y_{i,d}|^2` over `(0,T) x O_d`, left-endpoint in
/// time. Returns `+inf` once a level's contribution overflows.
pub fn weighted_target_norm(spec: &ProblemSpec, cfg: &WeightConfig, i: Player) -> Result<f64> {
    cfg.check_spec(spec)?;
    let tree = spec.tree();
    let n_x = spec.n_x();
    let mask = spec.observation_mask();
    let target = spec.target(i);
    let mut total = 0.0;
    for level in 0..tree.n_steps() {
        let sum: f64 = target
            .level(level)
            .chunks(n_x)
            .map(|c| mask.masked_dot(c, c))
            .sum();
        if sum == 0.0 {
            continue;
        }
        let base = tree.dt() * spec.grid().h() * tree.level_prob(level) * sum;
        let log_term = 2.0 * log_rho(tree.time(level), cfg)? + base.ln();
        if log_term > LOG_OVERFLOW {
            return Ok(f64::INFINITY);
        }
        total += log_term.exp();
    }
    Ok(total)
}

/// `C^1` cutoff: 1 on `[0, T/2]`, 0 on `[3T/4, T]`, cubic Hermite between.
pub fn cutoff_kappa(t: f64, horizon: f64) -> f64 {
    let s = (t - 0.5 * horizon) / (0.25 * horizon);
    if s <= 0.0 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        1.0 - 3.0 * s * s + 2.0 * s * s * s
    }
}

pub fn cutoff_kappa_derivative(t: f64, horizon: f64) -> f64 {
    let q = 0.25 * horizon;
    let s = (t - 0.5 * horizon) / q;
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        (-6.0 * s + 6.0 * s * s) / q
    }
}

/// A weighted-norm ratio, or why it could not be formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Value {
        numerator: f64,
        denominator: f64,
        ratio: f64,
    },
    /// Both sides vanish.
    NotApplicable,
    /// Nonzero numerator over a zero denominator.
    Violation { numerator: f64 },
}

impl Ratio {
    fn from_parts(numerator: f64, denominator: f64) -> Self {
        if denominator > 0.0 {
            Ratio::Value {
                numerator,
                denominator,
                ratio: numerator / denominator,
            }
        } else if numerator == 0.0 {
            Ratio::NotApplicable
        } else {
            Ratio::Violation { numerator }
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Ratio::Value { ratio, .. } => Some(*ratio),
            _ => None,
        }
    }
}

/// Midpoint of the time step that starts at `level`.
fn midpoint(spec: &ProblemSpec, level: usize) -> f64 {
    spec.tree().time(level) + 0.5 * spec.tree().dt()
}

/// `[E|phi(0)|^2 + sum_i E int rho^{-2} |psi^i|^2] /
///  [E int_{Q0} phi^2 + E int_Q Phi^2]`.
pub fn observability_ratio(
    spec: &ProblemSpec,
    cfg: &WeightConfig,
    adjoint: &AdjointState,
) -> Result<Ratio> {
    cfg.check_spec(spec)?;
    let tree = spec.tree();
    let grid = spec.grid();
    let n_x = spec.n_x();
    let control = spec.control_mask();
    let mut num = grid.norm_sq(adjoint.phi.initial());
    let mut den = 0.0;
    for level in 0..tree.n_steps() {
        let w = tree.dt() * grid.h() * tree.level_prob(level);
        let inv_rho_sq = (-2.0 * log_rho(midpoint(spec, level), cfg)?).exp();
        let psi: f64 = adjoint
            .psi
            .iter()
            .map(|p| dot(p.level(level), p.level(level)))
            .sum();
        num += w * inv_rho_sq * psi;
        let phi: f64 = adjoint
            .phi
            .drift_dual
            .level(level)
            .chunks(n_x)
            .map(|c| control.masked_dot(c, c))
            .sum();
        let big: f64 = dot(
            adjoint.phi.big_z.level(level),
            adjoint.phi.big_z.level(level),
        );
        den += w * (phi + big);
    }
    Ok(Ratio::from_parts(num, den))
}

/// Left over right side of the improved Carleman estimate at the configured
/// `lambda`, `mu`, with `h = alpha1 psi^1 + alpha2 psi^2`.
pub fn carleman_ratio(
    spec: &ProblemSpec,
    cfg: &WeightConfig,
    adjoint: &AdjointState,
) -> Result<Ratio> {
    cfg.check_spec(spec)?;
    let tree = spec.tree();
    let grid = spec.grid();
    let n_x = spec.n_x();
    let lam = cfg.lambda;
    let control = spec.control_mask().bits();
    let xs: Vec<f64> = grid.points().collect();
    let (a1, a2) = (spec.alpha(Player::One), spec.alpha(Player::Two));

    let mut left = grid.norm_sq(adjoint.phi.initial());
    let mut right = 0.0;
    let mut grad_phi = vec![0.0; n_x];
    let mut grad_h = vec![0.0; n_x];
    let mut h = vec![0.0; n_x];
    for level in 0..tree.n_steps() {
        let t = midpoint(spec, level);
        let tt = t * (cfg.horizon - t);
        let l = ell(t, cfg.horizon)?;
        // per-point log weights
        let lw: Vec<(f64, f64, f64, f64)> = xs
            .iter()
            .map(|&x| {
                let w = weights_with(tt, x, cfg);
                let b = weights_with(l, x, cfg);
                (
                    2.0 * lam * b.alpha,
                    b.varphi.ln(),
                    2.0 * lam * w.alpha,
                    w.varphi.ln(),
                )
            })
            .collect();
        let qw = tree.dt() * grid.h() * tree.level_prob(level);
        let range = tree.level_range(level);
        for node in range {
            let phi = adjoint.phi.drift_dual.node(node);
            let big = adjoint.phi.big_z.node(node);
            let (p1, p2) = (adjoint.psi[0].node(node), adjoint.psi[1].node(node));
            for k in 0..n_x {
                h[k] = a1 * p1[k] + a2 * p2[k];
            }
            grid.gradient_into(phi, &mut grad_phi);
            grid.gradient_into(&h, &mut grad_h);
            let mut l_sum = 0.0;
            let mut r_sum = 0.0;
            for k in 0..n_x {
                let (tb, vb, th, vp) = lw[k];
                l_sum += (tb + 3.0 * vb).exp() * phi[k] * phi[k]
                    + (tb + vb).exp() * grad_phi[k] * grad_phi[k]
                    + (th + 3.0 * vp).exp() * h[k] * h[k]
                    + (th + vp).exp() * grad_h[k] * grad_h[k];
                if control[k] {
                    r_sum += (7.0 * lam.ln() + th + 7.0 * vp).exp() * phi[k] * phi[k];
                }
                r_sum += (5.0 * lam.ln() + th + 5.0 * vp).exp() * big[k] * big[k];
            }
            left += qw * l_sum;
            right += qw * r_sum;
        }
    }
    Ok(Ratio::from_parts(left, right))
}
