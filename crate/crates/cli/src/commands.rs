//! Scenario runners. Each returns the tables it produced; writing them out
//! is left to the caller.

use hierctl_core::carleman::{carleman_ratio, observability_ratio, Ratio, WeightConfig};
use hierctl_core::nash::{
    directional_derivative, eval_j, eval_j_i, solve_nash_with, verify_characterization, LeaderPair,
    NashOptions,
};
use hierctl_core::nullctrl::{
    control_cost_report, solve_adjoint_system, solve_null_control_from, solve_optimality_system,
    PenaltyConfig,
};
use hierctl_core::oracle::{
    oracle_adjoint, oracle_nash, oracle_null_control, oracle_optimality, relative_difference,
};
use hierctl_core::prob_tree::norm_sq;
use hierctl_core::{AdaptedField, FollowerPair, LeafField, Player, ProblemSpec, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::{Config, LeaderKind, TerminalLaw};

/// Random streams derived from the run seed.
const LEADER_STREAM: u64 = 1;
const DIRECTION_STREAM: u64 = 2;
const SAMPLE_STREAM_BASE: u64 = 1 << 32;

/// One CSV report.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &'static str, header: &[&'static str]) -> Self {
        Self {
            name,
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Column `col` of every row parsed back as numbers.
    pub fn column(&self, col: &str) -> Vec<f64> {
        let k = self
            .header
            .iter()
            .position(|h| *h == col)
            .expect("known column");
        self.rows
            .iter()
            .map(|r| r[k].parse().unwrap_or(f64::NAN))
            .collect()
    }
}

/// Shortest round-trip representation, so equal values print equally.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

fn gaussian_field(spec: &ProblemSpec, rng: &mut ChaCha8Rng, scale: f64) -> AdaptedField {
    let mut data = gaussian(spec.tree().node_count() * spec.n_x(), rng);
    data.iter_mut().for_each(|v| *v *= scale);
    AdaptedField::from_data(*spec.tree(), spec.n_x(), data).expect("sized")
}

/// Terminal adjoint data for Monte Carlo sample `k`.
pub fn sample_terminal(spec: &ProblemSpec, seed: u64, k: usize, law: TerminalLaw) -> LeafField {
    let mut r = rng(seed, SAMPLE_STREAM_BASE + k as u64);
    let tree = *spec.tree();
    let n_x = spec.n_x();
    let data = match law {
        TerminalLaw::LeafNoise => gaussian(tree.leaf_count() * n_x, &mut r),
        TerminalLaw::Chaos => {
            let grid = spec.grid();
            let mut field = || -> Vec<f64> {
                let g = gaussian(n_x, &mut r);
                grid.points()
                    .map(|x| {
                        g.iter()
                            .enumerate()
                            .map(|(k, g)| {
                                let k = (k + 1) as f64;
                                g / k * (k * std::f64::consts::PI * x / grid.length()).sin()
                            })
                            .sum()
                    })
                    .collect()
            };
            let (a, b, c) = (field(), field(), field());
            let mut data = Vec::with_capacity(tree.leaf_count() * n_x);
            for node in tree.level_range(tree.n_steps()) {
                let xi = tree.brownian_value(node) / tree.horizon().sqrt();
                let h2 = (xi * xi - 1.0) / std::f64::consts::SQRT_2;
                data.extend((0..n_x).map(|j| a[j] + b[j] * xi + c[j] * h2));
            }
            data
        }
    };
    LeafField::from_data(tree, n_x, data).expect("sized")
}

/// Leaders fed to the followers' game.
pub fn configured_leaders(spec: &ProblemSpec, cfg: &Config) -> LeaderPair {
    match cfg.game.leaders {
        LeaderKind::Zero => LeaderPair::zeros(spec),
        LeaderKind::Random => {
            let mut r = rng(cfg.run.seed, LEADER_STREAM);
            let a = cfg.game.leader_amplitude;
            let u1 = gaussian_field(spec, &mut r, a);
            let u2 = gaussian_field(spec, &mut r, a);
            LeaderPair::new(spec, u1, u2).expect("sized")
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub tables: Vec<Table>,
    /// Headline numbers echoed into the manifest.
    pub summary: serde_json::Value,
    /// Failed oracle checks.
    pub mismatches: Vec<String>,
}

pub fn nash(spec: &ProblemSpec, cfg: &Config) -> Result<Outcome> {
    let leaders = configured_leaders(spec, cfg);
    let opts = NashOptions {
        tol: cfg.solver.nash_tol,
        max_iters: cfg.solver.nash_max_iters,
        seed: cfg.run.seed,
        ..NashOptions::default()
    };
    let sol = solve_nash_with(spec, &leaders, &opts)?;
    let v = &sol.followers;
    let chars = verify_characterization(spec, &leaders, v)?;

    let mut dir_rng = rng(cfg.run.seed, DIRECTION_STREAM);
    let step = 1e-3;
    let mut players = Table::new(
        "nash.csv",
        &[
            "player",
            "control_norm_sq",
            "cost",
            "characterization_residual",
            "max_abs_directional_derivative",
            "functional_scale",
            "gradient_residual",
        ],
    );
    let mut worst: f64 = 0.0;
    for i in Player::BOTH {
        let j = eval_j_i(spec, i, &leaders, v)?;
        let mut max_d: f64 = 0.0;
        for _ in 0..cfg.solver.fd_directions {
            let mut d = gaussian_field(spec, &mut dir_rng, 1.0);
            d.restrict(spec.follower_mask(i));
            d.clear_leaves();
            let n = norm_sq(&d, spec.grid(), None).sqrt();
            if n == 0.0 {
                continue;
            }
            d.scale(1.0 / n);
            max_d = max_d.max(directional_derivative(spec, i, &leaders, v, &d, step)?.abs());
        }
        // size of J_i along a unit direction
        let scale = j + 0.5 * spec.beta(i);
        worst = worst.max(max_d / scale);
        players.push(vec![
            i.to_string(),
            num(norm_sq(v.get(i), spec.grid(), None)),
            num(j),
            num(chars[i.index()]),
            num(max_d),
            num(scale),
            num(max_d / scale),
        ]);
    }
    let d = &sol.diagnostics;
    let leader_cost = eval_j(spec, &leaders)?;
    let mut solver = Table::new(
        "nash_solver.csv",
        &[
            "solver",
            "iterations",
            "relative_residual",
            "min_rayleigh",
            "symmetry_defect",
            "leader_cost",
        ],
    );
    solver.push(vec![
        d.solver.to_string(),
        d.iterations.to_string(),
        num(d.relative_residual),
        num(d.min_rayleigh),
        num(d.symmetry_defect),
        num(leader_cost),
    ]);
    let mut history = Table::new("nash_residuals.csv", &["iteration", "residual"]);
    for (k, r) in d.residual_history.iter().enumerate() {
        history.push(vec![k.to_string(), num(*r)]);
    }
    Ok(Outcome {
        tables: vec![players, solver, history],
        summary: serde_json::json!({
            "solver": d.solver,
            "iterations": d.iterations,
            "relative_residual": d.relative_residual,
            "characterization_residuals": chars,
            "max_gradient_residual": worst,
        }),
        mismatches: Vec::new(),
    })
}

pub fn null_control(
    spec: &ProblemSpec,
    cfg: &Config,
    penalty: &PenaltyConfig,
    weights: &WeightConfig,
) -> Result<Outcome> {
    let mut table = Table::new(
        "null_control.csv",
        &[
            "eps",
            "terminal_norm_sq",
            "terminal_over_eps_sq",
            "phi_t_norm_sq",
            "u1_cost",
            "u2_cost",
            "control_norm_sq",
            "initial_energy",
            "weighted_target1",
            "weighted_target2",
            "cost_bound_ratio",
            "identity_residual",
            "cg_iterations",
        ],
    );
    let mut warm: Option<LeafField> = None;
    for &eps in &cfg.solver.eps {
        let sol = solve_null_control_from(spec, &penalty.with_eps(eps), warm.as_ref())?;
        let d = &sol.diagnostics;
        let cost = control_cost_report(spec, &sol.leaders, &sol.phi_t, weights)?;
        table.push(vec![
            num(eps),
            num(d.terminal_norm_sq),
            num(d.terminal_norm_sq / (eps * eps)),
            num(d.phi_t_norm_sq),
            num(norm_sq(
                &sol.leaders.u1,
                spec.grid(),
                Some(spec.control_mask()),
            )),
            num(norm_sq(&sol.leaders.u2, spec.grid(), None)),
            num(cost.control_norm_sq),
            num(cost.initial_energy),
            num(cost.weighted_targets[0]),
            num(cost.weighted_targets[1]),
            opt(cost.ratio),
            num(d.identity_residual),
            d.cg_iterations.to_string(),
        ]);
        warm = Some(sol.phi_t);
    }
    let summary = serde_json::json!({
        "eps": cfg.solver.eps,
        "terminal_norm_sq": table.column("terminal_norm_sq"),
        "cost_bound_ratio": table.column("cost_bound_ratio"),
    });
    Ok(Outcome {
        tables: vec![table],
        summary,
        mismatches: Vec::new(),
    })
}

/// `(numerator, denominator, ratio)` columns of a [`Ratio`].
fn ratio_cells(r: &Ratio) -> [String; 3] {
    match *r {
        Ratio::Value {
            numerator,
            denominator,
            ratio,
        } => [num(numerator), num(denominator), num(ratio)],
        Ratio::NotApplicable => [num(0.0), num(0.0), String::new()],
        Ratio::Violation { numerator } => [num(numerator), num(0.0), num(f64::INFINITY)],
    }
}

type RatioFn =
    fn(&ProblemSpec, &WeightConfig, &hierctl_core::nullctrl::AdjointState) -> Result<Ratio>;

fn monte_carlo(
    spec: &ProblemSpec,
    cfg: &Config,
    penalty: &PenaltyConfig,
    weights: &WeightConfig,
    ratio: RatioFn,
    [prefix, summary_name, constant]: [&'static str; 3],
) -> Result<Outcome> {
    let ratios: Vec<Ratio> = (0..cfg.run.samples)
        .into_par_iter()
        .map(|k| {
            let phi_t = sample_terminal(spec, cfg.run.seed, k, cfg.run.terminal_law);
            let adjoint = solve_adjoint_system(spec, &phi_t, penalty)?;
            ratio(spec, weights, &adjoint)
        })
        .collect::<Result<_>>()?;
    let mut samples = Table::new(prefix, &["sample", "numerator", "denominator", "ratio"]);
    for (k, r) in ratios.iter().enumerate() {
        let [n, d, q] = ratio_cells(r);
        samples.push(vec![k.to_string(), n, d, q]);
    }
    let values: Vec<f64> = ratios
        .iter()
        .map(|r| match r {
            Ratio::Value { ratio, .. } => *ratio,
            Ratio::Violation { .. } => f64::INFINITY,
            Ratio::NotApplicable => f64::NAN,
        })
        .collect();
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let all_finite = finite.len() == values.len();
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    let c_hat = if all_finite && !finite.is_empty() {
        Some(max)
    } else {
        None
    };
    let mut summary = Table::new(
        summary_name,
        &[
            "samples",
            "finite_samples",
            constant,
            "min_ratio",
            "mean_ratio",
            "lambda",
            "mu",
        ],
    );
    summary.push(vec![
        values.len().to_string(),
        finite.len().to_string(),
        opt(c_hat),
        opt(Some(min).filter(|v| v.is_finite())),
        opt((!finite.is_empty()).then_some(mean)),
        num(weights.lambda),
        num(weights.mu),
    ]);
    Ok(Outcome {
        tables: vec![samples, summary],
        summary: {
            let mut m = serde_json::Map::new();
            m.insert("samples".into(), values.len().into());
            m.insert("finite_samples".into(), finite.len().into());
            m.insert(constant.into(), c_hat.into());
            m.into()
        },
        mismatches: Vec::new(),
    })
}

pub fn observability(
    spec: &ProblemSpec,
    cfg: &Config,
    penalty: &PenaltyConfig,
    weights: &WeightConfig,
) -> Result<Outcome> {
    monte_carlo(
        spec,
        cfg,
        penalty,
        weights,
        observability_ratio,
        ["observability.csv", "observability_summary.csv", "c_obs"],
    )
}

pub fn carleman_check(
    spec: &ProblemSpec,
    cfg: &Config,
    penalty: &PenaltyConfig,
    weights: &WeightConfig,
) -> Result<Outcome> {
    monte_carlo(
        spec,
        cfg,
        penalty,
        weights,
        carleman_ratio,
        ["carleman.csv", "carleman_summary.csv", "c_carleman"],
    )
}

fn flat(p: &FollowerPair) -> Vec<f64> {
    let mut v = p.v1.data().to_vec();
    v.extend_from_slice(p.v2.data());
    v
}

struct Checks {
    table: Table,
    failed: Vec<String>,
}

impl Checks {
    fn at_most(&mut self, name: String, value: f64, tol: f64) {
        self.record(name, value, tol, value <= tol);
    }

    fn at_least(&mut self, name: String, value: f64, tol: f64) {
        self.record(name, value, tol, value >= tol);
    }

    fn record(&mut self, name: String, value: f64, tol: f64, pass: bool) {
        if !pass {
            self.failed
                .push(format!("{name} = {value:e} (tolerance {tol:e})"));
        }
        self.table
            .push(vec![name, num(value), num(tol), pass.to_string()]);
    }
}

/// Every iterative solver against its dense counterpart.
pub fn oracle_check(spec: &ProblemSpec, cfg: &Config, penalty: &PenaltyConfig) -> Result<Outcome> {
    const AGREE: f64 = 1e-8;
    let mut c = Checks {
        table: Table::new("oracle_check.csv", &["check", "value", "tolerance", "pass"]),
        failed: Vec::new(),
    };

    let leaders = match cfg.game.leaders {
        // zero leaders would make the comparison vacuous on zero data
        LeaderKind::Zero => configured_leaders(
            spec,
            &Config {
                game: crate::config::GameSection {
                    leaders: LeaderKind::Random,
                    ..cfg.game.clone()
                },
                ..cfg.clone()
            },
        ),
        LeaderKind::Random => configured_leaders(spec, cfg),
    };
    let dense = oracle_nash(spec, &leaders)?;
    let opts = NashOptions {
        tol: cfg.solver.nash_tol,
        max_iters: cfg.solver.nash_max_iters,
        seed: cfg.run.seed,
        ..NashOptions::default()
    };
    let iterative = solve_nash_with(spec, &leaders, &opts)?;
    c.at_most(
        "nash_followers".into(),
        relative_difference(&flat(&iterative.followers), &flat(&dense.followers)),
        AGREE,
    );
    c.at_least(
        "nash_min_symmetric_eigenvalue".into(),
        dense.min_symmetric_eigenvalue,
        0.0,
    );

    let dense = oracle_optimality(spec, &leaders)?;
    let state = solve_optimality_system(spec, &leaders, penalty)?;
    c.at_most(
        "optimality_state".into(),
        relative_difference(state.y.data(), dense.y.data()),
        AGREE,
    );
    c.at_most(
        "optimality_followers".into(),
        relative_difference(&flat(&state.followers), &flat(&dense.followers)),
        AGREE,
    );

    let phi_t = sample_terminal(spec, cfg.run.seed, 0, TerminalLaw::LeafNoise);
    let dense = oracle_adjoint(spec, &phi_t)?;
    let adj = solve_adjoint_system(spec, &phi_t, penalty)?;
    c.at_most(
        "adjoint_drift".into(),
        relative_difference(adj.phi.drift_dual.data(), dense.drift_dual.data()),
        AGREE,
    );
    c.at_most(
        "adjoint_diffusion".into(),
        relative_difference(adj.phi.big_z.data(), dense.big_phi.data()),
        AGREE,
    );
    c.at_most(
        "adjoint_initial".into(),
        relative_difference(adj.phi.initial(), &dense.initial),
        AGREE,
    );
    for i in 0..2 {
        c.at_most(
            format!("adjoint_psi{}", i + 1),
            relative_difference(adj.psi[i].data(), dense.psi[i].data()),
            AGREE,
        );
    }

    let mut gramian_done = false;
    for &eps in &cfg.solver.eps {
        let dense = oracle_null_control(spec, eps)?;
        if !gramian_done {
            c.at_most("gramian_asymmetry".into(), dense.gramian_asymmetry, 1e-12);
            c.at_least(
                "gramian_min_eigenvalue".into(),
                dense.gramian_min_eigenvalue,
                -1e-12,
            );
            gramian_done = true;
        }
        let sol = solve_null_control_from(spec, &penalty.with_eps(eps), None)?;
        let tag = num(eps);
        c.at_most(
            format!("null_control_phi_t[eps={tag}]"),
            relative_difference(sol.phi_t.data(), dense.phi_t.data()),
            AGREE,
        );
        c.at_most(
            format!("null_control_u1[eps={tag}]"),
            relative_difference(sol.leaders.u1.data(), dense.leaders.u1.data()),
            AGREE,
        );
        c.at_most(
            format!("null_control_u2[eps={tag}]"),
            relative_difference(sol.leaders.u2.data(), dense.leaders.u2.data()),
            AGREE,
        );
        c.at_most(
            format!("null_control_terminal[eps={tag}]"),
            relative_difference(sol.state.terminal().data(), dense.terminal.data()),
            AGREE,
        );
        c.at_most(
            format!("dense_identity[eps={tag}]"),
            dense.identity_residual,
            1e-12,
        );
    }
    let summary = serde_json::json!({
        "checks": c.table.rows.len(),
        "failed": c.failed,
    });
    Ok(Outcome {
        tables: vec![c.table],
        summary,
        mismatches: c.failed,
    })
}
