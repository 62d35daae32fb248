//! Run configuration: a TOML file with the sections `problem`, `game`,
//! `weights`, `solver` and `run`. Every key is optional and falls back to
//! the bundled default; unknown keys are rejected.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use hierctl_core::carleman::WeightConfig;
use hierctl_core::nullctrl::PenaltyConfig;
use hierctl_core::{
    AdaptedField, Coefficients, ProblemData, ProblemSpec, SpatialGrid, Subdomain, TreeTopology,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Default configuration shipped with the binary.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");
/// Smallest instance the dense oracles accept comfortably.
pub const TINY_CONFIG: &str = include_str!("../configs/tiny.toml");

#[derive(Debug, thiserror::Error)]
#[error("{origin}: {message}")]
pub struct ConfigError {
    /// `file:line`, `file` or `--flag`.
    pub origin: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialKind {
    Zero,
    Sine,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeaderKind {
    Zero,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    /// Interior grid points.
    pub nx: usize,
    /// Time steps; the tree has `2^nt` leaves.
    pub nt: usize,
    pub horizon: f64,
    pub length: f64,
    /// Constant coefficients of `a1 y + b1 y_x` (drift) and `a2 y + b2 y_x` (diffusion).
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    /// Leader region `O`.
    pub control: [f64; 2],
    pub follower1: [f64; 2],
    pub follower2: [f64; 2],
    /// Observation region `O_d`, shared by both followers.
    pub observation: [f64; 2],
    pub y0: InitialKind,
    pub y0_amplitude: f64,
    /// Number of sine modes in a random initial state.
    pub y0_modes: usize,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            nx: 16,
            nt: 10,
            horizon: 1.0,
            length: 1.0,
            a1: 1.0,
            a2: 0.5,
            b1: 0.2,
            b2: 0.1,
            control: [0.3, 0.7],
            follower1: [0.1, 0.3],
            follower2: [0.7, 0.9],
            observation: [0.4, 0.6],
            y0: InitialKind::Random,
            y0_amplitude: 1.0,
            y0_modes: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameSection {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Peak of the target bumps `y_{i,d}`; zero switches a target off.
    pub target1_amplitude: f64,
    pub target2_amplitude: f64,
    /// Leaders fed to `nash`.
    pub leaders: LeaderKind,
    pub leader_amplitude: f64,
}

impl Default for GameSection {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            beta1: 50.0,
            beta2: 50.0,
            target1_amplitude: 1.0,
            target2_amplitude: -0.5,
            leaders: LeaderKind::Random,
            leader_amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub lambda: f64,
    pub mu: f64,
    /// Subregion `O'` where the weight profile peaks.
    pub o_prime: [f64; 2],
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self {
            lambda: hierctl_core::carleman::DEFAULT_LAMBDA,
            mu: hierctl_core::carleman::DEFAULT_MU,
            o_prime: [0.45, 0.55],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    /// Penalties swept by `null-control`.
    pub eps: Vec<f64>,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    /// Initial Picard damping in (0, 1].
    pub damping: f64,
    pub nash_tol: f64,
    pub nash_max_iters: usize,
    /// Random directions for the finite-difference check in `nash`.
    pub fd_directions: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let p = PenaltyConfig::default();
        Self {
            eps: vec![1e-1, 1e-2, 1e-3],
            cg_tol: p.cg_tol,
            cg_max_iters: p.cg_max_iters,
            picard_tol: p.picard_tol,
            picard_max_iters: p.picard_max_iters,
            damping: p.damping,
            nash_tol: 1e-12,
            nash_max_iters: 1000,
            fd_directions: 10,
        }
    }
}

/// Law of the random terminal data `phi_T` in Monte Carlo runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalLaw {
    /// `a(x) + b(x) W_T / sqrt(T) + c(x) (W_T^2 / T - 1) / sqrt(2)` where
    /// `a, b, c` are independent sine series with `N(0, 1/k^2)`
    /// coefficients. The law does not depend on the number of time steps.
    Chaos,
    /// Independent standard normal value at every leaf and grid point.
    LeafNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Monte Carlo samples for `observability` and `carleman-check`.
    pub samples: usize,
    pub terminal_law: TerminalLaw,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 100,
            terminal_law: TerminalLaw::Chaos,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub problem: ProblemSection,
    pub game: GameSection,
    pub weights: WeightsSection,
    pub solver: SolverSection,
    pub run: RunSection,
}

/// Command-line values that replace config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub nx: Option<usize>,
    pub nt: Option<usize>,
    pub eps: Option<Vec<f64>>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub threads: Option<usize>,
}

/// A parsed config together with what is needed to point errors at lines.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: Config,
    source: String,
    name: String,
    /// Keys (`section.key`) set from the command line.
    overridden: BTreeSet<&'static str>,
}

fn line_of_offset(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// Line of `key` inside `[section]`, if the file sets it.
fn key_line(source: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl LoadedConfig {
    pub fn parse(source: &str, name: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(source).map_err(|e| ConfigError {
            origin: match e.span() {
                Some(span) => format!("{name}:{}", line_of_offset(source, span.start)),
                None => name.to_string(),
            },
            message: e.message().trim().to_string(),
        })?;
        Ok(Self {
            config,
            source: source.to_string(),
            name: name.to_string(),
            overridden: BTreeSet::new(),
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let name = path.display().to_string();
        let source = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: name.clone(),
            message: e.to_string(),
        })?;
        Self::parse(&source, &name)
    }

    pub fn bundled_default() -> Self {
        Self::parse(DEFAULT_CONFIG, "default.toml").expect("bundled default config parses")
    }

    pub fn apply(&mut self, o: &Overrides) {
        let c = &mut self.config;
        let mut set = |key: &'static str, hit: bool| {
            if hit {
                self.overridden.insert(key);
            }
        };
        macro_rules! take {
            ($field:expr, $value:expr, $key:literal) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                    set($key, true);
                }
            };
        }
        take!(c.run.seed, o.seed, "run.seed");
        take!(c.problem.nx, o.nx, "problem.nx");
        take!(c.problem.nt, o.nt, "problem.nt");
        take!(c.solver.eps, o.eps, "solver.eps");
        take!(c.weights.lambda, o.lambda, "weights.lambda");
        take!(c.weights.mu, o.mu, "weights.mu");
        take!(c.game.beta1, o.beta1, "game.beta1");
        take!(c.game.beta2, o.beta2, "game.beta2");
        take!(c.game.alpha1, o.alpha1, "game.alpha1");
        take!(c.game.alpha2, o.alpha2, "game.alpha2");
        take!(c.run.threads, o.threads, "run.threads");
    }

    /// Error located at `section.key`.
    fn error_at(&self, key: &str, message: impl Into<String>) -> ConfigError {
        let origin = if self.overridden.contains(key) {
            format!(
                "--{}",
                key.split('.').nth(1).unwrap_or(key).replace('_', "-")
            )
        } else {
            let (section, k) = key.split_once('.').unwrap_or((key, ""));
            match key_line(&self.source, section, k) {
                Some(line) => format!("{}:{line}", self.name),
                None => format!("{} (default {key})", self.name),
            }
        };
        ConfigError {
            origin,
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        let p = &c.problem;
        let positive = |key: &str, v: f64| -> Result<(), ConfigError> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(self.error_at(key, format!("must be positive and finite, got {v}")))
            }
        };
        if p.nx == 0 {
            return Err(self.error_at("problem.nx", "needs at least one interior point"));
        }
        if p.nt == 0 || p.nt > 24 {
            return Err(self.error_at("problem.nt", format!("must lie in 1..=24, got {}", p.nt)));
        }
        positive("problem.horizon", p.horizon)?;
        positive("problem.length", p.length)?;
        for (key, v) in [
            ("problem.a1", p.a1),
            ("problem.a2", p.a2),
            ("problem.b1", p.b1),
            ("problem.b2", p.b2),
        ] {
            if !v.is_finite() {
                return Err(self.error_at(key, "must be finite"));
            }
        }
        let interval = |key: &str, iv: [f64; 2]| -> Result<Subdomain, ConfigError> {
            if !(0.0 <= iv[0] && iv[0] < iv[1] && iv[1] <= p.length) {
                return Err(self.error_at(
                    key,
                    format!(
                        "interval ({}, {}) must satisfy 0 <= lo < hi <= length = {}",
                        iv[0], iv[1], p.length
                    ),
                ));
            }
            Subdomain::new(iv[0], iv[1]).map_err(|e| self.error_at(key, e.to_string()))
        };
        let control = interval("problem.control", p.control)?;
        interval("problem.follower1", p.follower1)?;
        interval("problem.follower2", p.follower2)?;
        let observation = interval("problem.observation", p.observation)?;
        if !observation.intersects(&control) {
            return Err(self.error_at(
                "problem.observation",
                "observation region must intersect the control region",
            ));
        }
        if !(p.y0_amplitude.is_finite()) {
            return Err(self.error_at("problem.y0_amplitude", "must be finite"));
        }
        if p.y0 != InitialKind::Zero && p.y0_modes == 0 {
            return Err(self.error_at("problem.y0_modes", "needs at least one mode"));
        }

        let g = &c.game;
        positive("game.alpha1", g.alpha1)?;
        positive("game.alpha2", g.alpha2)?;
        positive("game.beta1", g.beta1)?;
        positive("game.beta2", g.beta2)?;
        for (key, v) in [
            ("game.target1_amplitude", g.target1_amplitude),
            ("game.target2_amplitude", g.target2_amplitude),
            ("game.leader_amplitude", g.leader_amplitude),
        ] {
            if !v.is_finite() {
                return Err(self.error_at(key, "must be finite"));
            }
        }

        let w = &c.weights;
        positive("weights.lambda", w.lambda)?;
        positive("weights.mu", w.mu)?;
        let o_prime = interval("weights.o_prime", w.o_prime)?;
        if !(o_prime.lo > 0.0 && o_prime.hi < p.length) {
            return Err(self.error_at("weights.o_prime", "must lie strictly inside the domain"));
        }
        let inside = |outer: &Subdomain| outer.lo <= o_prime.lo && o_prime.hi <= outer.hi;
        if !inside(&control) || !inside(&observation) {
            return Err(self.error_at(
                "weights.o_prime",
                "must be contained in both the control and observation regions",
            ));
        }

        let s = &c.solver;
        if s.eps.is_empty() {
            return Err(self.error_at("solver.eps", "needs at least one penalty"));
        }
        for &e in &s.eps {
            positive("solver.eps", e)?;
        }
        positive("solver.cg_tol", s.cg_tol)?;
        positive("solver.picard_tol", s.picard_tol)?;
        positive("solver.nash_tol", s.nash_tol)?;
        if !(s.damping > 0.0 && s.damping <= 1.0) {
            return Err(self.error_at(
                "solver.damping",
                format!("must lie in (0, 1], got {}", s.damping),
            ));
        }
        for (key, v) in [
            ("solver.cg_max_iters", s.cg_max_iters),
            ("solver.picard_max_iters", s.picard_max_iters),
            ("solver.nash_max_iters", s.nash_max_iters),
        ] {
            if v == 0 {
                return Err(self.error_at(key, "must be at least 1"));
            }
        }
        if c.run.samples == 0 {
            return Err(self.error_at("run.samples", "must be at least 1"));
        }
        Ok(())
    }

    /// Validated problem instance. The initial state depends on the seed.
    pub fn build_spec(&self) -> Result<ProblemSpec, ConfigError> {
        self.validate()?;
        let c = &self.config;
        let p = &c.problem;
        let core = |e: hierctl_core::Error| ConfigError {
            origin: self.name.clone(),
            message: e.to_string(),
        };
        let grid = SpatialGrid::new(p.nx, p.length).map_err(core)?;
        let tree = TreeTopology::new(p.nt, p.horizon).map_err(core)?;
        let sub = |iv: [f64; 2]| Subdomain::new(iv[0], iv[1]).map_err(core);
        let targets = [c.game.target1_amplitude, c.game.target2_amplitude]
            .map(|a| target_bump(tree, &grid, p.observation, a));
        let data = ProblemData {
            coefficients: Coefficients::constant(tree, p.nx, p.a1, p.a2, p.b1, p.b2),
            control: sub(p.control)?,
            followers: [sub(p.follower1)?, sub(p.follower2)?],
            observation: sub(p.observation)?,
            alpha: [c.game.alpha1, c.game.alpha2],
            beta: [c.game.beta1, c.game.beta2],
            targets,
            y0: initial_state(p, &grid, c.run.seed),
            grid,
            tree,
        };
        ProblemSpec::new(data).map_err(core)
    }

    pub fn penalty(&self) -> PenaltyConfig {
        let s = &self.config.solver;
        PenaltyConfig {
            eps: s.eps[0],
            cg_tol: s.cg_tol,
            cg_max_iters: s.cg_max_iters,
            picard_tol: s.picard_tol,
            picard_max_iters: s.picard_max_iters,
            damping: s.damping,
        }
    }

    pub fn weight_config(&self, spec: &ProblemSpec) -> Result<WeightConfig, ConfigError> {
        let w = &self.config.weights;
        let o_prime = Subdomain::new(w.o_prime[0], w.o_prime[1])
            .map_err(|e| self.error_at("weights.o_prime", e.to_string()))?;
        WeightConfig::for_spec(spec, w.lambda, w.mu, o_prime)
            .map_err(|e| self.error_at("weights.lambda", e.to_string()))
    }
}

/// Smooth bump in time on `[0, 3T/4]` times a `sin^2` profile over `O_d`.
pub fn target_bump(
    tree: TreeTopology,
    grid: &SpatialGrid,
    od: [f64; 2],
    amplitude: f64,
) -> AdaptedField {
    let horizon = tree.horizon();
    AdaptedField::deterministic(tree, grid, |t, x| {
        let cutoff = 0.75 * horizon;
        if t > cutoff || x <= od[0] || x >= od[1] {
            return 0.0;
        }
        let time = (PI * t / (2.0 * cutoff)).cos().powi(2);
        let space = (PI * (x - od[0]) / (od[1] - od[0])).sin().powi(2);
        amplitude * time * space
    })
}

/// `y0` from the configured family; random modes draw from the seed.
pub fn initial_state(p: &ProblemSection, grid: &SpatialGrid, seed: u64) -> Vec<f64> {
    let l = grid.length();
    match p.y0 {
        InitialKind::Zero => vec![0.0; grid.n_x()],
        InitialKind::Sine => grid
            .points()
            .map(|x| p.y0_amplitude * (PI * x / l).sin())
            .collect(),
        InitialKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coeffs: Vec<f64> = (1..=p.y0_modes)
                .map(|k| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p.y0_amplitude * z / k as f64
                })
                .collect();
            grid.points()
                .map(|x| {
                    coeffs
                        .iter()
                        .enumerate()
                        .map(|(k, c)| c * ((k + 1) as f64 * PI * x / l).sin())
                        .sum()
                })
                .collect()
        }
    }
}
