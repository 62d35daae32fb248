//! Dense reference solutions for tiny instances.
//!
//! Every adapted field is flattened node-major (`node * n_x + j`). The
//! forward map is assembled from dense per-node step matrices, and every
//! backward quantity is obtained from it as a weighted transpose, so none of
//! the sweep code is reused. With `W` the quadrature weights (zero on the
//! leaves) and `W_T = p_leaf h` the terminal weight, the backward pair with
//! terminal data `phi_T` and source `G` has
//!
//! ```text
//! w    = W^+ (F_T' W_T phi_T - F' W G)
//! Phi  = W^+ (D_T' W_T phi_T - D' W G)
//! z(0) = h^-1 (Y_T' W_T phi_T - Y' W G)
//! ```
//!
//! where `F`, `D`, `Y` map drift, diffusion and initial state to the
//! solution and the `_T` blocks are their leaf rows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::nash::{FollowerPair, LeaderPair};
use crate::prob_tree::{AdaptedField, LeafField};
use crate::problem::{Player, ProblemSpec};

/// Largest `n_x * node_count` the dense path accepts.
pub const ORACLE_SIZE_LIMIT: usize = 5000;

fn guard(spec: &ProblemSpec) -> Result<usize> {
    let size = spec.n_x() * spec.tree().node_count();
    if size > ORACLE_SIZE_LIMIT {
        return Err(Error::SizeGuard {
            size,
            limit: ORACLE_SIZE_LIMIT,
        });
    }
    Ok(size)
}

/// Dense forward solution map `y = F f + D g + Y y0`.
#[derive(Debug, Clone)]
pub struct DenseForward {
    pub drift: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
    pub initial: DMatrix<f64>,
    /// `Y spec.y0()`: the solution for zero sources.
    pub offset: DVector<f64>,
}

impl DenseForward {
    /// `[F | D]`, acting on the stacked sources.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.drift.nrows();
        let mut m = DMatrix::zeros(n, 2 * n);
        m.columns_mut(0, n).copy_from(&self.drift);
        m.columns_mut(n, n).copy_from(&self.diffusion);
        m
    }

    pub fn apply(&self, drift: &AdaptedField, diffusion: &AdaptedField) -> DVector<f64> {
        &self.drift * vec_of(drift) + &self.diffusion * vec_of(diffusion) + &self.offset
    }
}

fn vec_of(f: &AdaptedField) -> DVector<f64> {
    DVector::from_column_slice(f.data())
}

fn field_of(spec: &ProblemSpec, v: &DVector<f64>) -> AdaptedField {
    AdaptedField::from_data(*spec.tree(), spec.n_x(), v.as_slice().to_vec()).expect("sized")
}

fn leaf_of(spec: &ProblemSpec, v: &DVector<f64>) -> LeafField {
    LeafField::from_data(*spec.tree(), spec.n_x(), v.as_slice().to_vec()).expect("sized")
}

fn laplacian(n: usize, h: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
        0 => -2.0 / (h * h),
        1 => 1.0 / (h * h),
        _ => 0.0,
    })
}

fn centered_difference(n: usize, h: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if j == i + 1 {
            0.5 / h
        } else if i == j + 1 {
            -0.5 / h
        } else {
            0.0
        }
    })
}

pub fn assemble_forward_matrix(spec: &ProblemSpec) -> Result<DenseForward> {
    let n = guard(spec)?;
    let tree = *spec.tree();
    let n_x = spec.n_x();
    let h = spec.grid().h();
    let dt = tree.dt();
    let sq = tree.sqrt_dt();
    let eye = DMatrix::<f64>::identity(n_x, n_x);
    let a_inv = (&eye - laplacian(n_x, h) * dt)
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("implicit matrix is singular".into()))?;
    let d = centered_difference(n_x, h);
    let coef = spec.coefficients();

    // rows of the node blocks: [drift | diffusion | y0]
    let cols = 2 * n + n_x;
    let mut full = DMatrix::<f64>::zeros(n, cols);
    full.view_mut((0, 2 * n), (n_x, n_x)).copy_from(&eye);
    for node in 0..tree.node_count() {
        let Some((plus, minus)) = tree.children(node) else {
            continue;
        };
        let r = node * n_x..(node + 1) * n_x;
        let diag = |f: &AdaptedField| {
            DMatrix::from_diagonal(&DVector::from_column_slice(&f.data()[r.clone()]))
        };
        let step = &a_inv * (&eye + (diag(&coef.a1) + diag(&coef.b1) * &d) * dt);
        let noise = diag(&coef.a2) + diag(&coef.b2) * &d;
        let parent = full.rows(node * n_x, n_x).into_owned();
        let mut drift_part = &step * &parent;
        let mut block = drift_part.view_mut((0, node * n_x), (n_x, n_x));
        block += &a_inv * dt;
        let mut noise_part = &noise * &parent;
        let mut block = noise_part.view_mut((0, n + node * n_x), (n_x, n_x));
        block += &eye;
        noise_part *= sq;
        full.rows_mut(plus * n_x, n_x)
            .copy_from(&(&drift_part + &noise_part));
        full.rows_mut(minus * n_x, n_x)
            .copy_from(&(&drift_part - &noise_part));
    }
    let initial = full.columns(2 * n, n_x).into_owned();
    let offset = &initial * DVector::from_column_slice(spec.y0());
    Ok(DenseForward {
        drift: full.columns(0, n).into_owned(),
        diffusion: full.columns(n, n).into_owned(),
        initial,
        offset,
    })
}

/// Dense operators shared by every oracle.
struct Dense {
    fwd: DenseForward,
    /// Quadrature weights, zero on the leaves.
    w: DVector<f64>,
    /// Pseudo-inverse of `w`.
    w_plus: DVector<f64>,
    w_leaf: f64,
    leaf_start: usize,
    leaf_len: usize,
    control: DVector<f64>,
    followers: [DVector<f64>; 2],
    observation: DVector<f64>,
}

impl Dense {
    fn new(spec: &ProblemSpec) -> Result<Self> {
        let n = guard(spec)?;
        let tree = spec.tree();
        let n_x = spec.n_x();
        let fwd = assemble_forward_matrix(spec)?;
        let mut w = DVector::zeros(n);
        for level in 0..tree.n_steps() {
            let r = tree.level_range(level);
            let q = tree.dt() * spec.grid().h() * tree.level_prob(level);
            w.rows_mut(r.start * n_x, r.len() * n_x).fill(q);
        }
        let w_plus = w.map(|v| if v > 0.0 { 1.0 / v } else { 0.0 });
        let leaf = tree.level_range(tree.n_steps());
        let mask = |bits: &[bool]| {
            DVector::from_fn(n, |k, _| {
                if w[k] > 0.0 && bits[k % n_x] {
                    1.0
                } else {
                    0.0
                }
            })
        };
        Ok(Self {
            control: mask(spec.control_mask().bits()),
            followers: [
                mask(spec.follower_mask(Player::One).bits()),
                mask(spec.follower_mask(Player::Two).bits()),
            ],
            observation: mask(spec.observation_mask().bits()),
            fwd,
            w,
            w_plus,
            w_leaf: tree.level_prob(tree.n_steps()) * spec.grid().h(),
            leaf_start: leaf.start * n_x,
            leaf_len: leaf.len() * n_x,
        })
    }

    fn n(&self) -> usize {
        self.w.len()
    }

    /// `L_i* g = 1_Oi W^+ F' W g`, as a matrix acting on `g`.
    fn l_star(&self, i: usize) -> DMatrix<f64> {
        let ft_w = self.fwd.drift.transpose() * DMatrix::from_diagonal(&self.w);
        DMatrix::from_diagonal(&self.followers[i].component_mul(&self.w_plus)) * ft_w
    }

    fn leaf_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.rows(self.leaf_start, self.leaf_len).into_owned()
    }

    /// State driven by the leaders alone, without `y0`.
    fn leader_response(&self, u1: &DVector<f64>, u2: &DVector<f64>) -> DVector<f64> {
        &self.fwd.drift * self.control.component_mul(u1) + &self.fwd.diffusion * u2
    }
}

fn solve_dense(m: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lu = m.lu();
    lu.solve(rhs)
        .ok_or_else(|| Error::InvalidArgument("dense system is singular".into()))
}

#[derive(Debug, Clone)]
pub struct OracleNash {
    pub followers: FollowerPair,
    /// Smallest eigenvalue of the symmetric part of `M` in the weighted
    /// inner product, over the active entries.
    pub min_symmetric_eigenvalue: f64,
}

/// Direct factorization of `M v = rhs`.
pub fn oracle_nash(spec: &ProblemSpec, leaders: &LeaderPair) -> Result<OracleNash> {
    let dense = Dense::new(spec)?;
    let n = dense.n();
    let q = dense.leader_response(&vec_of(&leaders.u1), &vec_of(&leaders.u2)) + &dense.fwd.offset;
    let obs = DMatrix::from_diagonal(&dense.observation);
    let mut m = DMatrix::<f64>::zeros(2 * n, 2 * n);
    let mut rhs = DMatrix::<f64>::zeros(2 * n, 1);
    let resp: Vec<DMatrix<f64>> = (0..2)
        .map(|j| &obs * &dense.fwd.drift * DMatrix::from_diagonal(&dense.followers[j]))
        .collect();
    for i in Player::BOTH {
        let ii = i.index();
        let (a, b) = (spec.alpha(i), spec.beta(i));
        let ls = dense.l_star(ii) * a;
        for j in 0..2 {
            m.view_mut((ii * n, j * n), (n, n))
                .copy_from(&(&ls * &resp[j]));
        }
        for k in 0..n {
            // inactive entries are pinned to zero
            m[(ii * n + k, ii * n + k)] += if dense.followers[ii][k] > 0.0 { b } else { 1.0 };
        }
        let miss = (vec_of(spec.target(i)) - &q).component_mul(&dense.observation);
        rhs.view_mut((ii * n, 0), (n, 1)).copy_from(&(&ls * miss));
    }
    let x = solve_dense(m.clone(), &rhs)?;

    // symmetric part in the weighted inner product, active entries only
    let active: Vec<usize> = (0..2 * n)
        .filter(|&k| dense.followers[k / n][k % n] > 0.0)
        .collect();
    let sw: Vec<f64> = active.iter().map(|&k| dense.w[k % n].sqrt()).collect();
    let na = active.len();
    let b = DMatrix::from_fn(na, na, |r, c| sw[r] * m[(active[r], active[c])] / sw[c]);
    let sym = (&b + b.transpose()) * 0.5;
    let min_symmetric_eigenvalue = if na == 0 {
        f64::INFINITY
    } else {
        SymmetricEigen::new(sym).eigenvalues.min()
    };
    let col = x.column(0);
    let v1 = DVector::from_iterator(n, col.rows(0, n).iter().copied());
    let v2 = DVector::from_iterator(n, col.rows(n, n).iter().copied());
    Ok(OracleNash {
        followers: FollowerPair {
            v1: field_of(spec, &v1),
            v2: field_of(spec, &v2),
        },
        min_symmetric_eigenvalue,
    })
}

#[derive(Debug, Clone)]
pub struct OracleOptimality {
    pub y: AdaptedField,
    pub followers: FollowerPair,
}

/// Monolithic solve of the optimality system in the unknowns `(y, v1, v2)`:
///
/// ```text
/// y - F 1_O1 v1 - F 1_O2 v2                       = F 1_O u1 + D u2 + Y y0
/// v_i + (alpha_i / beta_i) L_i* (1_Od y)          = (alpha_i / beta_i) L_i* (1_Od y_{i,d})
/// ```
pub fn oracle_optimality(spec: &ProblemSpec, leaders: &LeaderPair) -> Result<OracleOptimality> {
    let dense = Dense::new(spec)?;
    let n = dense.n();
    let (m, mut rhs) = optimality_matrix(spec, &dense);
    let source =
        dense.leader_response(&vec_of(&leaders.u1), &vec_of(&leaders.u2)) + &dense.fwd.offset;
    rhs.view_mut((0, 0), (n, 1)).copy_from(&source);
    let x = solve_dense(m, &rhs)?;
    let part = |k: usize| DVector::from_iterator(n, x.column(0).rows(k * n, n).iter().copied());
    Ok(OracleOptimality {
        y: field_of(spec, &part(0)),
        followers: FollowerPair {
            v1: field_of(spec, &part(1)),
            v2: field_of(spec, &part(2)),
        },
    })
}

/// Monolithic matrix of the optimality system and the target part of its
/// right-hand side (the first block is left for the caller).
fn optimality_matrix(spec: &ProblemSpec, dense: &Dense) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = dense.n();
    let mut m = DMatrix::<f64>::identity(3 * n, 3 * n);
    let mut rhs = DMatrix::<f64>::zeros(3 * n, 1);
    let obs = DMatrix::from_diagonal(&dense.observation);
    for i in Player::BOTH {
        let ii = i.index();
        let block = -(&dense.fwd.drift * DMatrix::from_diagonal(&dense.followers[ii]));
        m.view_mut((0, (ii + 1) * n), (n, n)).copy_from(&block);
        let c = dense.l_star(ii) * &obs * (spec.alpha(i) / spec.beta(i));
        rhs.view_mut(((ii + 1) * n, 0), (n, 1))
            .copy_from(&(&c * vec_of(spec.target(i))));
        m.view_mut(((ii + 1) * n, 0), (n, n)).copy_from(&c);
    }
    (m, rhs)
}

/// Linear maps from `phi_T` to the adjoint-system outputs.
struct AdjointMaps {
    /// `phi_T -> w(phi)`
    w: DMatrix<f64>,
    /// `phi_T -> Phi`
    big_phi: DMatrix<f64>,
    /// `phi_T -> phi(0)`
    initial: DMatrix<f64>,
    /// `phi_T -> psi^i`
    psi: [DMatrix<f64>; 2],
}

fn adjoint_maps(spec: &ProblemSpec, dense: &Dense) -> Result<AdjointMaps> {
    let n = dense.n();
    let h = spec.grid().h();
    let f = &dense.fwd.drift;
    let wd = DMatrix::from_diagonal(&dense.w);
    let wp = DMatrix::from_diagonal(&dense.w_plus);
    let obs = DMatrix::from_diagonal(&dense.observation);
    // psi^i = F (1/beta_i) 1_Oi w ;  source G = sum_i alpha_i 1_Od psi^i = C w
    let mut c = DMatrix::<f64>::zeros(n, n);
    let mut psi_of_w = vec![];
    for i in Player::BOTH {
        let p = f * DMatrix::from_diagonal(&dense.followers[i.index()]) / spec.beta(i);
        c += &obs * &p * spec.alpha(i);
        psi_of_w.push(p);
    }
    // (I + W^+ F' W C) w = W^+ F_T' W_T phi_T
    let lhs = DMatrix::<f64>::identity(n, n) + &wp * f.transpose() * &wd * &c;
    let rhs = &wp * dense.leaf_rows(f).transpose() * dense.w_leaf;
    let w = solve_dense(lhs, &rhs)?;
    let g = &c * &w;
    let d = &dense.fwd.diffusion;
    let y = &dense.fwd.initial;
    let big_phi = &wp * (dense.leaf_rows(d).transpose() * dense.w_leaf - d.transpose() * &wd * &g);
    let initial = (dense.leaf_rows(y).transpose() * dense.w_leaf - y.transpose() * &wd * &g) / h;
    let psi = [&psi_of_w[0] * &w, &psi_of_w[1] * &w];
    Ok(AdjointMaps {
        w,
        big_phi,
        initial,
        psi,
    })
}

#[derive(Debug, Clone)]
pub struct OracleAdjoint {
    pub drift_dual: AdaptedField,
    pub big_phi: AdaptedField,
    pub initial: Vec<f64>,
    pub psi: [AdaptedField; 2],
}

/// Dense solve of the adjoint system for one `phi_T`.
pub fn oracle_adjoint(spec: &ProblemSpec, phi_t: &LeafField) -> Result<OracleAdjoint> {
    if phi_t.tree() != spec.tree() || phi_t.n_x() != spec.n_x() {
        return invalid("phi_T must be one array per leaf of the problem tree");
    }
    let dense = Dense::new(spec)?;
    let maps = adjoint_maps(spec, &dense)?;
    let p = DVector::from_column_slice(phi_t.data());
    Ok(OracleAdjoint {
        drift_dual: field_of(spec, &(&maps.w * &p)),
        big_phi: field_of(spec, &(&maps.big_phi * &p)),
        initial: (&maps.initial * &p).as_slice().to_vec(),
        psi: [
            field_of(spec, &(&maps.psi[0] * &p)),
            field_of(spec, &(&maps.psi[1] * &p)),
        ],
    })
}

/// Leaf rows of `y` as a linear map of the first-block right-hand side,
/// and the leaf rows of the response to the targets.
fn optimality_terminal_map(
    spec: &ProblemSpec,
    dense: &Dense,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = dense.n();
    let (m, target_rhs) = optimality_matrix(spec, dense);
    let mut sel = DMatrix::<f64>::zeros(3 * n, n);
    sel.view_mut((0, 0), (n, n))
        .copy_from(&DMatrix::identity(n, n));
    let lu = m.lu();
    let singular = || Error::InvalidArgument("dense system is singular".into());
    let s = lu.solve(&sel).ok_or_else(singular)?;
    let t = lu.solve(&target_rhs).ok_or_else(singular)?;
    let leaf = |x: &DMatrix<f64>| x.rows(dense.leaf_start, dense.leaf_len).into_owned();
    Ok((leaf(&s), leaf(&t)))
}

/// Dense Gramian `Lambda` on the leaf entries.
pub fn oracle_gramian(spec: &ProblemSpec) -> Result<DMatrix<f64>> {
    let dense = Dense::new(spec)?;
    gramian_with(spec, &dense)
}

fn gramian_with(spec: &ProblemSpec, dense: &Dense) -> Result<DMatrix<f64>> {
    let maps = adjoint_maps(spec, dense)?;
    let (terminal, _) = optimality_terminal_map(spec, dense)?;
    // leaders (1_O w, Phi) enter the first block as F 1_O w + D Phi
    let source = &dense.fwd.drift * DMatrix::from_diagonal(&dense.control) * &maps.w
        + &dense.fwd.diffusion * &maps.big_phi;
    Ok(terminal * source)
}

#[derive(Debug, Clone)]
pub struct OracleNullControl {
    pub leaders: LeaderPair,
    pub phi_t: LeafField,
    pub terminal: LeafField,
    /// `|y(T) + eps phi_T| / (eps |phi_T|)` in the dense algebra.
    pub identity_residual: f64,
    /// `max |Lambda - Lambda'| / max |Lambda|`.
    pub gramian_asymmetry: f64,
    pub gramian_min_eigenvalue: f64,
}

/// Dense factorization of `(Lambda + eps I) phi_T = -y_f(T)`.
pub fn oracle_null_control(spec: &ProblemSpec, eps: f64) -> Result<OracleNullControl> {
    if !(eps > 0.0 && eps.is_finite()) {
        return invalid(format!("eps must be positive, got {eps}"));
    }
    let dense = Dense::new(spec)?;
    let lambda = gramian_with(spec, &dense)?;
    let m = lambda.nrows();
    let scale = lambda.amax();
    let gramian_asymmetry = if scale > 0.0 {
        (&lambda - lambda.transpose()).amax() / scale
    } else {
        0.0
    };
    let sym = (&lambda + lambda.transpose()) * 0.5;
    let gramian_min_eigenvalue = SymmetricEigen::new(sym).eigenvalues.min();

    let (terminal, target_part) = optimality_terminal_map(spec, &dense)?;
    let b = &terminal * &dense.fwd.offset + target_part.column(0);
    let phi = solve_dense(
        &lambda + DMatrix::identity(m, m) * eps,
        &(-DMatrix::from_column_slice(m, 1, b.as_slice())),
    )?;
    let phi = DVector::from_column_slice(phi.as_slice());
    let y_t = &lambda * &phi + &b;
    let res = (&y_t + &phi * eps).norm();
    let pn = phi.norm();
    let identity_residual = if pn > 0.0 { res / (eps * pn) } else { res };

    let maps = adjoint_maps(spec, &dense)?;
    let u1 = (&maps.w * &phi).component_mul(&dense.control);
    let u2 = &maps.big_phi * &phi;
    Ok(OracleNullControl {
        leaders: LeaderPair {
            u1: field_of(spec, &u1),
            u2: field_of(spec, &u2),
        },
        phi_t: leaf_of(spec, &phi),
        terminal: leaf_of(spec, &y_t),
        identity_residual,
        gramian_asymmetry,
        gramian_min_eigenvalue,
    })
}

/// Relative distance `|a - b| / max(|a|, |b|)` of two flat arrays (0 when
/// both vanish).
pub fn relative_difference(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
