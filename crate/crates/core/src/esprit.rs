//! Subspace delay-Doppler estimation: 2-D spatial smoothing, signal
//! subspace extraction, shift-invariance rotations and SIC-ESPRIT.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, Schur, SymmetricEigen, QR, SVD};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dsp::{strip_symbols, CMatrix, CVector, ZERO};
use crate::error::{dims, Error, Result};
use crate::params::ScenarioConfig;
use crate::rdm::{run_sic, SicOutcome, SicParams, TargetEstimate};

/// `vec(Y .* S^*)`, subcarrier index fastest (`i = n + m N`).
pub fn vectorize_channel(y: &CMatrix, s: &CMatrix) -> Result<CVector> {
    if y.shape() != s.shape() {
        return Err(Error::DimensionMismatch { expected: dims(s.nrows(), s.ncols()), got: dims(y.nrows(), y.ncols()) });
    }
    Ok(CVector::from_column_slice(strip_symbols(y, s).as_slice()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothingPlan {
    pub n: usize,
    pub m: usize,
    pub n_sub: usize,
    pub m_sub: usize,
}

impl SmoothingPlan {
    pub fn new(n: usize, m: usize, n_sub: usize, m_sub: usize) -> Result<Self> {
        if !(2..=n).contains(&n_sub) || !(2..=m).contains(&m_sub) {
            return Err(Error::InvalidPlan(format!(
                "subarray {n_sub}x{m_sub} must satisfy 2 <= N_sub <= {n} and 2 <= M_sub <= {m}"
            )));
        }
        Ok(Self { n, m, n_sub, m_sub })
    }

    /// Half the grid along both axes.
    pub fn halved(n: usize, m: usize) -> Result<Self> {
        Self::new(n, m, (n / 2).max(2), (m / 2).max(2))
    }

    pub fn offsets_n(&self) -> usize {
        self.n - self.n_sub + 1
    }

    pub fn offsets_m(&self) -> usize {
        self.m - self.m_sub + 1
    }

    /// Number of snapshots `L`.
    pub fn snapshots(&self) -> usize {
        self.offsets_n() * self.offsets_m()
    }

    /// Subarray length `N_sub M_sub`.
    pub fn subarray_len(&self) -> usize {
        self.n_sub * self.m_sub
    }

    /// `(dn, dm)` of snapshot `j`; `dm` is the outer index.
    pub fn offset(&self, j: usize) -> (usize, usize) {
        (j % self.offsets_n(), j / self.offsets_n())
    }

    fn check_vector(&self, len: usize) -> Result<()> {
        if len != self.n * self.m {
            return Err(Error::DimensionMismatch { expected: format!("{}", self.n * self.m), got: format!("{len}") });
        }
        Ok(())
    }
}

/// Explicit `(N_sub M_sub) x L` snapshot matrix.
pub fn smooth_snapshots(h: &CVector, plan: &SmoothingPlan) -> Result<CMatrix> {
    plan.check_vector(h.len())?;
    let (n, ns) = (plan.n, plan.n_sub);
    Ok(CMatrix::from_fn(plan.subarray_len(), plan.snapshots(), |i, j| {
        let (dn, dm) = plan.offset(j);
        let (a, b) = (i % ns, i / ns);
        h[(dn + a) + (dm + b) * n]
    }))
}

/// Linear map `v -> X v` and its adjoint for a snapshot matrix `X`.
pub trait SnapshotOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `X V`
    fn apply(&self, v: &CMatrix) -> CMatrix;
    /// `X^H U`
    fn apply_adjoint(&self, u: &CMatrix) -> CMatrix;
    /// `||X||_F^2`
    fn frobenius_sq(&self) -> f64;
    fn to_dense(&self) -> CMatrix;
}

impl SnapshotOperator for CMatrix {
    fn rows(&self) -> usize {
        self.nrows()
    }
    fn cols(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, v: &CMatrix) -> CMatrix {
        self * v
    }
    fn apply_adjoint(&self, u: &CMatrix) -> CMatrix {
        self.ad_mul(u)
    }
    fn frobenius_sq(&self) -> f64 {
        self.norm_squared()
    }
    fn to_dense(&self) -> CMatrix {
        self.clone()
    }
}

/// Smoothed snapshot matrix applied through 2-D FFT correlations without
/// ever being formed.
pub struct SmoothedChannel {
    plan: SmoothingPlan,
    h: CMatrix,
    h_hat: Vec<Complex64>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
}

impl SmoothedChannel {
    pub fn new(h: &CVector, plan: SmoothingPlan) -> Result<Self> {
        plan.check_vector(h.len())?;
        let mut planner = FftPlanner::new();
        let mut op = Self {
            plan,
            h: CMatrix::from_column_slice(plan.n, plan.m, h.as_slice()),
            h_hat: Vec::new(),
            col_fwd: planner.plan_fft_forward(plan.n),
            col_inv: planner.plan_fft_inverse(plan.n),
            row_fwd: planner.plan_fft_forward(plan.m),
            row_inv: planner.plan_fft_inverse(plan.m),
        };
        let mut grid = op.h.as_slice().to_vec();
        op.fft2(&mut grid, false);
        op.h_hat = grid;
        Ok(op)
    }

    fn fft2(&self, grid: &mut [Complex64], inverse: bool) {
        let (n, m) = (self.plan.n, self.plan.m);
        let (cols, rows) = if inverse { (&self.col_inv, &self.row_inv) } else { (&self.col_fwd, &self.row_fwd) };
        cols.process(grid);
        let mut buf = vec![ZERO; m];
        for r in 0..n {
            for c in 0..m {
                buf[c] = grid[r + c * n];
            }
            rows.process(&mut buf);
            for c in 0..m {
                grid[r + c * n] = buf[c];
            }
        }
    }

    /// `out[a, b] = sum_d H[a + d] w[d]` for `w` of size `wn x wm` and
    /// outputs of size `on x om`.
    fn correlate(&self, w: &[Complex64], wn: usize, wm: usize, on: usize, om: usize) -> Vec<Complex64> {
        let (n, m) = (self.plan.n, self.plan.m);
        let mut grid = vec![ZERO; n * m];
        for b in 0..wm {
            grid[b * n..b * n + wn].copy_from_slice(&w[b * wn..(b + 1) * wn]);
        }
        self.fft2(&mut grid, true);
        for (g, h) in grid.iter_mut().zip(&self.h_hat) {
            *g *= h;
        }
        self.fft2(&mut grid, true);
        let scale = 1.0 / (n * m) as f64;
        let mut out = Vec::with_capacity(on * om);
        for b in 0..om {
            out.extend(grid[b * n..b * n + on].iter().map(|z| z * scale));
        }
        out
    }
}

impl SnapshotOperator for SmoothedChannel {
    fn rows(&self) -> usize {
        self.plan.subarray_len()
    }

    fn cols(&self) -> usize {
        self.plan.snapshots()
    }

    fn apply(&self, v: &CMatrix) -> CMatrix {
        let p = &self.plan;
        let mut out = CMatrix::zeros(self.rows(), v.ncols());
        for k in 0..v.ncols() {
            let col = self.correlate(v.column(k).as_slice(), p.offsets_n(), p.offsets_m(), p.n_sub, p.m_sub);
            out.column_mut(k).copy_from_slice(&col);
        }
        out
    }

    fn apply_adjoint(&self, u: &CMatrix) -> CMatrix {
        let p = &self.plan;
        let mut out = CMatrix::zeros(self.cols(), u.ncols());
        for k in 0..u.ncols() {
            let w: Vec<Complex64> = u.column(k).iter().map(|z| z.conj()).collect();
            let col = self.correlate(&w, p.n_sub, p.m_sub, p.offsets_n(), p.offsets_m());
            for (dst, z) in out.column_mut(k).iter_mut().zip(col) {
                *dst = z.conj();
            }
        }
        out
    }

    fn frobenius_sq(&self) -> f64 {
        let p = &self.plan;
        // Entry (r, c) of the grid appears in every snapshot whose window covers it.
        let cover = |i: usize, len: usize, sub: usize| {
            let lo = i.saturating_sub(len - sub);
            let hi = i.min(sub - 1);
            (hi + 1 - lo) as f64
        };
        let mut acc = 0.0;
        for c in 0..p.m {
            let wc = cover(c, p.m, p.m_sub);
            for r in 0..p.n {
                acc += self.h[(r, c)].norm_sqr() * wc * cover(r, p.n, p.n_sub);
            }
        }
        acc
    }

    fn to_dense(&self) -> CMatrix {
        smooth_snapshots(&CVector::from_column_slice(self.h.as_slice()), &self.plan).expect("plan already checked")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceMethod {
    /// Dense SVD for small problems, subspace iteration otherwise.
    #[default]
    Auto,
    Dense,
    Iterative,
}

/// Problems whose smaller dimension is at most this use the dense SVD.
pub const DENSE_SVD_LIMIT: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceModel {
    /// Orthonormal basis of the signal subspace, strongest first.
    pub u_s: CMatrix,
    /// Sample-covariance eigenvalues `sigma_i^2 / L`, descending.
    pub eigenvalues: Vec<f64>,
    /// Mean of the remaining eigenvalues.
    pub noise_floor: f64,
}

pub fn signal_subspace(snapshots: &CMatrix, q_model: usize) -> Result<SubspaceModel> {
    signal_subspace_with(snapshots, q_model, SubspaceMethod::Auto)
}

pub fn signal_subspace_with<O: SnapshotOperator + ?Sized>(op: &O, q: usize, method: SubspaceMethod) -> Result<SubspaceModel> {
    let model = leading_subspace(op, q, method)?;
    let top = model.eigenvalues[0];
    let found = model.eigenvalues.iter().take_while(|&&e| e > 0.0 && e > top * 1e-20).count();
    if found < q {
        return Err(Error::RankDeficient { wanted: q, found });
    }
    Ok(model)
}

/// As [`signal_subspace_with`] but without the rank check.
fn leading_subspace<O: SnapshotOperator + ?Sized>(op: &O, q: usize, method: SubspaceMethod) -> Result<SubspaceModel> {
    let (d, l) = (op.rows(), op.cols());
    if q == 0 || q >= d.min(l) {
        return Err(Error::InvalidPlan(format!("model order {q} must lie in 1..{}", d.min(l))));
    }
    let dense = match method {
        SubspaceMethod::Auto => d.min(l) <= DENSE_SVD_LIMIT,
        SubspaceMethod::Dense => true,
        SubspaceMethod::Iterative => false,
    };
    let (u, sv2) = if dense { dense_subspace(&op.to_dense(), q) } else { iterative_subspace(op, q)? };
    let lf = l as f64;
    let top: f64 = sv2.iter().sum();
    let rest = (op.frobenius_sq() - top).max(0.0);
    let noise_floor = rest / ((d.min(l) - q) as f64 * lf);
    Ok(SubspaceModel { u_s: u, eigenvalues: sv2.iter().map(|s| s / lf).collect(), noise_floor })
}

fn dense_subspace(x: &CMatrix, q: usize) -> (CMatrix, Vec<f64>) {
    let svd = SVD::new(x.clone(), true, false);
    let u = svd.u.expect("left vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut basis = CMatrix::zeros(x.nrows(), q);
    let mut sv2 = Vec::with_capacity(q);
    for (k, &i) in order.iter().take(q).enumerate() {
        basis.set_column(k, &u.column(i));
        sv2.push(svd.singular_values[i].powi(2));
    }
    (basis, sv2)
}

fn orthonormalize(z: CMatrix) -> CMatrix {
    QR::new(z).q()
}

/// Hermitian eigendecomposition sorted by descending eigenvalue.
fn sorted_eigen(g: CMatrix) -> (CMatrix, Vec<f64>) {
    let eig = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vecs = CMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vecs, order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect())
}

/// Block subspace iteration on `X X^H` with Rayleigh-Ritz extraction.
fn iterative_subspace<O: SnapshotOperator + ?Sized>(op: &O, q: usize) -> Result<(CMatrix, Vec<f64>)> {
    let d = op.rows();
    let p = (q + 8).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_5ab5);
    let start = CMatrix::from_fn(d, p, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        Complex64::new(re, im)
    });
    let mut basis = orthonormalize(start);
    let mut prev: Option<Vec<f64>> = None;
    for _ in 0..300 {
        let b = op.apply_adjoint(&basis);
        let (w, ritz) = sorted_eigen(b.ad_mul(&b));
        let top = &ritz[..q];
        let settled = prev.as_ref().is_some_and(|old| {
            old.iter().zip(top).all(|(a, b)| (a - b).abs() <= 1e-13 * top[0].max(f64::MIN_POSITIVE))
        });
        if settled || top[0] == 0.0 {
            let u = &basis * w.columns(0, q);
            return Ok((u, top.to_vec()));
        }
        prev = Some(top.to_vec());
        basis = orthonormalize(op.apply(&b));
    }
    Err(Error::Eigen("subspace iteration did not converge".into()))
}

/// Cosines turned into angles (radians) between two column spaces.
pub fn principal_angles(a: &CMatrix, b: &CMatrix) -> Vec<f64> {
    let qa = orthonormalize(a.clone());
    let qb = orthonormalize(b.clone());
    let s = SVD::new(qa.ad_mul(&qb), false, false).singular_values;
    let mut out: Vec<f64> = s.iter().map(|c| c.clamp(0.0, 1.0).acos()).collect();
    out.sort_by(f64::total_cmp);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationOperators {
    pub p_tau: CMatrix,
    pub p_f: CMatrix,
    /// Condition number of `U~^H U~`.
    pub condition: f64,
}

fn select_rows(u: &CMatrix, plan: &SmoothingPlan, da: usize, db: usize) -> CMatrix {
    let (ns, ms) = (plan.n_sub, plan.m_sub);
    let rows = (ns - 1) * (ms - 1);
    CMatrix::from_fn(rows, u.ncols(), |i, c| {
        let (a, b) = (i % (ns - 1), i / (ns - 1));
        u[(a + da + (b + db) * ns, c)]
    })
}

/// Least-squares rotations between the shifted subarrays of `U_s`.
pub fn rotation_operators(u_s: &CMatrix, plan: &SmoothingPlan) -> Result<RotationOperators> {
    if u_s.nrows() != plan.subarray_len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} rows", plan.subarray_len()),
            got: format!("{} rows", u_s.nrows()),
        });
    }
    let base = select_rows(u_s, plan, 0, 0);
    let shifted_tau = select_rows(u_s, plan, 1, 0);
    let shifted_f = select_rows(u_s, plan, 0, 1);
    let gram = base.ad_mul(&base);
    let ev = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if condition > 1e10 {
        return Err(Error::IllConditioned(condition));
    }
    let chol = Cholesky::new(gram).ok_or(Error::IllConditioned(condition))?;
    Ok(RotationOperators {
        p_tau: chol.solve(&base.ad_mul(&shifted_tau)),
        p_f: chol.solve(&base.ad_mul(&shifted_f)),
        condition,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EspritEstimate {
    /// `(tau_hat, fd_hat)` in seconds and hertz.
    pub pairs: Vec<(f64, f64)>,
    pub eigvals_tau: Vec<Complex64>,
    pub eigvals_f: Vec<Complex64>,
    pub warnings: Vec<String>,
}

/// Eigenvectors of an upper-triangular matrix by back-substitution.
fn triangular_eigenvectors(t: &CMatrix) -> CMatrix {
    let q = t.nrows();
    let scale = t.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut v = CMatrix::zeros(q, q);
    for k in 0..q {
        let lambda = t[(k, k)];
        v[(k, k)] = Complex64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let acc: Complex64 = (i + 1..=k).map(|j| t[(i, j)] * v[(j, k)]).sum();
            let mut den = t[(i, i)] - lambda;
            if den.norm() < 1e-14 * scale {
                den = Complex64::new(1e-14 * scale, 0.0);
            }
            v[(i, k)] = -acc / den;
        }
        let norm = v.column(k).norm();
        v.column_mut(k).unscale_mut(norm);
    }
    v
}

/// Eigenvalues of `P_tau`, paired with the diagonal of `T^-1 P_f T` where `T`
/// holds the eigenvectors of `P_tau`.
pub fn extract_pairs(rot: &RotationOperators, cfg: &ScenarioConfig) -> Result<EspritEstimate> {
    let q = rot.p_tau.nrows();
    let schur = Schur::try_new(rot.p_tau.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::Eigen("Schur decomposition of P_tau did not converge".into()))?;
    let (z, t) = schur.unpack();
    let vecs = &z * triangular_eigenvectors(&t);
    let inv = vecs.clone().try_inverse().ok_or_else(|| Error::Eigen("P_tau is not diagonalizable".into()))?;
    let dtau = &inv * &rot.p_tau * &vecs;
    let df = &inv * &rot.p_f * &vecs;

    let mut warnings = Vec::new();
    let (mut diag, mut off) = (0.0, 0.0);
    for r in 0..q {
        for c in 0..q {
            if r == c {
                diag += df[(r, c)].norm_sqr();
            } else {
                off += df[(r, c)].norm_sqr();
            }
        }
    }
    if off > 0.2 * diag {
        warnings.push(format!("pairing unreliable: off-diagonal energy {:.1}% of diagonal", 100.0 * off / diag));
    }

    let period = 1.0 / cfg.delta_f;
    let ts = cfg.total_symbol_time();
    let mut eigvals_tau = Vec::with_capacity(q);
    let mut eigvals_f = Vec::with_capacity(q);
    let mut pairs = Vec::with_capacity(q);
    for k in 0..q {
        let (lt, lf) = (dtau[(k, k)], df[(k, k)]);
        for (name, l) in [("delay", lt), ("Doppler", lf)] {
            if !(0.5..1.5).contains(&l.norm()) {
                warnings.push(format!("{name} eigenvalue {k} has modulus {:.3}", l.norm()));
            }
        }
        let tau = (-lt.arg() / (2.0 * PI * cfg.delta_f)).rem_euclid(period);
        let mut fd = lf.arg() / (2.0 * PI * ts);
        if fd >= 0.5 / ts {
            fd -= 1.0 / ts;
        }
        eigvals_tau.push(lt);
        eigvals_f.push(lf);
        pairs.push((tau, fd));
    }
    Ok(EspritEstimate { pairs, eigvals_tau, eigvals_f, warnings })
}

/// Model order from the largest ratio between consecutive eigenvalues.
pub fn estimate_model_order(eigenvalues: &[f64]) -> usize {
    let mut best = (0.0, 1);
    for k in 0..eigenvalues.len().saturating_sub(1) {
        let next = eigenvalues[k + 1].max(f64::MIN_POSITIVE);
        let ratio = eigenvalues[k] / next;
        if ratio > best.0 {
            best = (ratio, k + 1);
        }
    }
    best.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EspritParams {
    /// Signal subspace dimension; estimated from the eigenvalue gap when absent.
    pub q_model: Option<usize>,
    pub n_sub: Option<usize>,
    pub m_sub: Option<usize>,
    pub method: SubspaceMethod,
}

impl Default for EspritParams {
    fn default() -> Self {
        Self { q_model: None, n_sub: None, m_sub: None, method: SubspaceMethod::Auto }
    }
}

/// Largest order tried when the model order is estimated.
pub const MAX_BLIND_ORDER: usize = 8;

impl EspritParams {
    pub fn with_order(q: usize) -> Self {
        Self { q_model: Some(q), ..Self::default() }
    }

    pub fn plan(&self, cfg: &ScenarioConfig) -> Result<SmoothingPlan> {
        let halved = SmoothingPlan::halved(cfg.n, cfg.m)?;
        SmoothingPlan::new(cfg.n, cfg.m, self.n_sub.unwrap_or(halved.n_sub), self.m_sub.unwrap_or(halved.m_sub))
    }
}

/// One ESPRIT pass on `Y_free`, returning raw parameter pairs.
pub fn esprit_pairs(y: &CMatrix, s: &CMatrix, cfg: &ScenarioConfig, params: &EspritParams) -> Result<EspritEstimate> {
    let plan = params.plan(cfg)?;
    let h = vectorize_channel(y, s)?;
    let op = SmoothedChannel::new(&h, plan)?;
    let model = match params.q_model {
        Some(q) => {
            if plan.snapshots() < q || plan.subarray_len() <= q {
                return Err(Error::InvalidPlan(format!("plan {}x{} cannot resolve {q} targets", plan.n_sub, plan.m_sub)));
            }
            signal_subspace_with(&op, q, params.method)?
        }
        None => {
            let cap = MAX_BLIND_ORDER.min(plan.subarray_len().min(plan.snapshots()) - 1);
            let full = leading_subspace(&op, cap, params.method)?;
            let q = estimate_model_order(&full.eigenvalues);
            if full.eigenvalues[0] <= 0.0 {
                return Err(Error::RankDeficient { wanted: 1, found: 0 });
            }
            SubspaceModel { u_s: full.u_s.columns(0, q).into_owned(), eigenvalues: full.eigenvalues[..q].to_vec(), ..full }
        }
    };
    let rot = rotation_operators(&model.u_s, &plan)?;
    extract_pairs(&rot, cfg)
}

/// Single-pass ESPRIT with least-squares amplitudes and no cancellation.
pub fn esprit(y: &CMatrix, s: &CMatrix, cfg: &ScenarioConfig, params: &EspritParams) -> Result<Vec<TargetEstimate>> {
    let est = esprit_pairs(y, s, cfg, params)?;
    est.pairs
        .iter()
        .map(|&(tau, fd)| Ok(TargetEstimate::new(tau, fd, crate::rdm::estimate_alpha(y, s, cfg, tau, fd)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SicEspritResult {
    pub estimate: Option<EspritEstimate>,
    pub outcome: SicOutcome,
}

/// ESPRIT inside the estimate/reconstruct/cancel loop.
pub fn sic_esprit(
    y: &CMatrix,
    s: &CMatrix,
    cfg: &ScenarioConfig,
    sic: &SicParams,
    params: &EspritParams,
) -> Result<SicEspritResult> {
    let mut last = None;
    let outcome = run_sic(y, s, cfg, sic, |y_free, _, _| {
        let est = esprit_pairs(y_free, s, cfg, params)?;
        let pairs = est.pairs.clone();
        last = Some(est);
        Ok(pairs)
    })?;
    Ok(SicEspritResult { estimate: last, outcome })
}
