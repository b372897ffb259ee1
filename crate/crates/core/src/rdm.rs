//! Range-Doppler processing: the matched-filter map, a 2-D cell-averaging
//! CFAR detector, least-squares amplitudes, ISI/ICI reconstruction and the
//! iterative cancellation loop shared by both estimators.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{delay_steering, doppler_steering, energy, strip_symbols, CMatrix, GridFft, ZERO};
use crate::echo::{interference_terms, InterferenceSource};
use crate::error::{dims, Error, Result};
use crate::params::{ScenarioConfig, C0};

/// `chi = F_N^H (Y .* S^*) F_M` with the Doppler axis centered.
///
/// Column `j` holds Doppler bin `j - M/2`; row `l` holds delay tap `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeDopplerMap {
    pub chi: CMatrix,
}

impl RangeDopplerMap {
    pub fn n(&self) -> usize {
        self.chi.nrows()
    }

    pub fn m(&self) -> usize {
        self.chi.ncols()
    }

    pub fn delay_axis(&self) -> Vec<usize> {
        (0..self.n()).collect()
    }

    pub fn doppler_axis(&self) -> Vec<i64> {
        (0..self.m()).map(|j| self.bin_of_column(j)).collect()
    }

    pub fn bin_of_column(&self, j: usize) -> i64 {
        j as i64 - (self.m() / 2) as i64
    }

    pub fn column_of_bin(&self, nu: i64) -> usize {
        (nu + (self.m() / 2) as i64).rem_euclid(self.m() as i64) as usize
    }

    pub fn at(&self, l: usize, nu: i64) -> Complex64 {
        self.chi[(l % self.n(), self.column_of_bin(nu))]
    }

    pub fn power(&self) -> Vec<f64> {
        self.chi.iter().map(|z| z.norm_sqr()).collect()
    }

    pub fn power_db(&self) -> CMatrixDb {
        CMatrixDb { rows: self.n(), cols: self.m(), data: self.chi.iter().map(|z| to_db(z.norm_sqr())).collect() }
    }

    /// Writes `|chi|^2` in dB. The first row holds the Doppler bins, the
    /// second the matching velocities; every following row starts with the
    /// delay tap and its range.
    pub fn write_csv<W: Write>(&self, cfg: &ScenarioConfig, mut out: W) -> Result<()> {
        let bins = self.doppler_axis();
        let mut line = String::from("delay_tap,range_m");
        for b in &bins {
            line.push_str(&format!(",{b}"));
        }
        writeln!(out, "{line}")?;
        let mut line = String::from(",");
        for b in &bins {
            line.push_str(&format!(",{}", cfg.velocity_for_doppler_bin(*b as f64)));
        }
        writeln!(out, "{line}")?;
        let db = self.power_db();
        for l in 0..self.n() {
            let mut line = format!("{l},{}", cfg.range_for_tap(l as f64));
            for j in 0..self.m() {
                line.push_str(&format!(",{:.6}", db.data[l + j * self.n()]));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Column-major grid of dB values.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrixDb {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub(crate) fn to_db(p: f64) -> f64 {
    10.0 * p.max(1e-300).log10()
}

fn check_dims(y: &CMatrix, s: &CMatrix) -> Result<()> {
    if y.shape() != s.shape() {
        return Err(Error::DimensionMismatch { expected: dims(s.nrows(), s.ncols()), got: dims(y.nrows(), y.ncols()) });
    }
    Ok(())
}

pub fn compute_rdm(y: &CMatrix, s: &CMatrix) -> Result<RangeDopplerMap> {
    compute_rdm_with(&GridFft::new(s.nrows(), s.ncols()), y, s)
}

pub fn compute_rdm_with(fft: &GridFft, y: &CMatrix, s: &CMatrix) -> Result<RangeDopplerMap> {
    check_dims(y, s)?;
    if fft.dims() != s.shape() {
        return Err(Error::DimensionMismatch {
            expected: dims(fft.dims().0, fft.dims().1),
            got: dims(s.nrows(), s.ncols()),
        });
    }
    let mut x = strip_symbols(y, s);
    fft.columns_unitary(&mut x, true);
    fft.rows_unitary(&mut x, false);
    let m = x.ncols();
    let half = m / 2;
    let chi = CMatrix::from_fn(x.nrows(), m, |r, j| x[(r, (j + m - half) % m)]);
    Ok(RangeDopplerMap { chi })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfarParams {
    pub pfa: f64,
    /// Guard half-width in bins on both axes.
    pub guard: usize,
    /// Training ring width in bins outside the guard region.
    pub training: usize,
    pub max_targets: usize,
}

impl Default for CfarParams {
    fn default() -> Self {
        Self { pfa: 1e-4, guard: 2, training: 8, max_targets: 8 }
    }
}

impl CfarParams {
    pub fn training_cells(&self) -> usize {
        let outer = 2 * (self.guard + self.training) + 1;
        let inner = 2 * self.guard + 1;
        outer * outer - inner * inner
    }

    /// `a = L (Pfa^(-1/L) - 1)`, applied to the mean training power.
    pub fn threshold_factor(&self) -> f64 {
        let l = self.training_cells() as f64;
        l * (self.pfa.powf(-1.0 / l) - 1.0)
    }

    pub fn check(&self, n: usize, m: usize) -> Result<()> {
        if self.training == 0 {
            return Err(Error::DegenerateWindow);
        }
        if !(self.pfa > 0.0 && self.pfa < 1.0) {
            return Err(Error::InvalidPlan(format!("pfa must lie in (0, 1), got {}", self.pfa)));
        }
        let width = 2 * (self.guard + self.training) + 1;
        if width > n || width > m {
            return Err(Error::InvalidPlan(format!(
                "CFAR window {width}x{width} does not fit a {n}x{m} map"
            )));
        }
        Ok(())
    }
}

/// Estimated target in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub l_bin: usize,
    pub nu_bin: i64,
    pub tau_hat: f64,
    pub fd_hat: f64,
    pub alpha_hat: Complex64,
    pub beyond_cp: bool,
    pub peak_power: f64,
}

/// Per-cell threshold test result of the CA-CFAR scan.
#[derive(Debug, Clone, PartialEq)]
pub struct CfarScan {
    /// Column-major power grid.
    pub power: Vec<f64>,
    /// Column-major threshold grid.
    pub threshold: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl CfarScan {
    pub fn exceedances(&self) -> usize {
        self.power.iter().zip(&self.threshold).filter(|(p, t)| p > t).count()
    }
}

/// Box sums over a wrapped grid using a summed-area table.
struct WrappedBoxSums {
    table: Vec<f64>,
    stride: usize,
    pad: usize,
}

impl WrappedBoxSums {
    fn new(power: &[f64], n: usize, m: usize, pad: usize) -> Self {
        let (rows, cols) = (n + 2 * pad, m + 2 * pad);
        let stride = cols + 1;
        let mut table = vec![0.0; (rows + 1) * stride];
        for r in 0..rows {
            let src_r = (r + n * pad - pad) % n;
            let mut acc = 0.0;
            for c in 0..cols {
                let src_c = (c + m * pad - pad) % m;
                acc += power[src_r + src_c * n];
                table[(r + 1) * stride + c + 1] = table[r * stride + c + 1] + acc;
            }
        }
        Self { table, stride, pad }
    }

    /// Sum over the `(2h+1)^2` box centered on `(r, c)`.
    fn centered(&self, r: usize, c: usize, h: usize) -> f64 {
        let (r0, c0) = (r + self.pad - h, c + self.pad - h);
        let (r1, c1) = (r + self.pad + h + 1, c + self.pad + h + 1);
        let t = &self.table;
        let s = self.stride;
        t[r1 * s + c1] - t[r0 * s + c1] - t[r1 * s + c0] + t[r0 * s + c0]
    }
}

/// Computes the CA-CFAR threshold for every cell with wrap-around edges.
pub fn cfar_scan(rdm: &RangeDopplerMap, params: &CfarParams) -> Result<CfarScan> {
    let (n, m) = (rdm.n(), rdm.m());
    params.check(n, m)?;
    let power = rdm.power();
    let outer = params.guard + params.training;
    let sums = WrappedBoxSums::new(&power, n, m, outer);
    let factor = params.threshold_factor() / params.training_cells() as f64;
    let mut threshold = vec![0.0; n * m];
    for c in 0..m {
        for r in 0..n {
            let ring = sums.centered(r, c, outer) - sums.centered(r, c, params.guard);
            threshold[r + c * n] = factor * ring.max(0.0);
        }
    }
    Ok(CfarScan { power, threshold, rows: n, cols: m })
}

/// Local maxima above the CA-CFAR threshold, strongest first. Amplitudes
/// are left at zero; see [`estimate_alpha`].
pub fn cfar_detect(rdm: &RangeDopplerMap, params: &CfarParams, cfg: &ScenarioConfig) -> Result<Vec<Detection>> {
    let scan = cfar_scan(rdm, params)?;
    let (n, m) = (scan.rows, scan.cols);
    let p = &scan.power;
    let mut hits = Vec::new();
    for c in 0..m {
        for r in 0..n {
            let idx = r + c * n;
            if p[idx] <= scan.threshold[idx] {
                continue;
            }
            let mut is_max = true;
            'nb: for dc in [m - 1, 0, 1] {
                for dr in [n - 1, 0, 1] {
                    let j = (r + dr) % n + ((c + dc) % m) * n;
                    if j != idx && (p[j] > p[idx] || (p[j] == p[idx] && j < idx)) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                hits.push((idx, p[idx]));
            }
        }
    }
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    hits.truncate(params.max_targets);
    Ok(hits
        .into_iter()
        .map(|(idx, peak_power)| {
            let l_bin = idx % n;
            let nu_bin = rdm.bin_of_column(idx / n);
            Detection {
                l_bin,
                nu_bin,
                tau_hat: l_bin as f64 / cfg.bandwidth(),
                fd_hat: nu_bin as f64 * cfg.doppler_bin_hz(),
                alpha_hat: ZERO,
                beyond_cp: l_bin > cfg.n_cp,
                peak_power,
            }
        })
        .collect())
}

/// Least-squares amplitude `b^H (Y .* S^*) c / (||b||^2 ||c||^2)`.
pub fn estimate_alpha(y_free: &CMatrix, s: &CMatrix, cfg: &ScenarioConfig, tau_hat: f64, fd_hat: f64) -> Result<Complex64> {
    check_dims(y_free, s)?;
    let (n, m) = (s.nrows(), s.ncols());
    let b = delay_steering(n, cfg.delta_f, tau_hat);
    let c = doppler_steering(m, fd_hat, cfg.total_symbol_time());
    Ok(project(y_free, s, &b, &c))
}

fn project(y: &CMatrix, s: &CMatrix, b: &crate::dsp::CVector, c: &crate::dsp::CVector) -> Complex64 {
    let (n, m) = (s.nrows(), s.ncols());
    let mut acc = ZERO;
    for k in 0..m {
        let mut col = ZERO;
        for r in 0..n {
            col += b[r].conj() * y[(r, k)] * s[(r, k)].conj();
        }
        acc += col * c[k];
    }
    acc / (n * m) as f64
}

/// Parameters of one estimated target used for reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TargetEstimate {
    pub tau_s: f64,
    pub fd_hz: f64,
    /// Raw least-squares amplitude on the current residual.
    pub alpha_ls: Complex64,
    /// Amplitude used for reconstruction.
    pub alpha: Complex64,
}

impl TargetEstimate {
    pub fn new(tau_s: f64, fd_hz: f64, alpha: Complex64) -> Self {
        Self { tau_s, fd_hz, alpha_ls: alpha, alpha }
    }

    /// `round(tau B)`, clamped to the delay window.
    pub fn tap(&self, cfg: &ScenarioConfig) -> usize {
        let t = (self.tau_s * cfg.bandwidth()).round();
        if t <= 0.0 {
            0
        } else {
            (t as usize).min(cfg.n - 1)
        }
    }

    pub fn beyond_cp(&self, cfg: &ScenarioConfig) -> bool {
        self.tap(cfg) > cfg.n_cp
    }

    pub fn rho(&self, cfg: &ScenarioConfig) -> f64 {
        self.tap(cfg).saturating_sub(cfg.n_cp) as f64 / cfg.n as f64
    }

    pub fn range_m(&self) -> f64 {
        self.tau_s * C0 / 2.0
    }

    pub fn velocity_mps(&self, cfg: &ScenarioConfig) -> f64 {
        self.fd_hz * C0 / (2.0 * cfg.fc)
    }

    pub fn record(&self, cfg: &ScenarioConfig) -> EstimateRecord {
        EstimateRecord {
            tau_s: self.tau_s,
            fd_hz: self.fd_hz,
            range_m: self.range_m(),
            velocity_mps: self.velocity_mps(cfg),
            alpha_re: self.alpha.re,
            alpha_im: self.alpha.im,
        }
    }

    fn source(&self, cfg: &ScenarioConfig, alpha: Complex64) -> InterferenceSource {
        InterferenceSource { alpha, tau: self.tau_s, fd: self.fd_hz, excess: self.tap(cfg).saturating_sub(cfg.n_cp) }
    }
}

impl From<&Detection> for TargetEstimate {
    fn from(d: &Detection) -> Self {
        Self::new(d.tau_hat, d.fd_hat, d.alpha_hat)
    }
}

/// Serialized form of an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub tau_s: f64,
    pub fd_hz: f64,
    pub range_m: f64,
    pub velocity_mps: f64,
    pub alpha_re: f64,
    pub alpha_im: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub y_isi: CMatrix,
    pub y_ici: CMatrix,
}

/// Rebuilds the ISI and ICI of every beyond-CP estimate using its `alpha`.
pub fn reconstruct_interference(cfg: &ScenarioConfig, s: &CMatrix, estimates: &[TargetEstimate]) -> Result<Reconstruction> {
    reconstruct_with(cfg, &GridFft::new(cfg.n, cfg.m), s, estimates)
}

pub fn reconstruct_with(cfg: &ScenarioConfig, fft: &GridFft, s: &CMatrix, estimates: &[TargetEstimate]) -> Result<Reconstruction> {
    if s.nrows() != cfg.n || s.ncols() != cfg.m {
        return Err(Error::DimensionMismatch { expected: dims(cfg.n, cfg.m), got: dims(s.nrows(), s.ncols()) });
    }
    let sources: Vec<InterferenceSource> =
        estimates.iter().filter(|e| e.beyond_cp(cfg)).map(|e| e.source(cfg, e.alpha)).collect();
    let (y_isi, y_ici) = interference_terms(cfg, fft, s, &sources);
    Ok(Reconstruction { y_isi, y_ici })
}

/// How least-squares amplitudes are corrected before reconstruction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasMode {
    /// Reconstruct with the raw LS amplitude.
    Off,
    /// Divide by `1 - rho` on every iteration.
    Static,
    /// Remove the leakage left by the previous reconstruction: with `kappa`
    /// the LS response of the unit-amplitude interference on this frame,
    /// `alpha = (alpha_ls + kappa alpha_prev) / (1 + kappa)`.
    #[default]
    Tracked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SicParams {
    pub delta_th: f64,
    pub k_max: usize,
    pub debias: DebiasMode,
    /// Keep `Y_free^k` for every iteration.
    pub keep_history: bool,
}

impl Default for SicParams {
    fn default() -> Self {
        Self { delta_th: 1e-3, k_max: 10, debias: DebiasMode::Tracked, keep_history: false }
    }
}

/// One pass of the cancellation loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SicIteration {
    pub k: usize,
    pub estimates: Vec<TargetEstimate>,
    /// `||Y_free^k||^2`
    pub energy: f64,
    pub energy_delta: f64,
    /// Captured target energy over the remaining residual energy.
    pub sinr_proxy_db: f64,
    /// Strongest bin away from the estimates over the weakest estimate peak.
    pub pslr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SicOutcome {
    pub estimates: Vec<TargetEstimate>,
    pub trace: Vec<SicIteration>,
    /// `Y_free^0 .. Y_free^K` when history is kept.
    pub history: Vec<CMatrix>,
    pub converged: bool,
    /// Message of the estimator failure that ended the loop early.
    pub aborted: Option<String>,
}

impl SicOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    /// `iteration,sinr_dB,pslr_dB,energy_delta`
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration,sinr_dB,pslr_dB,energy_delta")?;
        for it in &self.trace {
            writeln!(out, "{},{},{},{}", it.k, it.sinr_proxy_db, it.pslr_db, it.energy_delta)?;
        }
        Ok(())
    }
}

/// Ratio of the strongest map bin outside a one-bin neighborhood of every
/// estimate to the weakest estimate peak, in dB. `NaN` without estimates.
pub fn pslr_proxy_db(rdm: &RangeDopplerMap, cfg: &ScenarioConfig, estimates: &[TargetEstimate]) -> f64 {
    if estimates.is_empty() {
        return f64::NAN;
    }
    let (n, m) = (rdm.n() as i64, rdm.m() as i64);
    let cells: Vec<(i64, i64)> = estimates
        .iter()
        .map(|e| (e.tap(cfg) as i64, (e.fd_hz / cfg.doppler_bin_hz()).round() as i64))
        .collect();
    let peak = cells.iter().map(|&(l, nu)| rdm.at(l as usize, nu).norm_sqr()).fold(f64::INFINITY, f64::min);
    let mut side: f64 = 0.0;
    for j in 0..rdm.m() {
        let nu = rdm.bin_of_column(j);
        for l in 0..rdm.n() {
            let near = cells.iter().any(|&(el, en)| {
                let dl = (l as i64 - el).rem_euclid(n);
                let dn = (nu - en).rem_euclid(m);
                dl.min(n - dl) <= 1 && dn.min(m - dn) <= 1
            });
            if !near {
                side = side.max(rdm.chi[(l, j)].norm_sqr());
            }
        }
    }
    to_db(side) - to_db(peak)
}

fn matched_previous(cfg: &ScenarioConfig, e: &TargetEstimate, prev: &[TargetEstimate]) -> Complex64 {
    let bin_tau = 1.0 / cfg.bandwidth();
    let bin_fd = cfg.doppler_bin_hz();
    prev.iter()
        .map(|p| {
            let dl = (p.tau_s - e.tau_s).abs() / bin_tau;
            let dn = (p.fd_hz - e.fd_hz).abs() / bin_fd;
            (dl.max(dn), p.alpha)
        })
        .filter(|(d, _)| *d <= 1.0)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map_or(ZERO, |(_, a)| a)
}

/// Fills `alpha_ls` and `alpha` for the given parameter estimates.
fn assign_amplitudes(
    cfg: &ScenarioConfig,
    fft: &GridFft,
    y_free: &CMatrix,
    s: &CMatrix,
    params: &[(f64, f64)],
    prev: &[TargetEstimate],
    mode: DebiasMode,
) -> Vec<TargetEstimate> {
    let ts = cfg.total_symbol_time();
    params
        .iter()
        .map(|&(tau, fd)| {
            let b = delay_steering(cfg.n, cfg.delta_f, tau);
            let c = doppler_steering(cfg.m, fd, ts);
            let alpha_ls = project(y_free, s, &b, &c);
            let mut est = TargetEstimate { tau_s: tau, fd_hz: fd, alpha_ls, alpha: alpha_ls };
            if !est.beyond_cp(cfg) {
                return est;
            }
            est.alpha = match mode {
                DebiasMode::Off => alpha_ls,
                DebiasMode::Static => alpha_ls / (1.0 - est.rho(cfg)),
                DebiasMode::Tracked => {
                    let (isi, ici) = interference_terms(cfg, fft, s, &[est.source(cfg, Complex64::new(1.0, 0.0))]);
                    let kappa = project(&(isi - ici), s, &b, &c);
                    let den = Complex64::new(1.0, 0.0) + kappa;
                    if den.norm() < 1e-6 {
                        alpha_ls
                    } else {
                        (alpha_ls + kappa * matched_previous(cfg, &est, prev)) / den
                    }
                }
            };
            est
        })
        .collect()
}

/// Runs the estimate/reconstruct/cancel loop. `estimator` receives the
/// current residual and its range-Doppler map and returns `(tau, f_d)` pairs.
pub fn run_sic<F>(
    y: &CMatrix,
    s: &CMatrix,
    cfg: &ScenarioConfig,
    params: &SicParams,
    mut estimator: F,
) -> Result<SicOutcome>
where
    F: FnMut(&CMatrix, &RangeDopplerMap, usize) -> Result<Vec<(f64, f64)>>,
{
    check_dims(y, s)?;
    if s.nrows() != cfg.n || s.ncols() != cfg.m {
        return Err(Error::DimensionMismatch { expected: dims(cfg.n, cfg.m), got: dims(s.nrows(), s.ncols()) });
    }
    let fft = GridFft::new(cfg.n, cfg.m);
    let mn = (cfg.n * cfg.m) as f64;
    let mut y_free = y.clone();
    let mut e_free = energy(&y_free);
    let mut outcome =
        SicOutcome { estimates: Vec::new(), trace: Vec::new(), history: Vec::new(), converged: false, aborted: None };
    if params.keep_history {
        outcome.history.push(y_free.clone());
    }
    let mut k = 0;
    loop {
        let rdm = compute_rdm_with(&fft, &y_free, s)?;
        let found = match estimator(&y_free, &rdm, k) {
            Ok(f) => f,
            Err(e) if k > 0 => {
                outcome.aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let estimates = assign_amplitudes(cfg, &fft, &y_free, s, &found, &outcome.estimates, params.debias);
        let rec = reconstruct_with(cfg, &fft, s, &estimates)?;
        let next = y - &rec.y_isi + &rec.y_ici;
        let e_next = energy(&next);
        let delta = if e_free > 0.0 { (e_next - e_free).abs() / e_free } else { 0.0 };

        let captured: f64 = estimates.iter().map(|e| e.alpha_ls.norm_sqr()).sum::<f64>() * mn;
        let sinr_proxy_db = to_db(captured) - to_db((e_free - captured).max(e_free * 1e-12));
        outcome.trace.push(SicIteration {
            k,
            estimates: estimates.clone(),
            energy: e_free,
            energy_delta: delta,
            sinr_proxy_db,
            pslr_db: pslr_proxy_db(&rdm, cfg, &estimates),
        });
        outcome.estimates = estimates;
        y_free = next;
        e_free = e_next;
        if params.keep_history {
            outcome.history.push(y_free.clone());
        }
        k += 1;
        if delta < params.delta_th {
            outcome.converged = true;
            break;
        }
        if k >= params.k_max {
            break;
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SicDftResult {
    pub detections: Vec<Detection>,
    pub outcome: SicOutcome,
}

/// Plain range-Doppler estimate: one CFAR pass with LS amplitudes.
pub fn dft_estimate(y: &CMatrix, s: &CMatrix, cfg: &ScenarioConfig, cfar: &CfarParams) -> Result<Vec<Detection>> {
    let rdm = compute_rdm(y, s)?;
    let mut dets = cfar_detect(&rdm, cfar, cfg)?;
    for d in &mut dets {
        d.alpha_hat = estimate_alpha(y, s, cfg, d.tau_hat, d.fd_hat)?;
    }
    Ok(dets)
}

/// Iterative cancellation with CFAR detection on the range-Doppler map.
pub fn sic_dft(y: &CMatrix, s: &CMatrix, cfg: &ScenarioConfig, params: &SicParams, cfar: &CfarParams) -> Result<SicDftResult> {
    let mut last = Vec::new();
    let outcome = run_sic(y, s, cfg, params, |_, rdm, _| {
        last = cfar_detect(rdm, cfar, cfg)?;
        Ok(last.iter().map(|d| (d.tau_hat, d.fd_hat)).collect())
    })?;
    let detections = last
        .into_iter()
        .zip(&outcome.estimates)
        .map(|(mut d, e)| {
            d.alpha_hat = e.alpha;
            d
        })
        .collect();
    Ok(SicDftResult { detections, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::relative_error;
    use crate::echo::{add_noise, complex_awgn, synth_components};
    use crate::params::{derive_link, TargetLink, TargetTruth};
    use crate::waveform::{gen_frame, make_constellation, ConstellationKind, SymbolFrame};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qpsk_frame(cfg: &ScenarioConfig, seed: u64) -> SymbolFrame {
        let c = make_constellation(ConstellationKind::Qpsk).unwrap();
        gen_frame(cfg, &c, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn on_grid(cfg: &ScenarioConfig, tap: usize, bin: f64, alpha: Complex64) -> TargetLink {
        TargetLink::from_parameters(alpha, tap as f64 / cfg.bandwidth(), bin * cfg.doppler_bin_hz(), cfg).unwrap()
    }

    #[test]
    fn identity_echo_peaks_at_origin() {
        let cfg = ScenarioConfig { n: 16, m: 8, n_cp: 2, ..ScenarioConfig::table_i() };
        let s = qpsk_frame(&cfg, 1).s;
        let rdm = compute_rdm(&s, &s).unwrap();
        assert!((rdm.at(0, 0).norm_sqr() - 128.0).abs() < 1e-9);
        let total: f64 = rdm.power().iter().sum();
        assert!((total - 128.0).abs() < 1e-9);
        assert_eq!(rdm.doppler_axis().first(), Some(&-4));
        assert_eq!(rdm.doppler_axis().last(), Some(&3));
    }

    #[test]
    fn on_grid_peak_value_and_sign() {
        let cfg = ScenarioConfig::table_i();
        let s = qpsk_frame(&cfg, 2);
        let alpha = Complex64::from_polar(0.7, 1.1);
        for bin in [5.0, -7.0] {
            let link = on_grid(&cfg, 6, bin, alpha);
            let y = synth_components(&cfg, &[link], &s).unwrap().y;
            let rdm = compute_rdm(&y, &s.s).unwrap();
            let peak = rdm.at(6, bin as i64);
            assert!((peak.norm_sqr() / 8192.0 - 0.49).abs() < 1e-9);
            assert!((peak - alpha * 8192f64.sqrt()).norm() < 1e-9);
            let best = rdm.power().iter().cloned().fold(0.0, f64::max);
            assert_eq!(best, peak.norm_sqr());
        }
        let t = TargetTruth::new(cfg.range_for_tap(6.0), -20.0, 1.0);
        let link = derive_link(&t, &cfg, 0.0).unwrap();
        assert!(link.doppler_bins(&cfg) < 0.0);
    }

    #[test]
    fn rdm_preserves_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = complex_awgn(32, 16, 1.0, &mut rng);
        let s = complex_awgn(32, 16, 1.0, &mut rng);
        let rdm = compute_rdm(&y, &s).unwrap();
        let e = energy(&strip_symbols(&y, &s));
        assert!((energy(&rdm.chi) - e).abs() < 1e-9 * e);
        assert!(compute_rdm(&y, &CMatrix::zeros(32, 8)).is_err());
    }

    #[test]
    fn threshold_factor_matches_false_alarm_formula() {
        let p = CfarParams::default();
        assert_eq!(p.training_cells(), 21 * 21 - 25);
        let l = p.training_cells() as f64;
        let pfa = (1.0 + p.threshold_factor() / l).powf(-l);
        assert!((pfa - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn bad_windows_are_rejected() {
        let cfg = ScenarioConfig { n: 16, m: 8, ..ScenarioConfig::table_i() };
        let rdm = RangeDopplerMap { chi: CMatrix::zeros(16, 8) };
        let none = CfarParams { training: 0, ..CfarParams::default() };
        assert!(matches!(cfar_detect(&rdm, &none, &cfg), Err(Error::DegenerateWindow)));
        assert!(matches!(cfar_detect(&rdm, &CfarParams::default(), &cfg), Err(Error::InvalidPlan(_))));
    }

    #[test]
    fn strong_target_gives_one_detection() {
        let cfg = ScenarioConfig::table_i().with_snr_db(0.0);
        let frame = qpsk_frame(&cfg, 4);
        let sigma = crate::params::noise_power(&cfg).sqrt();
        // MN = 39 dB of integration gain on top of 0 dB SNR.
        let link = on_grid(&cfg, 40, -3.0, Complex64::new(sigma, 0.0));
        let comps = add_noise(synth_components(&cfg, &[link], &frame).unwrap(), &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        // 8192 cells at the default Pfa would average almost one false alarm.
        let cfar = CfarParams { pfa: 1e-8, ..CfarParams::default() };
        let dets = dft_estimate(&comps.y, &frame.s, &cfg, &cfar).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!((dets[0].l_bin, dets[0].nu_bin), (40, -3));
        assert!(dets[0].beyond_cp);
        assert!((dets[0].alpha_hat.re / sigma - link.effective_alpha().re / sigma).abs() < 0.1);
    }

    #[test]
    fn ls_amplitude_is_exact_within_cp() {
        let cfg = ScenarioConfig::table_i();
        let frame = qpsk_frame(&cfg, 6);
        let alpha = Complex64::new(-0.3, 0.4);
        let link = on_grid(&cfg, 9, 2.5, alpha);
        let y = synth_components(&cfg, &[link], &frame).unwrap().y;
        let est = estimate_alpha(&y, &frame.s, &cfg, link.tau_s, link.fd_hz).unwrap();
        assert!((est - alpha).norm() < 1e-9);
        let zero = CMatrix::zeros(cfg.n, cfg.m);
        assert_eq!(estimate_alpha(&zero, &frame.s, &cfg, link.tau_s, link.fd_hz).unwrap(), ZERO);
    }

    #[test]
    fn ls_amplitude_is_biased_by_excess_delay_on_average() {
        let cfg = ScenarioConfig { n: 32, m: 8, n_cp: 4, ..ScenarioConfig::table_i() };
        let c = make_constellation(ConstellationKind::Qam16).unwrap();
        let alpha = Complex64::new(1.0, 0.0);
        let link = on_grid(&cfg, 20, 1.0, alpha);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 4000;
        let mut acc = ZERO;
        for _ in 0..trials {
            let frame = gen_frame(&cfg, &c, &mut rng);
            let y = synth_components(&cfg, &[link], &frame).unwrap().y;
            acc += estimate_alpha(&y, &frame.s, &cfg, link.tau_s, link.fd_hz).unwrap();
        }
        let mean = acc / trials as f64;
        // (1 - rho) = 1 - 16/32; the per-frame spread is about 0.1.
        assert!((mean - 0.5).norm() < 0.01, "{mean}");
    }

    #[test]
    fn reconstruction_with_true_parameters_is_exact() {
        let cfg = ScenarioConfig::table_i();
        let frame = qpsk_frame(&cfg, 8);
        let link = on_grid(&cfg, 82, -4.0, Complex64::from_polar(0.8, 0.3));
        let comps = synth_components(&cfg, &[link], &frame).unwrap();
        let est = TargetEstimate::new(link.tau_s, link.fd_hz, link.alpha);
        let rec = reconstruct_interference(&cfg, &frame.s, &[est]).unwrap();
        assert!(relative_error(&rec.y_isi, &comps.y_isi) < 1e-9);
        assert!(relative_error(&rec.y_ici, &comps.y_ici) < 1e-9);

        let within = TargetEstimate::new(5.0 / cfg.bandwidth(), 0.0, Complex64::new(1.0, 0.0));
        let rec = reconstruct_interference(&cfg, &frame.s, &[within]).unwrap();
        assert_eq!(energy(&rec.y_isi) + energy(&rec.y_ici), 0.0);
    }

    #[test]
    fn one_tap_misclassification_leaks_little() {
        let cfg = ScenarioConfig::table_i();
        let frame = qpsk_frame(&cfg, 9);
        let est = TargetEstimate::new((cfg.n_cp + 1) as f64 / cfg.bandwidth(), 0.0, Complex64::new(1.0, 0.0));
        let rec = reconstruct_interference(&cfg, &frame.s, &[est]).unwrap();
        let full = (cfg.n * cfg.m) as f64;
        let rho = 1.0 / cfg.n as f64;
        assert!(energy(&rec.y_ici) <= full);
        // A single lost sample leaks roughly rho of the echo energy.
        assert!(energy(&rec.y_ici) < 10.0 * rho * full);
    }

    #[test]
    fn within_cp_scene_converges_immediately() {
        let cfg = ScenarioConfig::table_i();
        let frame = qpsk_frame(&cfg, 10);
        let sigma = crate::params::noise_power(&cfg).sqrt();
        let link = on_grid(&cfg, 4, 2.0, Complex64::new(10.0 * sigma, 0.0));
        let comps = add_noise(synth_components(&cfg, &[link], &frame).unwrap(), &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let params = SicParams { keep_history: true, ..SicParams::default() };
        let cfar = CfarParams { pfa: 1e-8, ..CfarParams::default() };
        let out = sic_dft(&comps.y, &frame.s, &cfg, &params, &cfar).unwrap();
        assert!(out.outcome.converged);
        assert_eq!(out.outcome.iterations(), 1);
        assert!(out.outcome.history[1] == comps.y);
        assert_eq!(out.detections.len(), 1);
    }

    #[test]
    fn tracked_debias_cancels_a_clean_target_in_one_step() {
        let cfg = ScenarioConfig::table_i();
        let frame = qpsk_frame(&cfg, 11);
        let link = on_grid(&cfg, 82, 3.0, Complex64::from_polar(1.0, 0.4));
        let comps = synth_components(&cfg, &[link], &frame).unwrap();
        let params = SicParams { keep_history: true, k_max: 3, ..SicParams::default() };
        let out = run_sic(&comps.y, &frame.s, &cfg, &params, |_, _, _| Ok(vec![(link.tau_s, link.fd_hz)])).unwrap();
        assert!((out.estimates[0].alpha - link.alpha).norm() < 1e-9);
        assert!(relative_error(&out.history[1], &comps.y_free) < 1e-9);
    }

    #[test]
    fn empty_scene_returns_empty_result() {
        let cfg = ScenarioConfig::table_i();
        let frame = qpsk_frame(&cfg, 12);
        let z = complex_awgn(cfg.n, cfg.m, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let cfar = CfarParams { pfa: 1e-9, ..CfarParams::default() };
        let out = sic_dft(&z, &frame.s, &cfg, &SicParams::default(), &cfar).unwrap();
        assert!(out.detections.is_empty());
        assert_eq!(out.outcome.iterations(), 1);
        assert!(out.outcome.trace[0].pslr_db.is_nan());
    }

    #[test]
    fn csv_exports() {
        let cfg = ScenarioConfig { n: 4, m: 2, n_cp: 1, ..ScenarioConfig::table_i() };
        let s = CMatrix::from_element(4, 2, Complex64::new(1.0, 0.0));
        let rdm = compute_rdm(&s, &s).unwrap();
        let mut buf = Vec::new();
        rdm.write_csv(&cfg, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "delay_tap,range_m,-1,0");
        assert!(lines[2].starts_with("0,0,-3000.000000,9.030900"));

        let out = SicOutcome { estimates: vec![], trace: vec![], history: vec![], converged: true, aborted: None };
        let mut buf = Vec::new();
        out.write_trace_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,sinr_dB,pslr_dB,energy_delta\n");
    }
}
