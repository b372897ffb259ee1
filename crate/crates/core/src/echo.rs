//! Frequency-domain echo synthesis with explicit ISI/ICI terms, plus a
//! brute-force time-domain reference used to cross-check it.
//!
//! The received frame is `Y = Y_free + Y_ISI - Y_ICI + Z` where, per target,
//!
//! * `Y_free = alpha (b(tau) c^H(f_d) .* S)`
//! * `Y_ISI  = alpha Phi (b(tau - T_cp) c^H(f_d) .* S) J_1` (beyond-CP only)
//! * `Y_ICI  = alpha Phi (b(tau) c^H(f_d) .* S)` (beyond-CP only)
//!
//! and `J_1` shifts every column one symbol to the right, so the first
//! symbol of the frame receives no ISI.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::Serialize;

use crate::dsp::{cis, delay_steering, doppler_steering, CMatrix, CVector, GridFft, ZERO};
use crate::error::{dims, Error, Result};
use crate::params::{noise_power, ScenarioConfig, TargetLink};
use crate::waveform::SymbolFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVectors {
    pub b_tau: CVector,
    pub c_fd: CVector,
}

impl SteeringVectors {
    pub fn new(cfg: &ScenarioConfig, tau: f64, fd: f64) -> Self {
        Self {
            b_tau: delay_steering(cfg.n, cfg.delta_f, tau),
            c_fd: doppler_steering(cfg.m, fd, cfg.total_symbol_time()),
        }
    }
}

/// Dense ISI/ICI coupling matrix of one target,
/// `Phi[n, n'] = (1/N) sum_{i < l - N_cp} exp(j 2 pi (n' - n) i / N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMatrix {
    pub phi: CMatrix,
}

impl PhaseMatrix {
    /// `trace(Phi Phi^H)`.
    pub fn trace_gram(&self) -> f64 {
        self.phi.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// Builds `Phi` for delay tap `l` using the closed-form geometric sum.
pub fn phase_matrix(l: usize, cfg: &ScenarioConfig) -> Result<PhaseMatrix> {
    let n = cfg.n;
    if l >= n {
        return Err(Error::DelayOutOfWindow { tap: l as i64, n });
    }
    let excess = l.saturating_sub(cfg.n_cp);
    let mut phi = CMatrix::zeros(n, n);
    if excess == 0 {
        return Ok(PhaseMatrix { phi });
    }
    // Entries depend only on d = n' - n (mod N).
    let kernel: Vec<Complex64> = (0..n)
        .map(|d| {
            if d == 0 {
                Complex64::new(excess as f64 / n as f64, 0.0)
            } else {
                let w = 2.0 * PI * d as f64 / n as f64;
                (Complex64::new(1.0, 0.0) - cis(w * excess as f64)) / (Complex64::new(1.0, 0.0) - cis(w))
                    / n as f64
            }
        })
        .collect();
    for col in 0..n {
        for row in 0..n {
            phi[(row, col)] = kernel[(col + n - row) % n];
        }
    }
    Ok(PhaseMatrix { phi })
}

/// Components of one synthesized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoComponents {
    pub y_free: CMatrix,
    pub y_isi: CMatrix,
    pub y_ici: CMatrix,
    pub z: CMatrix,
    pub y: CMatrix,
    pub links: Vec<TargetLink>,
}

impl EchoComponents {
    /// `Y_ISI - Y_ICI`.
    pub fn interference(&self) -> CMatrix {
        &self.y_isi - &self.y_ici
    }
}

/// One target's contribution to the interference reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct InterferenceSource {
    pub alpha: Complex64,
    pub tau: f64,
    pub fd: f64,
    /// Samples falling outside the CP, `l - N_cp`.
    pub excess: usize,
}

/// Accumulates `(Y_ISI, Y_ICI)` for the given sources.
pub(crate) fn interference_terms(
    cfg: &ScenarioConfig,
    fft: &GridFft,
    s: &CMatrix,
    sources: &[InterferenceSource],
) -> (CMatrix, CMatrix) {
    let (n, m) = (cfg.n, cfg.m);
    let mut isi = CMatrix::zeros(n, m);
    let mut ici = CMatrix::zeros(n, m);
    let ts = cfg.total_symbol_time();
    for src in sources.iter().filter(|s| s.excess > 0) {
        let c = doppler_steering(m, src.fd, ts);
        let b = delay_steering(n, cfg.delta_f, src.tau);
        let b_shift = delay_steering(n, cfg.delta_f, src.tau - cfg.cp_time());

        let mut g = CMatrix::from_fn(n, m, |r, k| src.alpha * b[r] * c[k].conj() * s[(r, k)]);
        fft.apply_phase_matrix(&mut g, src.excess);
        ici += &g;

        let mut g = CMatrix::from_fn(n, m, |r, k| src.alpha * b_shift[r] * c[k].conj() * s[(r, k)]);
        fft.apply_phase_matrix(&mut g, src.excess);
        for k in 1..m {
            let mut dst = isi.column_mut(k);
            dst += g.column(k - 1);
        }
    }
    (isi, ici)
}

fn check_frame(cfg: &ScenarioConfig, s: &CMatrix) -> Result<()> {
    if s.nrows() != cfg.n || s.ncols() != cfg.m {
        return Err(Error::DimensionMismatch { expected: dims(cfg.n, cfg.m), got: dims(s.nrows(), s.ncols()) });
    }
    Ok(())
}

/// Noiseless structured echo of `links` for symbol frame `frame`.
pub fn synth_components(cfg: &ScenarioConfig, links: &[TargetLink], frame: &SymbolFrame) -> Result<EchoComponents> {
    synth_components_with(cfg, &GridFft::new(cfg.n, cfg.m), links, frame)
}

/// As [`synth_components`], reusing cached FFT plans.
pub fn synth_components_with(
    cfg: &ScenarioConfig,
    fft: &GridFft,
    links: &[TargetLink],
    frame: &SymbolFrame,
) -> Result<EchoComponents> {
    let s = &frame.s;
    check_frame(cfg, s)?;
    let (n, m) = (cfg.n, cfg.m);
    let ts = cfg.total_symbol_time();
    let mut y_free = CMatrix::zeros(n, m);
    for link in links {
        if link.l >= n {
            return Err(Error::DelayOutOfWindow { tap: link.l as i64, n });
        }
        let b = delay_steering(n, cfg.delta_f, link.tau_s);
        let c = doppler_steering(m, link.fd_hz, ts);
        for k in 0..m {
            let ck = link.alpha * c[k].conj();
            for r in 0..n {
                y_free[(r, k)] += ck * b[r] * s[(r, k)];
            }
        }
    }
    let sources: Vec<InterferenceSource> = links
        .iter()
        .filter(|l| l.beyond_cp)
        .map(|l| InterferenceSource { alpha: l.alpha, tau: l.tau_s, fd: l.fd_hz, excess: l.l - cfg.n_cp })
        .collect();
    let (y_isi, y_ici) = interference_terms(cfg, fft, s, &sources);
    let y = &y_free + &y_isi - &y_ici;
    Ok(EchoComponents { y_free, y_isi, y_ici, z: CMatrix::zeros(n, m), y, links: links.to_vec() })
}

/// Circularly-symmetric complex Gaussian matrix with variance `sigma2` per entry.
pub fn complex_awgn<R: Rng + ?Sized>(rows: usize, cols: usize, sigma2: f64, rng: &mut R) -> CMatrix {
    let sd = (sigma2 / 2.0).sqrt();
    CMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(sd * re, sd * im)
    })
}

/// Draws `Z` with the configured noise power and refreshes `Y`.
pub fn add_noise<R: Rng + ?Sized>(mut comps: EchoComponents, cfg: &ScenarioConfig, rng: &mut R) -> EchoComponents {
    let sigma2 = noise_power(cfg);
    let (n, m) = (comps.y.nrows(), comps.y.ncols());
    comps.z = if sigma2 > 0.0 { complex_awgn(n, m, sigma2, rng) } else { CMatrix::zeros(n, m) };
    comps.y = &comps.y_free + &comps.y_isi - &comps.y_ici + &comps.z;
    comps
}

/// Brute-force reference: builds the CP-OFDM sample stream, delays it by
/// each target's integer tap (zero before arrival), applies the per-symbol
/// Doppler phase, strips the CP and demodulates with a unitary DFT.
///
/// Matches [`synth_components`] whenever every `tau * B` is an integer.
pub fn time_domain_oracle(cfg: &ScenarioConfig, links: &[TargetLink], frame: &SymbolFrame) -> Result<CMatrix> {
    let s = &frame.s;
    check_frame(cfg, s)?;
    let (n, m, ncp) = (cfg.n, cfg.m, cfg.n_cp);
    let ns = n + ncp;
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    let fft = planner.plan_fft_forward(n);
    let norm = (n as f64).sqrt().recip();

    let mut tx = vec![ZERO; m * ns];
    for k in 0..m {
        let mut u: Vec<Complex64> = s.column(k).iter().copied().collect();
        ifft.process(&mut u);
        for i in 0..ns {
            tx[k * ns + i] = u[(i + n - ncp) % n] * norm;
        }
    }

    let ts = cfg.total_symbol_time();
    let mut rx = vec![ZERO; m * ns];
    for link in links {
        let doppler: Vec<Complex64> = (0..m).map(|k| cis(2.0 * PI * k as f64 * link.fd_hz * ts)).collect();
        for i in link.l..m * ns {
            let src = i - link.l;
            rx[i] += link.alpha * tx[src] * doppler[src / ns];
        }
    }

    let mut out = CMatrix::zeros(n, m);
    for k in 0..m {
        let start = k * ns + ncp;
        let mut window = rx[start..start + n].to_vec();
        fft.process(&mut window);
        for (r, v) in window.into_iter().enumerate() {
            out[(r, k)] = v * norm;
        }
    }
    Ok(out)
}

/// Writes `mat` as long-form CSV: `subcarrier,symbol,re,im`.
pub fn write_matrix_csv<W: Write>(mat: &CMatrix, mut out: W) -> Result<()> {
    writeln!(out, "subcarrier,symbol,re,im")?;
    for k in 0..mat.ncols() {
        for r in 0..mat.nrows() {
            let z = mat[(r, k)];
            writeln!(out, "{r},{k},{:e},{:e}", z.re, z.im)?;
        }
    }
    Ok(())
}

/// JSON envelope for one exported matrix, entries column-major.
#[derive(Debug, Clone, Serialize)]
pub struct MatrixEnvelope<'a> {
    pub config_hash: &'a str,
    pub component: &'a str,
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl<'a> MatrixEnvelope<'a> {
    pub fn new(config_hash: &'a str, component: &'a str, mat: &CMatrix) -> Self {
        Self {
            config_hash,
            component,
            rows: mat.nrows(),
            cols: mat.ncols(),
            re: mat.iter().map(|z| z.re).collect(),
            im: mat.iter().map(|z| z.im).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{energy, relative_error};
    use crate::params::{derive_link, TargetTruth};
    use crate::waveform::{gen_frame, make_constellation, ConstellationKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn on_grid(cfg: &ScenarioConfig, tap: usize, doppler_bin: f64, phase: f64) -> TargetLink {
        let t = TargetTruth::new(cfg.range_for_tap(tap as f64), cfg.velocity_for_doppler_bin(doppler_bin), 1.0);
        let mut link = derive_link(&t, cfg, phase).unwrap();
        link.alpha = Complex64::from_polar(1.0, phase);
        link
    }

    fn direct_phase_entry(n: usize, excess: usize, row: usize, col: usize) -> Complex64 {
        (0..excess)
            .map(|i| cis(2.0 * PI * (col as f64 - row as f64) * i as f64 / n as f64))
            .sum::<Complex64>()
            / n as f64
    }

    #[test]
    fn phase_matrix_matches_direct_sum() {
        let cfg = ScenarioConfig { n: 16, n_cp: 3, ..ScenarioConfig::table_i() };
        for l in [4, 9, 15] {
            let p = phase_matrix(l, &cfg).unwrap();
            for r in 0..16 {
                for c in 0..16 {
                    assert!((p.phi[(r, c)] - direct_phase_entry(16, l - 3, r, c)).norm() < 1e-12);
                }
                assert!((p.phi[(r, r)].re - (l - 3) as f64 / 16.0).abs() < 1e-15);
            }
        }
        assert!(phase_matrix(3, &cfg).unwrap().phi.iter().all(|z| *z == ZERO));
        assert!(phase_matrix(16, &cfg).is_err());
    }

    #[test]
    fn phase_matrix_trace_identity_tap_82() {
        let cfg = ScenarioConfig::table_i();
        let p = phase_matrix(82, &cfg).unwrap();
        // Direct double sum of |phi|^2 over all entries.
        let direct: f64 = (0..128)
            .flat_map(|r| (0..128).map(move |c| (r, c)))
            .map(|(r, c)| direct_phase_entry(128, 73, r, c).norm_sqr())
            .sum();
        assert!((direct - 73.0).abs() < 1e-9);
        assert!((p.trace_gram() - 73.0).abs() < 1e-9);
    }

    #[test]
    fn fft_phase_application_matches_dense() {
        let cfg = ScenarioConfig { n: 16, m: 3, n_cp: 2, ..ScenarioConfig::table_i() };
        let fft = GridFft::new(16, 3);
        let x = CMatrix::from_fn(16, 3, |r, c| Complex64::new((r * 7 % 5) as f64, c as f64 - r as f64 * 0.1));
        let p = phase_matrix(11, &cfg).unwrap();
        let mut y = x.clone();
        fft.apply_phase_matrix(&mut y, 9);
        assert!(relative_error(&y, &(&p.phi * &x)) < 1e-12);
    }

    #[test]
    fn within_cp_targets_have_no_interference() {
        let cfg = ScenarioConfig::table_i();
        let c = make_constellation(ConstellationKind::Qam16).unwrap();
        let frame = gen_frame(&cfg, &c, &mut ChaCha8Rng::seed_from_u64(1));
        let links = [on_grid(&cfg, 3, 2.0, 0.1), on_grid(&cfg, 9, -5.0, 1.0)];
        let comps = synth_components(&cfg, &links, &frame).unwrap();
        assert_eq!(energy(&comps.y_isi), 0.0);
        assert_eq!(energy(&comps.y_ici), 0.0);
        assert_eq!(comps.y, comps.y_free);
    }

    #[test]
    fn first_symbol_receives_no_isi() {
        let cfg = ScenarioConfig::table_i();
        let c = make_constellation(ConstellationKind::Qpsk).unwrap();
        let frame = gen_frame(&cfg, &c, &mut ChaCha8Rng::seed_from_u64(2));
        let comps = synth_components(&cfg, &[on_grid(&cfg, 82, 3.0, 0.0)], &frame).unwrap();
        assert!(comps.y_isi.column(0).iter().all(|z| *z == ZERO));
        assert!(comps.y_isi.column(1).iter().any(|z| z.norm() > 0.0));
    }

    #[test]
    fn free_component_entrywise() {
        // Independent scalar loop over the interference-free expression.
        let cfg = ScenarioConfig { m: 1, ..ScenarioConfig::table_i() };
        let c = make_constellation(ConstellationKind::Qam64).unwrap();
        let frame = gen_frame(&cfg, &c, &mut ChaCha8Rng::seed_from_u64(3));
        let link = TargetLink::from_parameters(Complex64::new(0.3, -0.7), 1.234e-6, 5e3, &cfg).unwrap();
        let comps = synth_components(&cfg, &[link], &frame).unwrap();
        for n in 0..cfg.n {
            let want = link.alpha * frame.s[(n, 0)] * cis(-2.0 * PI * n as f64 * cfg.delta_f * link.tau_s);
            assert!((comps.y_free[(n, 0)] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn oracle_matches_structured_model() {
        let cfg = ScenarioConfig { n: 32, m: 8, n_cp: 4, ..ScenarioConfig::table_i() };
        let c = make_constellation(ConstellationKind::Qam16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = gen_frame(&cfg, &c, &mut rng);
        let links = [on_grid(&cfg, 2, 1.3, 0.2), on_grid(&cfg, 13, -2.7, 2.0), on_grid(&cfg, 31, 0.4, -1.0)];
        let comps = synth_components(&cfg, &links, &frame).unwrap();
        let oracle = time_domain_oracle(&cfg, &links, &frame).unwrap();
        assert!(relative_error(&comps.y, &oracle) < 1e-9);
    }

    #[test]
    fn oracle_zero_targets_and_zero_delay() {
        let cfg = ScenarioConfig { n: 16, m: 4, n_cp: 2, ..ScenarioConfig::table_i() };
        let c = make_constellation(ConstellationKind::Qpsk).unwrap();
        let frame = gen_frame(&cfg, &c, &mut ChaCha8Rng::seed_from_u64(5));
        assert!(time_domain_oracle(&cfg, &[], &frame).unwrap().iter().all(|z| *z == ZERO));
        let fd = 0.7 * cfg.doppler_bin_hz();
        let link = TargetLink::from_parameters(Complex64::from_polar(1.0, 0.5), 0.0, fd, &cfg).unwrap();
        let oracle = time_domain_oracle(&cfg, &[link], &frame).unwrap();
        let comps = synth_components(&cfg, &[link], &frame).unwrap();
        assert!(relative_error(&comps.y_free, &oracle) < 1e-9);
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let cfg = ScenarioConfig::table_i();
        let c = make_constellation(ConstellationKind::Qpsk).unwrap();
        let frame = gen_frame(&cfg, &c, &mut ChaCha8Rng::seed_from_u64(6));
        let clean = synth_components(&cfg, &[on_grid(&cfg, 20, 1.0, 0.0)], &frame).unwrap();
        let a = add_noise(clean.clone(), &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let b = add_noise(clean.clone(), &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);

        let quiet = ScenarioConfig { t_temp: 0.0, ..cfg.clone() };
        assert_eq!(add_noise(clean.clone(), &quiet, &mut ChaCha8Rng::seed_from_u64(7)).y, clean.y);

        // 10^5 samples: relative standard error of the variance is ~0.3%.
        let sigma2 = noise_power(&cfg);
        let z = complex_awgn(100_000, 1, sigma2, &mut ChaCha8Rng::seed_from_u64(8));
        let var = energy(&z) / 1e5;
        assert!((var / sigma2 - 1.0).abs() < 0.02);
        let re_var: f64 = z.iter().map(|v| v.re * v.re).sum::<f64>() / 1e5;
        assert!((re_var / (sigma2 / 2.0) - 1.0).abs() < 0.03);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = ScenarioConfig::table_i();
        let frame = SymbolFrame { s: CMatrix::zeros(4, 4) };
        assert!(matches!(synth_components(&cfg, &[], &frame), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn csv_export_layout() {
        let m = CMatrix::from_fn(2, 2, |r, c| Complex64::new(r as f64, c as f64));
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "subcarrier,symbol,re,im");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[2], "1,0,1e0,0e0");
    }
}
