//! Closed-form SINR, range-Doppler sidelobe and channel covariance
//! predictions, with Monte-Carlo estimators to check them against.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::dsp::{cis, delay_steering, doppler_steering, energy, CMatrix, GridFft};
use crate::echo::{add_noise, synth_components_with};
use crate::error::{Error, Result};
use crate::params::{noise_power, PhaseMode, ScenarioConfig, TargetLink};
use crate::waveform::{gen_frame, Constellation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SinrReport {
    pub sinr_exact: f64,
    pub sinr_asymptotic: f64,
    /// `MN sum |alpha|^2`
    pub numerator_w: f64,
    /// `(2M - 1) N sum_beyond rho |alpha|^2`
    pub interference_w: f64,
    /// `MN sigma^2`
    pub noise_w: f64,
}

/// Closed-form SINR of the echo and its large-`M` approximation.
pub fn sinr_closed_form(cfg: &ScenarioConfig, links: &[TargetLink]) -> SinrReport {
    let (n, m) = (cfg.n as f64, cfg.m as f64);
    let sigma2 = noise_power(cfg);
    let power: f64 = links.iter().map(|l| l.alpha.norm_sqr()).sum();
    let leak: f64 = links.iter().filter(|l| l.beyond_cp).map(|l| l.rho * l.alpha.norm_sqr()).sum();
    let numerator_w = m * n * power;
    let interference_w = (2.0 * m - 1.0) * n * leak;
    let noise_w = m * n * sigma2;
    SinrReport {
        sinr_exact: numerator_w / (interference_w + noise_w),
        sinr_asymptotic: power / (2.0 * leak + sigma2),
        numerator_w,
        interference_w,
        noise_w,
    }
}

/// Average component energies over independent frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EnergyTally {
    pub free: f64,
    pub interference: f64,
    pub noise: f64,
    pub trials: usize,
}

impl EnergyTally {
    pub fn sinr(&self) -> f64 {
        self.free / (self.interference + self.noise)
    }
}

/// Monte-Carlo SINR: ratio of `sum ||Y_free||^2` to
/// `sum ||Y_ISI - Y_ICI||^2 + sum ||Z||^2` over `trials` independent frames.
/// With [`PhaseMode::Random`] every trial redraws the reflection phases.
pub fn sinr_empirical<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    links: &[TargetLink],
    constellation: &Constellation,
    trials: usize,
    phases: PhaseMode,
    rng: &mut R,
) -> Result<EnergyTally> {
    if trials == 0 {
        return Err(Error::InvalidExperiment("at least one trial is required".into()));
    }
    let fft = GridFft::new(cfg.n, cfg.m);
    let mut tally = EnergyTally::default();
    let mut links = links.to_vec();
    for _ in 0..trials {
        if phases == PhaseMode::Random {
            for l in &mut links {
                l.alpha = Complex64::from_polar(l.alpha.norm(), rng.random::<f64>() * 2.0 * PI);
            }
        }
        let frame = gen_frame(cfg, constellation, rng);
        let comps = add_noise(synth_components_with(cfg, &fft, &links, &frame)?, cfg, rng);
        tally.free += energy(&comps.y_free);
        tally.interference += energy(&comps.interference());
        tally.noise += energy(&comps.z);
        tally.trials += 1;
    }
    Ok(tally)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SidelobeReport {
    pub sigma_sl_sq: f64,
    pub pslr_per_target: Vec<f64>,
    pub harmonic_h: f64,
    #[serde(serialize_with = "serialize_complex_list")]
    pub effective_alphas: Vec<Complex64>,
}

fn serialize_complex_list<S: serde::Serializer>(v: &[Complex64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for z in v {
        seq.serialize_element(&[z.re, z.im])?;
    }
    seq.end()
}

/// `H_k = sum_{j=1}^{k} 1/j`, summed exactly.
pub fn harmonic_number(k: usize) -> f64 {
    (1..=k).map(|j| 1.0 / j as f64).sum()
}

/// `(mu4 - 1) sum |alpha~|^2 + sum_beyond rho (2 - rho) |alpha|^2 + sigma^2`.
pub fn sidelobe_floor(cfg: &ScenarioConfig, links: &[TargetLink], mu4: f64) -> f64 {
    let symbol: f64 = links.iter().map(|l| l.effective_alpha().norm_sqr()).sum();
    let leak: f64 = links
        .iter()
        .filter(|l| l.beyond_cp)
        .map(|l| l.rho * (2.0 - l.rho) * l.alpha.norm_sqr())
        .sum();
    (mu4 - 1.0) * symbol + leak + noise_power(cfg)
}

/// Sidelobe floor and expected peak-sidelobe-to-mainlobe ratio per target.
pub fn sidelobe_level(cfg: &ScenarioConfig, links: &[TargetLink], mu4: f64) -> SidelobeReport {
    let sigma_sl_sq = sidelobe_floor(cfg, links, mu4);
    let mn = (cfg.n * cfg.m) as f64;
    let harmonic_h = harmonic_number((cfg.n * cfg.m).saturating_sub(links.len()));
    let effective_alphas: Vec<Complex64> = links.iter().map(TargetLink::effective_alpha).collect();
    let pslr_per_target = effective_alphas
        .iter()
        .map(|a| harmonic_h * sigma_sl_sq / (mn * a.norm_sqr() + sigma_sl_sq))
        .collect();
    SidelobeReport { sigma_sl_sq, pslr_per_target, harmonic_h, effective_alphas }
}

/// Dirichlet kernel `D_N(x) = sin(pi x) / sin(pi x / N) exp(j pi (N-1) x / N)`
/// with the removable singularities at multiples of `N` filled in.
pub fn dirichlet(n: usize, x: f64) -> Complex64 {
    let nf = n as f64;
    let phase = cis(PI * (nf - 1.0) * x / nf);
    let den = (PI * x / nf).sin();
    if den.abs() < 1e-12 {
        // x = kN: the ratio tends to N cos(pi x) / cos(pi x / N).
        let mag = nf * (PI * x).cos() / (PI * x / nf).cos();
        return phase * mag;
    }
    phase * ((PI * x).sin() / den)
}

/// Expected `|chi(l, nu)|^2` at (possibly fractional) delay/Doppler bins.
pub fn rdm_second_moment(cfg: &ScenarioConfig, links: &[TargetLink], mu4: f64, l: f64, nu: f64) -> f64 {
    let mn = (cfg.n * cfg.m) as f64;
    let mainlobes: f64 = links
        .iter()
        .map(|t| {
            let dl = l - t.delay_taps(cfg);
            let dn = nu - t.doppler_bins(cfg);
            t.effective_alpha().norm_sqr() / mn * dirichlet(cfg.n, dl).norm_sqr() * dirichlet(cfg.m, dn).norm_sqr()
        })
        .sum();
    mainlobes + sidelobe_floor(cfg, links, mu4)
}

/// Factored channel covariance `A_Q diag(|alpha~|^2) A_Q^H + sigma_SL^2 I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    /// `MN x Q`, column `q` is `conj(c(f_d)) kron b(tau)`.
    pub steering: CMatrix,
    pub powers: Vec<f64>,
    pub sigma_sl_sq: f64,
}

/// Largest `N M` for which [`CovarianceModel::dense`] materializes the matrix.
pub const DENSE_COVARIANCE_LIMIT: usize = 4096;

impl CovarianceModel {
    pub fn dim(&self) -> usize {
        self.steering.nrows()
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        let mut v: Complex64 = (0..self.powers.len())
            .map(|q| self.steering[(i, q)] * self.steering[(j, q)].conj() * self.powers[q])
            .sum();
        if i == j {
            v += self.sigma_sl_sq;
        }
        v
    }

    pub fn dense(&self) -> Result<CMatrix> {
        let d = self.dim();
        if d > DENSE_COVARIANCE_LIMIT {
            return Err(Error::InvalidExperiment(format!(
                "refusing to materialize a {d} x {d} covariance (limit {DENSE_COVARIANCE_LIMIT})"
            )));
        }
        Ok(CMatrix::from_fn(d, d, |i, j| self.entry(i, j)))
    }
}

pub fn covariance_model(cfg: &ScenarioConfig, links: &[TargetLink], mu4: f64) -> CovarianceModel {
    let (n, m) = (cfg.n, cfg.m);
    let ts = cfg.total_symbol_time();
    let mut steering = CMatrix::zeros(n * m, links.len());
    for (q, link) in links.iter().enumerate() {
        let b = delay_steering(n, cfg.delta_f, link.tau_s);
        let c = doppler_steering(m, link.fd_hz, ts);
        for k in 0..m {
            for r in 0..n {
                steering[(r + k * n, q)] = c[k].conj() * b[r];
            }
        }
    }
    CovarianceModel {
        steering,
        powers: links.iter().map(|l| l.effective_alpha().norm_sqr()).collect(),
        sigma_sl_sq: sidelobe_floor(cfg, links, mu4),
    }
}
