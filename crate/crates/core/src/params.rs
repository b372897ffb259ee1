//! Scenario configuration, physical constants and per-target link parameters.
//!
//! Everything downstream (synthesis, analytics, estimators) works from a
//! [`ScenarioConfig`] plus a list of [`TargetLink`]s derived here.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::waveform::ConstellationKind;

/// Speed of light in vacuum (m/s).
pub const C0: f64 = 299_792_458.0;
/// Boltzmann constant (J/K).
pub const K_B: f64 = 1.380_649e-23;

/// OFDM numerology, RF constants, noise model and constellation.
///
/// The JSON form uses the field names `fc`, `delta_f`, `N`, `M`, `N_cp`,
/// `noise_figure_dB`, `T_temp`, `constellation`, `seed`, `snr_override_dB`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Carrier frequency (Hz).
    pub fc: f64,
    /// Subcarrier spacing (Hz).
    pub delta_f: f64,
    /// Number of subcarriers.
    #[serde(rename = "N")]
    pub n: usize,
    /// Number of OFDM symbols per frame.
    #[serde(rename = "M")]
    pub m: usize,
    /// Cyclic prefix length in samples.
    #[serde(rename = "N_cp")]
    pub n_cp: usize,
    /// Receiver noise figure (dB).
    #[serde(rename = "noise_figure_dB")]
    pub noise_figure_db: f64,
    /// Noise temperature (K).
    #[serde(rename = "T_temp")]
    pub t_temp: f64,
    pub constellation: ConstellationKind,
    pub seed: u64,
    /// When set, all reflection coefficients are rescaled by one common
    /// factor so that `sum |alpha|^2 / sigma^2` equals this value (dB).
    #[serde(rename = "snr_override_dB", default)]
    pub snr_override_db: Option<f64>,
}

impl ScenarioConfig {
    /// 28 GHz, 120 kHz spacing, 128 x 64 grid, standard 0.59 us CP (9 taps),
    /// F = 3 dB, 290 K, 1024-QAM.
    pub fn table_i() -> Self {
        Self {
            fc: 28e9,
            delta_f: 120e3,
            n: 128,
            m: 64,
            n_cp: 9,
            noise_figure_db: 3.0,
            t_temp: 290.0,
            constellation: ConstellationKind::Qam1024,
            seed: 0,
            snr_override_db: None,
        }
    }

    /// Same numerology with the CP stretched to a full symbol (8.33 us).
    pub fn with_sufficient_cp(&self) -> Self {
        Self { n_cp: self.n, ..self.clone() }
    }

    pub fn with_n_cp(&self, n_cp: usize) -> Self {
        Self { n_cp, ..self.clone() }
    }

    pub fn with_snr_db(&self, snr_db: f64) -> Self {
        Self { snr_override_db: Some(snr_db), ..self.clone() }
    }

    /// Signal bandwidth `B = N * delta_f` (Hz), also the sample rate.
    pub fn bandwidth(&self) -> f64 {
        self.n as f64 * self.delta_f
    }

    /// Useful symbol duration `T = 1 / delta_f` (s).
    pub fn symbol_time(&self) -> f64 {
        1.0 / self.delta_f
    }

    /// CP duration `T_cp = N_cp / B` (s).
    pub fn cp_time(&self) -> f64 {
        self.n_cp as f64 / self.bandwidth()
    }

    /// Total symbol duration including the CP, `T_s = T + T_cp` (s).
    pub fn total_symbol_time(&self) -> f64 {
        self.symbol_time() + self.cp_time()
    }

    /// Samples per symbol including the CP.
    pub fn samples_per_symbol(&self) -> usize {
        self.n + self.n_cp
    }

    /// Doppler resolution of one centered Doppler bin (Hz).
    pub fn doppler_bin_hz(&self) -> f64 {
        1.0 / (self.m as f64 * self.total_symbol_time())
    }

    /// Range corresponding to one delay tap (m).
    pub fn range_bin_m(&self) -> f64 {
        C0 / (2.0 * self.bandwidth())
    }

    /// Velocity corresponding to one Doppler bin (m/s).
    pub fn velocity_bin_mps(&self) -> f64 {
        self.doppler_bin_hz() * C0 / (2.0 * self.fc)
    }

    /// Range whose round-trip delay is exactly `tap` samples.
    pub fn range_for_tap(&self, tap: f64) -> f64 {
        tap * self.range_bin_m()
    }

    /// Velocity whose Doppler shift is exactly `bin` centered Doppler bins.
    pub fn velocity_for_doppler_bin(&self, bin: f64) -> f64 {
        bin * self.velocity_bin_mps()
    }
}

/// Physical point target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetTruth {
    pub range_m: f64,
    /// Radial velocity, positive when closing.
    pub velocity_mps: f64,
    pub rcs_m2: f64,
}

impl TargetTruth {
    pub fn new(range_m: f64, velocity_mps: f64, rcs_m2: f64) -> Self {
        Self { range_m, velocity_mps, rcs_m2 }
    }
}

/// Link quantities of one target as seen by the sensing receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetLink {
    pub alpha: Complex64,
    pub tau_s: f64,
    pub fd_hz: f64,
    /// Integer delay tap `round(tau * B)`.
    pub l: usize,
    /// Normalized excess delay beyond the CP, `max(0, l - N_cp) / N`.
    pub rho: f64,
    pub beyond_cp: bool,
}

impl TargetLink {
    /// Builds a link straight from delay/Doppler values, bypassing the
    /// radar equation. The tap and excess delay are derived from `cfg`.
    pub fn from_parameters(
        alpha: Complex64,
        tau_s: f64,
        fd_hz: f64,
        cfg: &ScenarioConfig,
    ) -> Result<Self> {
        let tap = (tau_s * cfg.bandwidth()).round();
        if !tap.is_finite() || tap < 0.0 {
            return Err(Error::InvalidTarget(format!("delay {tau_s} s is not representable")));
        }
        let tap = tap as i64;
        if tap >= cfg.n as i64 {
            return Err(Error::DelayOutOfWindow { tap, n: cfg.n });
        }
        let l = tap as usize;
        let (rho, beyond_cp) = excess_delay(l, cfg);
        Ok(Self { alpha, tau_s, fd_hz, l, rho, beyond_cp })
    }

    /// Effective mainlobe amplitude: `alpha` within the CP, `(1 - rho) alpha` beyond it.
    pub fn effective_alpha(&self) -> Complex64 {
        self.alpha * (1.0 - self.rho)
    }

    /// Fractional delay in taps, `tau * B`.
    pub fn delay_taps(&self, cfg: &ScenarioConfig) -> f64 {
        self.tau_s * cfg.bandwidth()
    }

    /// Fractional Doppler in bins, `f_d * M * T_s`.
    pub fn doppler_bins(&self, cfg: &ScenarioConfig) -> f64 {
        self.fd_hz * cfg.m as f64 * cfg.total_symbol_time()
    }
}

pub(crate) fn excess_delay(l: usize, cfg: &ScenarioConfig) -> (f64, bool) {
    if l > cfg.n_cp {
        ((l - cfg.n_cp) as f64 / cfg.n as f64, true)
    } else {
        (0.0, false)
    }
}

/// Derives delay, Doppler, tap and reflection coefficient of `target`.
/// `phase` is the argument given to the complex reflection coefficient.
pub fn derive_link(target: &TargetTruth, cfg: &ScenarioConfig, phase: f64) -> Result<TargetLink> {
    if !(target.range_m > 0.0 && target.range_m.is_finite()) {
        return Err(Error::InvalidTarget(format!("range must be positive, got {}", target.range_m)));
    }
    if !(target.rcs_m2 > 0.0 && target.rcs_m2.is_finite()) {
        return Err(Error::InvalidTarget(format!("RCS must be positive, got {}", target.rcs_m2)));
    }
    if !target.velocity_mps.is_finite() {
        return Err(Error::InvalidTarget("velocity must be finite".into()));
    }
    let tau = 2.0 * target.range_m / C0;
    let fd = 2.0 * target.velocity_mps * cfg.fc / C0;
    let magnitude = (target.rcs_m2 * C0 * C0
        / ((4.0 * PI).powi(3) * target.range_m.powi(4) * cfg.fc * cfg.fc))
        .sqrt();
    TargetLink::from_parameters(Complex64::from_polar(magnitude, phase), tau, fd, cfg)
}

/// How reflection-coefficient phases are chosen when deriving links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhaseMode {
    /// Uniform in `[0, 2pi)`, drawn independently per target.
    #[default]
    Random,
    /// All phases zero.
    Zero,
}

/// Derives all links and applies the configured SNR override, if any.
pub fn derive_links<R: Rng + ?Sized>(
    targets: &[TargetTruth],
    cfg: &ScenarioConfig,
    phases: PhaseMode,
    rng: &mut R,
) -> Result<Vec<TargetLink>> {
    let mut links = targets
        .iter()
        .map(|t| {
            let phase = match phases {
                PhaseMode::Random => rng.random::<f64>() * 2.0 * PI,
                PhaseMode::Zero => 0.0,
            };
            derive_link(t, cfg, phase)
        })
        .collect::<Result<Vec<_>>>()?;
    apply_snr_override(&mut links, cfg);
    Ok(links)
}

/// Rescales every `|alpha|` by one common factor so that the total
/// pre-processing SNR `sum |alpha|^2 / sigma^2` matches `cfg.snr_override_db`.
pub fn apply_snr_override(links: &mut [TargetLink], cfg: &ScenarioConfig) {
    let Some(snr_db) = cfg.snr_override_db else { return };
    let total: f64 = links.iter().map(|l| l.alpha.norm_sqr()).sum();
    if total <= 0.0 {
        return;
    }
    let wanted = 10f64.powf(snr_db / 10.0) * noise_power(cfg);
    let scale = (wanted / total).sqrt();
    for link in links {
        link.alpha *= scale;
    }
}

/// Pre-processing SNR `sum |alpha|^2 / sigma^2` (linear).
pub fn sensing_snr(links: &[TargetLink], cfg: &ScenarioConfig) -> f64 {
    links.iter().map(|l| l.alpha.norm_sqr()).sum::<f64>() / noise_power(cfg)
}

/// Noise power per frequency-domain sample, `F k_b delta_f T_temp` (W).
pub fn noise_power(cfg: &ScenarioConfig) -> f64 {
    10f64.powf(cfg.noise_figure_db / 10.0) * K_B * cfg.delta_f * cfg.t_temp
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnambiguousRanges {
    /// Largest range whose echo stays inside the CP.
    pub isi_free_range_m: f64,
    /// Range at which the round-trip delay reaches a full symbol.
    pub max_range_m: f64,
}

pub fn unambiguous_ranges(cfg: &ScenarioConfig) -> UnambiguousRanges {
    UnambiguousRanges {
        isi_free_range_m: C0 * cfg.cp_time() / 2.0,
        max_range_m: C0 * cfg.n as f64 / (2.0 * cfg.bandwidth()),
    }
}

/// Checks every invariant of `cfg` and reports all violations at once.
pub fn validate_config(cfg: &ScenarioConfig) -> Result<()> {
    let mut problems = Vec::new();
    if cfg.n < 2 {
        problems.push(format!("N must be at least 2, got {}", cfg.n));
    }
    if cfg.m < 2 {
        problems.push(format!("M must be at least 2, got {}", cfg.m));
    }
    if cfg.n_cp > cfg.n {
        problems.push(format!("CP exceeds symbol length (N_cp = {} > N = {})", cfg.n_cp, cfg.n));
    }
    if !(cfg.delta_f > 0.0 && cfg.delta_f.is_finite()) {
        problems.push(format!("delta_f must be positive, got {}", cfg.delta_f));
    }
    if !(cfg.fc > 0.0 && cfg.fc.is_finite()) {
        problems.push(format!("fc must be positive, got {}", cfg.fc));
    }
    if !cfg.noise_figure_db.is_finite() {
        problems.push("noise_figure_dB must be finite".to_string());
    }
    if !(cfg.t_temp >= 0.0 && cfg.t_temp.is_finite()) {
        problems.push(format!("T_temp must be non-negative, got {}", cfg.t_temp));
    }
    if let Some(snr) = cfg.snr_override_db {
        if !snr.is_finite() {
            problems.push("snr_override_dB must be finite".to_string());
        }
        if noise_power(cfg) <= 0.0 {
            problems.push("snr_override_dB requires a positive noise power".to_string());
        }
    }
    if !cfg.constellation.is_supported() {
        problems.push(format!(
            "constellation {} has E{{s^2}} != 0; the echo analytics require E{{s^2}} = 0",
            cfg.constellation
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(problems))
    }
}

/// Validates a target against the unambiguous delay window of `cfg`.
pub fn validate_target(target: &TargetTruth, cfg: &ScenarioConfig) -> Result<()> {
    derive_link(target, cfg, 0.0).map(|_| ())
}
