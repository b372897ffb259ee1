//! Monte-Carlo experiments: scenario files, figure sweeps, RMSE metrics and
//! CSV/JSON exports.
//!
//! Every trial draws its randomness from a generator seeded by
//! `(seed, sweep index, trial index)`, so results do not depend on how
//! trials are scheduled.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{sidelobe_level, sinr_closed_form};
use crate::dsp::{energy, CMatrix, GridFft};
use crate::echo::{complex_awgn, synth_components_with, EchoComponents};
use crate::error::{Error, Result};
use crate::esprit::{esprit, sic_esprit, EspritParams};
use crate::params::{
    apply_snr_override, derive_link, noise_power, unambiguous_ranges, validate_config, validate_target,
    ScenarioConfig, TargetLink, TargetTruth, C0,
};
use crate::rdm::{cfar_scan, compute_rdm_with, dft_estimate, sic_dft, to_db, CfarParams, RangeDopplerMap, SicParams, TargetEstimate};
use crate::waveform::{gen_frame, make_constellation, Constellation, SymbolFrame};

fn default_rcs() -> f64 {
    1.0
}

/// Targets drawn uniformly per trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomTargets {
    pub count: usize,
    pub range_m: [f64; 2],
    pub velocity_mps: [f64; 2],
    #[serde(default = "default_rcs")]
    pub rcs_m2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub config: ScenarioConfig,
    #[serde(default)]
    pub targets: Vec<TargetTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_targets: Option<RandomTargets>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::InvalidConfig(p)) = validate_config(&self.config) {
            problems.extend(p);
        }
        for (i, t) in self.targets.iter().enumerate() {
            if let Err(e) = validate_target(t, &self.config) {
                problems.push(format!("target {i}: {e}"));
            }
        }
        if let Some(r) = &self.random_targets {
            if r.count == 0 {
                problems.push("random_targets.count must be at least 1".into());
            }
            if !(r.range_m[0] > 0.0 && r.range_m[0] < r.range_m[1]) {
                problems.push(format!("random_targets.range_m {:?} must be increasing and positive", r.range_m));
            } else if validate_target(&TargetTruth::new(r.range_m[1], 0.0, r.rcs_m2), &self.config).is_err() {
                problems.push(format!("random_targets.range_m upper bound {} is not observable", r.range_m[1]));
            }
            if !(r.velocity_mps[0] <= r.velocity_mps[1]) {
                problems.push(format!("random_targets.velocity_mps {:?} must be ordered", r.velocity_mps));
            }
            if !(r.rcs_m2 > 0.0) {
                problems.push("random_targets.rcs_m2 must be positive".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Fixed targets followed by this trial's random draws.
    pub fn draw_targets<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<TargetTruth> {
        let mut out = self.targets.clone();
        if let Some(r) = &self.random_targets {
            for _ in 0..r.count {
                let range = r.range_m[0] + (r.range_m[1] - r.range_m[0]) * rng.random::<f64>();
                let vel = r.velocity_mps[0] + (r.velocity_mps[1] - r.velocity_mps[0]) * rng.random::<f64>();
                out.push(TargetTruth::new(range, vel, r.rcs_m2));
            }
        }
        out
    }

    pub fn target_count(&self) -> usize {
        self.targets.len() + self.random_targets.map_or(0, |r| r.count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    CpLength,
    Iteration,
    Snr,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cp_length" => Ok(Self::CpLength),
            "iteration" => Ok(Self::Iteration),
            "snr" => Ok(Self::Snr),
            other => Err(Error::InvalidExperiment(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Sweep {
    /// Default values per axis.
    pub fn default_for(axis: SweepAxis, cfg: &ScenarioConfig) -> Self {
        let values = match axis {
            SweepAxis::CpLength => (0..=cfg.n).step_by((cfg.n / 16).max(1)).map(|v| v as f64).collect(),
            SweepAxis::Iteration => (0..=10).map(f64::from).collect(),
            SweepAxis::Snr => (-4..=4).map(|k| f64::from(k) * 5.0).collect(),
        };
        Self { axis, values }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dft,
    SicDft,
    Esprit,
    SicEsprit,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Dft, Algorithm::SicDft, Algorithm::Esprit, Algorithm::SicEsprit];

    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Dft => "dft",
            Algorithm::SicDft => "sic_dft",
            Algorithm::Esprit => "esprit",
            Algorithm::SicEsprit => "sic_esprit",
        }
    }
}

fn all_algorithms() -> Vec<Algorithm> {
    Algorithm::ALL.to_vec()
}

fn default_trials() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub scenario: Scenario,
    pub sweep: Sweep,
    #[serde(default = "all_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cfar: CfarParams,
    #[serde(default)]
    pub sic: SicParams,
    #[serde(default)]
    pub esprit: EspritParams,
}

impl Experiment {
    /// Experiment around `scenario` with default settings and an iteration sweep.
    pub fn from_scenario(scenario: Scenario) -> Self {
        Self {
            sweep: Sweep::default_for(SweepAxis::Iteration, &scenario.config),
            seed: scenario.config.seed,
            scenario,
            algorithms: all_algorithms(),
            trials: default_trials(),
            cfar: CfarParams::default(),
            sic: SicParams::default(),
            esprit: EspritParams::default(),
        }
    }

    /// Parses an experiment, a scenario (`{config, targets}`) or a bare
    /// scenario configuration, telling them apart by their keys.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::InvalidConfig(vec!["configuration must be a JSON object".into()]))?;
        if obj.contains_key("scenario") {
            return Ok(serde_json::from_value(value)?);
        }
        let scenario = if obj.contains_key("config") {
            serde_json::from_value(value)?
        } else {
            Scenario { config: serde_json::from_value(value)?, targets: Vec::new(), random_targets: None }
        };
        Ok(Self::from_scenario(scenario))
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = match self.scenario.validate() {
            Err(Error::InvalidConfig(p)) => p,
            _ => Vec::new(),
        };
        if self.trials == 0 {
            problems.push("trials must be at least 1".into());
        }
        if self.sweep.values.is_empty() {
            problems.push("sweep.values must not be empty".into());
        }
        if self.sweep.values.windows(2).any(|w| !(w[0] < w[1])) {
            problems.push("sweep.values must be strictly increasing".into());
        }
        if self.sweep.values.iter().any(|v| !v.is_finite()) {
            problems.push("sweep.values must be finite".into());
        }
        if matches!(self.sweep.axis, SweepAxis::CpLength | SweepAxis::Iteration)
            && self.sweep.values.iter().any(|v| *v < 0.0 || v.fract() != 0.0)
        {
            problems.push("cp_length and iteration sweeps take non-negative integers".into());
        }
        if self.sweep.axis == SweepAxis::CpLength && self.sweep.values.iter().any(|v| *v > self.scenario.config.n as f64) {
            problems.push(format!("cp_length values may not exceed N = {}", self.scenario.config.n));
        }
        if self.algorithms.is_empty() {
            problems.push("at least one algorithm is required".into());
        }
        let cfg = &self.scenario.config;
        if let Err(e) = self.cfar.check(cfg.n, cfg.m) {
            problems.push(format!("cfar: {e}"));
        }
        if self.algorithms.iter().any(|a| matches!(a, Algorithm::Esprit | Algorithm::SicEsprit)) {
            if let Err(e) = self.esprit.plan(cfg) {
                problems.push(format!("esprit: {e}"));
            }
        }
        if self.scenario.target_count() == 0 {
            problems.push("the scenario has no targets".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("experiment serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    fn has(&self, a: Algorithm) -> bool {
        self.algorithms.contains(&a)
    }

    /// CFAR settings with the detection count capped at the number of targets.
    pub fn cfar_params(&self) -> CfarParams {
        let q = self.scenario.target_count();
        CfarParams { max_targets: self.cfar.max_targets.min(q.max(1)), ..self.cfar }
    }

    /// ESPRIT settings with the model order defaulting to the number of targets.
    pub fn esprit_params(&self) -> EspritParams {
        EspritParams { q_model: self.esprit.q_model.or(Some(self.scenario.target_count())), ..self.esprit }
    }
}

/// Seed of trial `trial` at sweep point `point`.
pub fn derive_seed(base: u64, point: u64, trial: u64) -> u64 {
    let mut z = base;
    for v in [point, trial] {
        z = splitmix64(z ^ splitmix64(v.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    z
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generic per-point summary used for progress lines and JSON output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub sweep_value: f64,
    pub algorithm: String,
    #[serde(rename = "sinr_dB")]
    pub sinr_db: Option<f64>,
    #[serde(rename = "pslr_dB")]
    pub pslr_db: Option<f64>,
    pub range_rmse_m: Option<f64>,
    pub velocity_rmse_mps: Option<f64>,
    pub mean_iterations: Option<f64>,
    #[serde(skip)]
    pub wall_time_s: f64,
    pub config_hash: String,
}

impl MetricsRow {
    fn new(sweep_value: f64, algorithm: &str, config_hash: &str) -> Self {
        Self {
            sweep_value,
            algorithm: algorithm.to_string(),
            sinr_db: None,
            pslr_db: None,
            range_rmse_m: None,
            velocity_rmse_mps: None,
            mean_iterations: None,
            wall_time_s: 0.0,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} = {} [{}]", "point", self.sweep_value, self.algorithm);
        let fields = [
            ("sinr", self.sinr_db, "dB"),
            ("pslr", self.pslr_db, "dB"),
            ("range_rmse", self.range_rmse_m, "m"),
            ("vel_rmse", self.velocity_rmse_mps, "m/s"),
            ("iters", self.mean_iterations, ""),
        ];
        for (name, v, unit) in fields {
            if let Some(v) = v {
                s.push_str(&format!(" {name}={v:.3}{unit}"));
            }
        }
        s.push_str(&format!(" ({:.2}s)", self.wall_time_s));
        s
    }
}

/// Rejects rows that come from different configurations.
pub fn ensure_single_config<'a, I: IntoIterator<Item = &'a str>>(hashes: I) -> Result<()> {
    let mut it = hashes.into_iter();
    let Some(first) = it.next() else { return Ok(()) };
    match it.find(|h| *h != first) {
        Some(other) => Err(Error::InvalidExperiment(format!("rows mix configurations {first} and {other}"))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RmseResult {
    pub range_rmse_m: f64,
    pub velocity_rmse_mps: f64,
}

/// Running sums of squared range/velocity errors.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RmseAccumulator {
    pub sum_range_sq: f64,
    pub sum_velocity_sq: f64,
    pub count: usize,
}

impl RmseAccumulator {
    pub fn merge(&mut self, other: &RmseAccumulator) {
        self.sum_range_sq += other.sum_range_sq;
        self.sum_velocity_sq += other.sum_velocity_sq;
        self.count += other.count;
    }

    pub fn finish(&self) -> Option<RmseResult> {
        (self.count > 0).then(|| RmseResult {
            range_rmse_m: (self.sum_range_sq / self.count as f64).sqrt(),
            velocity_rmse_mps: (self.sum_velocity_sq / self.count as f64).sqrt(),
        })
    }
}

/// Largest unambiguous speed magnitude, `c0 / (4 f_c T_s)`.
pub fn max_velocity_mps(cfg: &ScenarioConfig) -> f64 {
    C0 / (4.0 * cfg.fc * cfg.total_symbol_time())
}

/// Greedy nearest-neighbour matching in `(range / R_max, velocity / v_max)`.
/// Each truth contributes one squared error; unmatched truths are charged
/// half the unambiguous span on both axes.
pub fn match_errors(estimates: &[(f64, f64)], truths: &[(f64, f64)], cfg: &ScenarioConfig) -> Result<RmseAccumulator> {
    if truths.is_empty() {
        return Err(Error::InvalidExperiment("RMSE needs at least one true target".into()));
    }
    let r_max = unambiguous_ranges(cfg).max_range_m;
    let v_max = max_velocity_mps(cfg);
    let mut pairs = Vec::with_capacity(estimates.len() * truths.len());
    for (i, t) in truths.iter().enumerate() {
        for (j, e) in estimates.iter().enumerate() {
            let d = ((e.0 - t.0) / r_max).powi(2) + ((e.1 - t.1) / v_max).powi(2);
            pairs.push((d, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut truth_used = vec![false; truths.len()];
    let mut est_used = vec![false; estimates.len()];
    let mut acc = RmseAccumulator::default();
    for (_, i, j) in pairs {
        if truth_used[i] || est_used[j] {
            continue;
        }
        truth_used[i] = true;
        est_used[j] = true;
        acc.sum_range_sq += (estimates[j].0 - truths[i].0).powi(2);
        acc.sum_velocity_sq += (estimates[j].1 - truths[i].1).powi(2);
        acc.count += 1;
    }
    // Half of the span [0, r_max) and of [-v_max, v_max).
    let misses = truth_used.iter().filter(|u| !**u).count();
    acc.sum_range_sq += misses as f64 * (r_max / 2.0).powi(2);
    acc.sum_velocity_sq += misses as f64 * v_max.powi(2);
    acc.count += misses;
    Ok(acc)
}

/// RMSE over a single set of estimates.
pub fn rmse(estimates: &[(f64, f64)], truths: &[(f64, f64)], cfg: &ScenarioConfig) -> Result<RmseResult> {
    Ok(match_errors(estimates, truths, cfg)?.finish().expect("at least one truth"))
}

/// One synthesized frame with its truth.
pub struct Trial {
    pub truths: Vec<TargetTruth>,
    pub links: Vec<TargetLink>,
    pub frame: SymbolFrame,
    pub comps: EchoComponents,
}

/// Draws targets, phases, symbols and noise once and synthesizes the echo
/// under each configuration in `cfgs` (all must share `N`, `M` and `delta_f`).
pub fn synthesize_trial(
    scenario: &Scenario,
    cfgs: &[&ScenarioConfig],
    constellation: &Constellation,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trial>> {
    let truths = scenario.draw_targets(rng);
    let phases: Vec<f64> = truths.iter().map(|_| rng.random::<f64>() * 2.0 * std::f64::consts::PI).collect();
    let base = cfgs[0];
    let frame = gen_frame(base, constellation, rng);
    let z = complex_awgn(base.n, base.m, noise_power(base), rng);
    cfgs.iter()
        .map(|cfg| {
            let mut links =
                truths.iter().zip(&phases).map(|(t, p)| derive_link(t, cfg, *p)).collect::<Result<Vec<_>>>()?;
            apply_snr_override(&mut links, cfg);
            let fft = GridFft::new(cfg.n, cfg.m);
            let mut comps = synth_components_with(cfg, &fft, &links, &frame)?;
            comps.y += &z;
            comps.z = z.clone();
            Ok(Trial { truths: truths.clone(), links, frame: frame.clone(), comps })
        })
        .collect()
}

/// Integer bin `(tap, centered Doppler bin)` nearest to a target.
pub fn target_bin(link: &TargetLink, cfg: &ScenarioConfig) -> (usize, i64) {
    let l = link.delay_taps(cfg).round().rem_euclid(cfg.n as f64) as usize;
    (l, link.doppler_bins(cfg).round() as i64)
}

/// `(max sidelobe power, weakest target-bin power)`; the sidelobe region is
/// every bin except the target bins.
pub fn peak_and_sidelobe(rdm: &RangeDopplerMap, cfg: &ScenarioConfig, links: &[TargetLink]) -> (f64, f64) {
    let cells: Vec<(usize, usize)> = links
        .iter()
        .map(|l| {
            let (tap, nu) = target_bin(l, cfg);
            (tap, rdm.column_of_bin(nu))
        })
        .collect();
    let mut side: f64 = 0.0;
    for j in 0..rdm.m() {
        for l in 0..rdm.n() {
            if !cells.contains(&(l, j)) {
                side = side.max(rdm.chi[(l, j)].norm_sqr());
            }
        }
    }
    let peak = cells.iter().map(|&(l, j)| rdm.chi[(l, j)].norm_sqr()).fold(f64::INFINITY, f64::min);
    (side, peak)
}

fn run_trials<T, F>(exp: &Experiment, point: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng) -> Result<T> + Sync,
{
    (0..exp.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(exp.seed, point as u64, t as u64));
            f(&mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CpRow {
    pub n_cp: usize,
    pub sinr_theory_db: f64,
    pub sinr_asymp_db: f64,
    pub sinr_emp_db: f64,
    pub pslr_theory_db: f64,
    pub pslr_emp_db: f64,
    pub config_hash: String,
}

/// SINR and PSLR against CP length: closed forms next to Monte-Carlo values.
pub fn sweep_cp_length(exp: &Experiment, progress: &mut dyn FnMut(&str)) -> Result<Vec<CpRow>> {
    exp.validate()?;
    let hash = exp.config_hash();
    let constellation = make_constellation(exp.scenario.config.constellation)?;
    let mu4 = constellation.mu4();
    let mut rows = Vec::new();
    for (point, &v) in exp.sweep.values.iter().enumerate() {
        let start = Instant::now();
        let cfg = exp.scenario.config.with_n_cp(v as usize);
        let parts = run_trials(exp, point, |rng| {
            let trial = synthesize_trial(&exp.scenario, &[&cfg], &constellation, rng)?.remove(0);
            let fft = GridFft::new(cfg.n, cfg.m);
            let rdm = compute_rdm_with(&fft, &trial.comps.y, &trial.frame.s)?;
            let (side, peak) = peak_and_sidelobe(&rdm, &cfg, &trial.links);
            let c = &trial.comps;
            let theory_links = trial.links.clone();
            Ok((energy(&c.y_free), energy(&c.interference()), energy(&c.z), side, peak, theory_links))
        })?;
        let (mut free, mut interf, mut noise, mut side, mut peak) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for p in &parts {
            free += p.0;
            interf += p.1;
            noise += p.2;
            side += p.3;
            peak += p.4;
        }
        let links = &parts[0].5;
        let theory = sinr_closed_form(&cfg, links);
        let sl = sidelobe_level(&cfg, links, mu4);
        let pslr_theory = sl.pslr_per_target.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let row = CpRow {
            n_cp: cfg.n_cp,
            sinr_theory_db: to_db(theory.sinr_exact),
            sinr_asymp_db: to_db(theory.sinr_asymptotic),
            sinr_emp_db: to_db(free / (interf + noise)),
            pslr_theory_db: to_db(pslr_theory),
            pslr_emp_db: to_db(side / peak),
            config_hash: hash.clone(),
        };
        progress(&format!(
            "n_cp={} sinr theory={:.3} emp={:.3} dB pslr theory={:.3} emp={:.3} dB ({:.2}s)",
            row.n_cp,
            row.sinr_theory_db,
            row.sinr_emp_db,
            row.pslr_theory_db,
            row.pslr_emp_db,
            start.elapsed().as_secs_f64()
        ));
        rows.push(row);
    }
    Ok(rows)
}

/// Label of the sufficient-CP reference rows.
pub const SUFFICIENT_CP: &str = "sufficient_cp";

#[derive(Debug, Clone, Default)]
struct IterAcc {
    free: f64,
    residual: f64,
    side: f64,
    peak: f64,
}

impl IterAcc {
    fn add(&mut self, other: &IterAcc) {
        self.free += other.free;
        self.residual += other.residual;
        self.side += other.side;
        self.peak += other.peak;
    }
}

fn iteration_metrics(
    cfg: &ScenarioConfig,
    fft: &GridFft,
    trial: &Trial,
    history: &[CMatrix],
    iters: &[usize],
) -> Result<Vec<IterAcc>> {
    let free = energy(&trial.comps.y_free);
    iters
        .iter()
        .map(|&i| {
            let y_k = &history[i.min(history.len() - 1)];
            let rdm = compute_rdm_with(fft, y_k, &trial.frame.s)?;
            let (side, peak) = peak_and_sidelobe(&rdm, cfg, &trial.links);
            Ok(IterAcc { free, residual: energy(&(y_k - &trial.comps.y_free)), side, peak })
        })
        .collect()
}

/// Per-iteration empirical SINR and PSLR of the cancellation loops, with
/// the sufficient-CP reference. SINR uses the synthesizer's truth: the
/// residual minus the true interference-free echo is interference plus noise.
pub fn sweep_iterations(exp: &Experiment, progress: &mut dyn FnMut(&str)) -> Result<Vec<MetricsRow>> {
    exp.validate()?;
    let hash = exp.config_hash();
    let cfg = exp.scenario.config.clone();
    let sufficient = cfg.with_sufficient_cp();
    let constellation = make_constellation(cfg.constellation)?;
    let iters: Vec<usize> = exp.sweep.values.iter().map(|v| *v as usize).collect();
    let k_max = *iters.last().expect("validated non-empty");
    let sic = SicParams { keep_history: true, k_max: k_max.max(1), ..exp.sic };
    let esprit_params = exp.esprit_params();
    let algos: Vec<Algorithm> =
        [Algorithm::SicDft, Algorithm::SicEsprit].into_iter().filter(|a| exp.has(*a)).collect();
    let start = Instant::now();

    let parts = run_trials(exp, 0, |rng| {
        let mut trials = synthesize_trial(&exp.scenario, &[&cfg, &sufficient], &constellation, rng)?;
        let suff = trials.pop().expect("two configurations");
        let std = trials.pop().expect("two configurations");
        let fft = GridFft::new(cfg.n, cfg.m);
        let mut per_algo = Vec::new();
        for algo in &algos {
            let outcome = match algo {
                Algorithm::SicDft => sic_dft(&std.comps.y, &std.frame.s, &cfg, &sic, &exp.cfar_params())?.outcome,
                _ => sic_esprit(&std.comps.y, &std.frame.s, &cfg, &sic, &esprit_params)?.outcome,
            };
            per_algo.push((iteration_metrics(&cfg, &fft, &std, &outcome.history, &iters)?, outcome.iterations()));
        }
        let rdm = compute_rdm_with(&fft, &suff.comps.y, &suff.frame.s)?;
        let (side, peak) = peak_and_sidelobe(&rdm, &sufficient, &suff.links);
        let reference = IterAcc {
            free: energy(&suff.comps.y_free),
            residual: energy(&(&suff.comps.y - &suff.comps.y_free)),
            side,
            peak,
        };
        Ok((per_algo, reference))
    })?;

    let mut rows = Vec::new();
    let wall = start.elapsed().as_secs_f64();
    for (a, algo) in algos.iter().enumerate() {
        let mut accs = vec![IterAcc::default(); iters.len()];
        let mut total_iters = 0usize;
        for (per_algo, _) in &parts {
            for (acc, x) in accs.iter_mut().zip(&per_algo[a].0) {
                acc.add(x);
            }
            total_iters += per_algo[a].1;
        }
        for (i, acc) in iters.iter().zip(&accs) {
            let mut row = MetricsRow::new(*i as f64, algo.label(), &hash);
            row.sinr_db = Some(to_db(acc.free / acc.residual));
            row.pslr_db = Some(to_db(acc.side / acc.peak));
            row.mean_iterations = Some(total_iters as f64 / exp.trials as f64);
            row.wall_time_s = wall;
            progress(&row.summary());
            rows.push(row);
        }
    }
    let mut reference = IterAcc::default();
    for (_, r) in &parts {
        reference.add(r);
    }
    for i in &iters {
        let mut row = MetricsRow::new(*i as f64, SUFFICIENT_CP, &hash);
        row.sinr_db = Some(to_db(reference.free / reference.residual));
        row.pslr_db = Some(to_db(reference.side / reference.peak));
        row.wall_time_s = wall;
        rows.push(row);
    }
    progress(&format!("{SUFFICIENT_CP}: sinr={:.3}dB", to_db(reference.free / reference.residual)));
    Ok(rows)
}

fn estimate_pairs(estimates: &[TargetEstimate], cfg: &ScenarioConfig) -> Vec<(f64, f64)> {
    estimates.iter().map(|e| (e.range_m(), e.velocity_mps(cfg))).collect()
}

/// Algorithm labels reported by the SNR sweep, in output order.
pub fn snr_labels(exp: &Experiment) -> Vec<String> {
    let mut out: Vec<String> = exp.algorithms.iter().map(|a| a.label().to_string()).collect();
    for a in [Algorithm::Dft, Algorithm::Esprit] {
        if exp.has(a) {
            out.push(format!("{}_{SUFFICIENT_CP}", a.label()));
        }
    }
    out
}

/// Range/velocity RMSE against SNR for every algorithm, plus plain DFT and
/// ESPRIT with a sufficient CP as references.
pub fn sweep_snr_rmse(exp: &Experiment, progress: &mut dyn FnMut(&str)) -> Result<Vec<MetricsRow>> {
    exp.validate()?;
    let hash = exp.config_hash();
    let constellation = make_constellation(exp.scenario.config.constellation)?;
    let cfar = exp.cfar_params();
    let esprit_params = exp.esprit_params();
    let labels = snr_labels(exp);
    let mut rows = Vec::new();
    for (point, &snr) in exp.sweep.values.iter().enumerate() {
        let start = Instant::now();
        let cfg = exp.scenario.config.with_snr_db(snr);
        let sufficient = cfg.with_sufficient_cp();
        let parts = run_trials(exp, point, |rng| {
            let mut trials = synthesize_trial(&exp.scenario, &[&cfg, &sufficient], &constellation, rng)?;
            let suff = trials.pop().expect("two configurations");
            let std = trials.pop().expect("two configurations");
            let truths: Vec<(f64, f64)> = std.truths.iter().map(|t| (t.range_m, t.velocity_mps)).collect();
            let mut out = Vec::with_capacity(labels.len());
            let mut iterations = Vec::with_capacity(labels.len());
            let run = |algo: Algorithm, trial: &Trial, c: &ScenarioConfig| -> Result<(Vec<TargetEstimate>, usize)> {
                let (y, s) = (&trial.comps.y, &trial.frame.s);
                Ok(match algo {
                    Algorithm::Dft => (dft_estimate(y, s, c, &cfar)?.iter().map(TargetEstimate::from).collect(), 1),
                    Algorithm::SicDft => {
                        let r = sic_dft(y, s, c, &exp.sic, &cfar)?;
                        {
                            let it = r.outcome.iterations();
                            (r.outcome.estimates, it)
                        }
                    }
                    Algorithm::Esprit => (esprit(y, s, c, &esprit_params)?, 1),
                    Algorithm::SicEsprit => {
                        let r = sic_esprit(y, s, c, &exp.sic, &esprit_params)?;
                        {
                            let it = r.outcome.iterations();
                            (r.outcome.estimates, it)
                        }
                    }
                })
            };
            for algo in &exp.algorithms {
                let (est, it) = run(*algo, &std, &cfg)?;
                out.push(match_errors(&estimate_pairs(&est, &cfg), &truths, &cfg)?);
                iterations.push(it);
            }
            for algo in [Algorithm::Dft, Algorithm::Esprit] {
                if exp.has(algo) {
                    let (est, it) = run(algo, &suff, &sufficient)?;
                    out.push(match_errors(&estimate_pairs(&est, &sufficient), &truths, &sufficient)?);
                    iterations.push(it);
                }
            }
            Ok((out, iterations))
        })?;
        let wall = start.elapsed().as_secs_f64();
        for (k, label) in labels.iter().enumerate() {
            let mut acc = RmseAccumulator::default();
            let mut iters = 0usize;
            for (errs, its) in &parts {
                acc.merge(&errs[k]);
                iters += its[k];
            }
            let r = acc.finish().expect("trials contribute");
            let mut row = MetricsRow::new(snr, label, &hash);
            row.range_rmse_m = Some(r.range_rmse_m);
            row.velocity_rmse_mps = Some(r.velocity_rmse_mps);
            row.mean_iterations = Some(iters as f64 / exp.trials as f64);
            row.wall_time_s = wall;
            progress(&row.summary());
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Median `|chi|^2` outside one-bin neighbourhoods of the targets.
pub fn median_sidelobe_floor(rdm: &RangeDopplerMap, cfg: &ScenarioConfig, links: &[TargetLink]) -> f64 {
    let (n, m) = (rdm.n() as i64, rdm.m() as i64);
    let bins: Vec<(i64, i64)> = links.iter().map(|l| {
        let (t, nu) = target_bin(l, cfg);
        (t as i64, nu)
    }).collect();
    let mut vals = Vec::with_capacity(rdm.n() * rdm.m());
    for j in 0..rdm.m() {
        let nu = rdm.bin_of_column(j);
        for l in 0..rdm.n() {
            let near = bins.iter().any(|&(bl, bn)| {
                let dl = (l as i64 - bl).rem_euclid(n);
                let dn = (nu - bn).rem_euclid(m);
                dl.min(n - dl) <= 1 && dn.min(m - dn) <= 1
            });
            if !near {
                vals.push(rdm.chi[(l, j)].norm_sqr());
            }
        }
    }
    vals.sort_by(f64::total_cmp);
    let k = vals.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        vals[k / 2]
    } else {
        0.5 * (vals[k / 2 - 1] + vals[k / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RdmPanel {
    pub label: String,
    #[serde(skip)]
    pub rdm: RangeDopplerMap,
    #[serde(skip)]
    pub config: ScenarioConfig,
    pub median_floor_db: f64,
    /// Whether each target bin exceeds its CA-CFAR threshold.
    pub peaks_present: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RdmComparison {
    pub panels: Vec<RdmPanel>,
    pub config_hash: String,
}

/// SIC-DFT and plain DFT maps with the standard CP next to plain DFT with a
/// sufficient CP, all from the same draw.
pub fn rdm_compare(exp: &Experiment) -> Result<RdmComparison> {
    exp.scenario.validate()?;
    let cfg = exp.scenario.config.clone();
    let sufficient = cfg.with_sufficient_cp();
    let constellation = make_constellation(cfg.constellation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(exp.seed, 0, 0));
    let mut trials = synthesize_trial(&exp.scenario, &[&cfg, &sufficient], &constellation, &mut rng)?;
    let suff = trials.pop().expect("two configurations");
    let std = trials.pop().expect("two configurations");
    let fft = GridFft::new(cfg.n, cfg.m);
    let sic = SicParams { keep_history: true, ..exp.sic };
    let out = sic_dft(&std.comps.y, &std.frame.s, &cfg, &sic, &exp.cfar_params())?;
    let cleaned = out.outcome.history.last().expect("history kept");

    let panel = |label: &str, y: &CMatrix, trial: &Trial, c: &ScenarioConfig| -> Result<RdmPanel> {
        let rdm = compute_rdm_with(&fft, y, &trial.frame.s)?;
        let scan = cfar_scan(&rdm, &exp.cfar)?;
        let peaks_present = trial
            .links
            .iter()
            .map(|l| {
                let (tap, nu) = target_bin(l, c);
                let idx = tap + rdm.column_of_bin(nu) * rdm.n();
                scan.power[idx] > scan.threshold[idx]
            })
            .collect();
        Ok(RdmPanel {
            label: label.to_string(),
            median_floor_db: to_db(median_sidelobe_floor(&rdm, c, &trial.links)),
            rdm,
            config: c.clone(),
            peaks_present,
        })
    };
    Ok(RdmComparison {
        panels: vec![
            panel("sic_dft_standard_cp", cleaned, &std, &cfg)?,
            panel("dft_standard_cp", &std.comps.y, &std, &cfg)?,
            panel("dft_sufficient_cp", &suff.comps.y, &suff, &sufficient)?,
        ],
        config_hash: exp.config_hash(),
    })
}

pub fn write_cp_csv<W: Write>(rows: &[CpRow], out: W) -> Result<()> {
    ensure_single_config(rows.iter().map(|r| r.config_hash.as_str()))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n_cp", "sinr_theory_db", "sinr_asymp_db", "sinr_emp_db", "pslr_theory_db", "pslr_emp_db", "config_hash"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.n_cp.to_string(),
            r.sinr_theory_db.to_string(),
            r.sinr_asymp_db.to_string(),
            r.sinr_emp_db.to_string(),
            r.pslr_theory_db.to_string(),
            r.pslr_emp_db.to_string(),
            r.config_hash.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_iteration_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    ensure_single_config(rows.iter().map(|r| r.config_hash.as_str()))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "algo", "sinr_db", "pslr_db", "config_hash"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            (r.sweep_value as usize).to_string(),
            r.algorithm.clone(),
            opt(r.sinr_db),
            opt(r.pslr_db),
            r.config_hash.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_snr_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    ensure_single_config(rows.iter().map(|r| r.config_hash.as_str()))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["snr_db", "algo", "range_rmse_m", "vel_rmse_mps", "config_hash"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.sweep_value.to_string(),
            r.algorithm.clone(),
            opt(r.range_rmse_m),
            opt(r.velocity_rmse_mps),
            r.config_hash.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::ConstellationKind;

    fn experiment(axis: SweepAxis, values: Vec<f64>) -> Experiment {
        let cfg = ScenarioConfig { snr_override_db: Some(0.0), ..ScenarioConfig::table_i() };
        Experiment {
            scenario: Scenario {
                targets: vec![TargetTruth::new(cfg.range_for_tap(82.0), 0.0, 1.0)],
                config: cfg,
                random_targets: None,
            },
            sweep: Sweep { axis, values },
            algorithms: Algorithm::ALL.to_vec(),
            trials: 2,
            seed: 1,
            cfar: CfarParams::default(),
            sic: SicParams::default(),
            esprit: EspritParams::default(),
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = derive_seed(1, 0, 0);
        assert_eq!(a, derive_seed(1, 0, 0));
        assert_ne!(a, derive_seed(1, 0, 1));
        assert_ne!(a, derive_seed(1, 1, 0));
        assert_ne!(derive_seed(1, 0, 1), derive_seed(1, 1, 0));
        assert_ne!(a, derive_seed(2, 0, 0));
    }

    #[test]
    fn rmse_examples() {
        let cfg = ScenarioConfig::table_i();
        let truths = [(300.0, 10.0), (700.0, -40.0)];
        assert_eq!(rmse(&truths, &truths, &cfg).unwrap(), RmseResult { range_rmse_m: 0.0, velocity_rmse_mps: 0.0 });
        let bin = cfg.range_bin_m();
        assert!((bin - 9.75887).abs() < 1e-4);
        let one = rmse(&[(300.0 + bin, 10.0)], &[(300.0, 10.0)], &cfg).unwrap();
        assert!((one.range_rmse_m - bin).abs() < 1e-12);
        let missed = rmse(&[(300.0, 10.0)], &truths, &cfg).unwrap();
        let half = unambiguous_ranges(&cfg).max_range_m / 2.0;
        assert!((missed.range_rmse_m - (half * half / 2.0).sqrt()).abs() < 1e-9);
        assert!((missed.velocity_rmse_mps - (max_velocity_mps(&cfg).powi(2) / 2.0).sqrt()).abs() < 1e-9);
        assert!(rmse(&truths, &[], &cfg).is_err());
        // Extra estimates are ignored once every truth is matched.
        let extra = rmse(&[(300.0, 10.0), (700.0, -40.0), (10.0, 0.0)], &truths, &cfg).unwrap();
        assert_eq!(extra.range_rmse_m, 0.0);
    }

    #[test]
    fn validation_catches_bad_experiments() {
        let mut exp = experiment(SweepAxis::CpLength, vec![9.0, 5.0]);
        exp.trials = 0;
        exp.scenario.config.constellation = ConstellationKind::Bpsk;
        let Err(Error::InvalidConfig(p)) = exp.validate() else { panic!("expected config error") };
        assert!(p.iter().any(|s| s.contains("trials")));
        assert!(p.iter().any(|s| s.contains("strictly increasing")));
        assert!(p.iter().any(|s| s.contains("E{s^2}")));
        assert!(experiment(SweepAxis::CpLength, vec![0.5]).validate().is_err());
        assert!(experiment(SweepAxis::CpLength, vec![200.0]).validate().is_err());
        assert!(experiment(SweepAxis::Snr, vec![-10.0, 0.0]).validate().is_ok());
    }

    #[test]
    fn experiment_json_round_trip_and_hash() {
        let exp = experiment(SweepAxis::Snr, vec![0.0]);
        let text = serde_json::to_string(&exp).unwrap();
        let back: Experiment = serde_json::from_str(&text).unwrap();
        assert_eq!(back, exp);
        assert_eq!(back.config_hash(), exp.config_hash());
        assert_eq!(exp.config_hash().len(), 16);
        let mut other = exp.clone();
        other.seed = 2;
        assert_ne!(other.config_hash(), exp.config_hash());
        let minimal = r#"{"scenario":{"config":{"fc":28e9,"delta_f":120e3,"N":128,"M":64,"N_cp":9,
            "noise_figure_dB":3,"T_temp":290,"constellation":"QPSK","seed":0},
            "targets":[{"range_m":600,"velocity_mps":0,"rcs_m2":1}]},
            "sweep":{"axis":"iteration","values":[0,1,2]}}"#;
        let e: Experiment = serde_json::from_str(minimal).unwrap();
        assert_eq!(e.trials, 100);
        assert_eq!(e.algorithms, Algorithm::ALL.to_vec());
        assert!(serde_json::from_str::<Experiment>(&minimal.replace("\"seed\":0}", "\"seed\":0,\"x\":1}")).is_err());
    }

    #[test]
    fn mixed_configs_are_rejected() {
        assert!(ensure_single_config(["a", "a"]).is_ok());
        assert!(ensure_single_config(["a", "b"]).is_err());
        let row = |h: &str| CpRow {
            n_cp: 0,
            sinr_theory_db: 0.0,
            sinr_asymp_db: 0.0,
            sinr_emp_db: 0.0,
            pslr_theory_db: 0.0,
            pslr_emp_db: 0.0,
            config_hash: h.into(),
        };
        assert!(write_cp_csv(&[row("a"), row("b")], Vec::new()).is_err());
    }

    #[test]
    fn cp_sweep_columns_and_theory() {
        let exp = experiment(SweepAxis::CpLength, vec![9.0, 45.0, 82.0]);
        let rows = sweep_cp_length(&exp, &mut |_| {}).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].sinr_theory_db < rows[1].sinr_theory_db);
        // Within the CP the SINR equals the configured SNR.
        assert!(rows[2].sinr_theory_db.abs() < 1e-9);
        let mut buf = Vec::new();
        write_cp_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n_cp,sinr_theory_db,sinr_asymp_db,sinr_emp_db,pslr_theory_db,pslr_emp_db,config_hash\n9,"));
    }

    #[test]
    fn iteration_zero_is_the_uncancelled_frame() {
        let mut exp = experiment(SweepAxis::Iteration, vec![0.0, 1.0]);
        exp.trials = 1;
        exp.algorithms = vec![Algorithm::SicDft];
        let rows = sweep_iterations(&exp, &mut |_| {}).unwrap();
        assert_eq!(rows.len(), 4);
        let cfg = exp.scenario.config.clone();
        let c = make_constellation(cfg.constellation).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(exp.seed, 0, 0));
        let t = synthesize_trial(&exp.scenario, &[&cfg], &c, &mut rng).unwrap().remove(0);
        let want = to_db(energy(&t.comps.y_free) / energy(&(&t.comps.y - &t.comps.y_free)));
        assert!((rows[0].sinr_db.unwrap() - want).abs() < 1e-9);
        assert_eq!(rows[2].algorithm, SUFFICIENT_CP);
    }
}
