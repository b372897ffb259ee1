//! Command-line front end. `cli_main` returns the process exit code:
//! 0 on success, 1 for usage or configuration errors, 2 for runtime errors.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analytics::{sidelobe_level, sinr_closed_form, SidelobeReport, SinrReport};
use crate::echo::{write_matrix_csv, MatrixEnvelope};
use crate::error::{Error, Result};
use crate::esprit::{esprit_pairs, sic_esprit};
use crate::experiment::{
    derive_seed, rdm_compare, snr_labels, sweep_cp_length, sweep_iterations, sweep_snr_rmse, synthesize_trial,
    write_cp_csv, write_iteration_csv, write_snr_csv, Experiment, Sweep, SweepAxis, Trial,
};
use crate::params::{apply_snr_override, derive_link, unambiguous_ranges, ScenarioConfig, TargetTruth, UnambiguousRanges};
use crate::rdm::{compute_rdm, sic_dft, to_db, EstimateRecord, SicOutcome};
use crate::waveform::make_constellation;

#[derive(Debug, Parser)]
#[command(name = "cpisac", version, about = "OFDM sensing beyond the cyclic prefix")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Scenario or experiment JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output file or directory; stdout when omitted where possible.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a configuration and print its derived quantities.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize one frame and write its components.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Closed-form SINR and sidelobe predictions.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Range-Doppler map of one frame.
    Rdm {
        #[command(flatten)]
        common: Common,
        /// Write SIC-DFT, DFT and sufficient-CP maps side by side.
        #[arg(long)]
        compare: bool,
    },
    /// Successive interference cancellation with DFT estimates.
    SicDft {
        #[command(flatten)]
        common: Common,
    },
    /// Successive interference cancellation with ESPRIT estimates.
    SicEsprit {
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo sweep over CP length, iteration count or SNR.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_parser = parse_axis)]
        axis: Option<SweepAxis>,
    },
}

fn parse_axis(s: &str) -> std::result::Result<SweepAxis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Error tagged with the exit code it maps to.
struct Failure {
    code: i32,
    error: Error,
}

fn config_err(error: Error) -> Failure {
    Failure { code: 1, error }
}

fn runtime_err(error: Error) -> Failure {
    Failure { code: 2, error }
}

type CliResult<T> = std::result::Result<T, Failure>;

pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

/// Reads an experiment, a scenario or a bare scenario configuration.
pub fn load_experiment(path: &Path) -> Result<Experiment> {
    Experiment::from_json(&fs::read_to_string(path)?)
}

fn load(common: &Common) -> CliResult<Experiment> {
    let mut exp = load_experiment(&common.config).map_err(|e| match e {
        Error::Io(io) => config_err(Error::InvalidConfig(vec![format!("{}: {io}", common.config.display())])),
        other => config_err(other),
    })?;
    if let Some(seed) = common.seed {
        exp.seed = seed;
    }
    Ok(exp)
}

fn require_targets(exp: &Experiment) -> CliResult<()> {
    exp.scenario.validate().map_err(config_err)?;
    if exp.scenario.target_count() == 0 {
        return Err(config_err(Error::InvalidConfig(vec!["the scenario has no targets".into()])));
    }
    Ok(())
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Validate { common } => validate(&common),
        Command::Simulate { common } => simulate(&common),
        Command::Analyze { common } => analyze(&common),
        Command::Rdm { common, compare } => rdm(&common, compare),
        Command::SicDft { common } => sic(&common, false),
        Command::SicEsprit { common } => sic(&common, true),
        Command::Sweep { common, trials, axis } => sweep(&common, trials, axis),
    }
}

fn open_out(out: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| runtime_err(e.into()))?;
            }
            Box::new(BufWriter::new(File::create(p).map_err(|e| runtime_err(e.into()))?))
        }
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn out_dir(common: &Common) -> CliResult<&Path> {
    let dir = common
        .out
        .as_deref()
        .ok_or_else(|| config_err(Error::InvalidConfig(vec!["--out <DIR> is required".into()])))?;
    fs::create_dir_all(dir).map_err(|e| runtime_err(e.into()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let mut w = open_out(out)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| runtime_err(e.into()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| runtime_err(e.into()))
}

#[derive(Serialize)]
struct TargetSummary {
    range_m: f64,
    velocity_mps: f64,
    tau_s: f64,
    fd_hz: f64,
    tap: usize,
    doppler_bin: f64,
    rho: f64,
    beyond_cp: bool,
    alpha_abs: f64,
}

#[derive(Serialize)]
struct ValidateReport {
    config_hash: String,
    bandwidth_hz: f64,
    symbol_time_s: f64,
    range_bin_m: f64,
    velocity_bin_mps: f64,
    unambiguous: UnambiguousRanges,
    targets: Vec<TargetSummary>,
}

fn target_summaries(exp: &Experiment) -> Result<Vec<TargetSummary>> {
    let cfg = &exp.scenario.config;
    let mut links = exp.scenario.targets.iter().map(|t| derive_link(t, cfg, 0.0)).collect::<Result<Vec<_>>>()?;
    apply_snr_override(&mut links, cfg);
    Ok(exp
        .scenario
        .targets
        .iter()
        .zip(&links)
        .map(|(t, l)| TargetSummary {
            range_m: t.range_m,
            velocity_mps: t.velocity_mps,
            tau_s: l.tau_s,
            fd_hz: l.fd_hz,
            tap: l.l,
            doppler_bin: l.doppler_bins(cfg),
            rho: l.rho,
            beyond_cp: l.beyond_cp,
            alpha_abs: l.alpha.norm(),
        })
        .collect())
}

fn validate(common: &Common) -> CliResult<()> {
    let exp = load(common)?;
    exp.scenario.validate().map_err(config_err)?;
    let cfg = &exp.scenario.config;
    let report = ValidateReport {
        config_hash: exp.config_hash(),
        bandwidth_hz: cfg.bandwidth(),
        symbol_time_s: cfg.total_symbol_time(),
        range_bin_m: cfg.range_bin_m(),
        velocity_bin_mps: cfg.velocity_bin_mps(),
        unambiguous: unambiguous_ranges(cfg),
        targets: target_summaries(&exp).map_err(config_err)?,
    };
    write_json(&report, common.out.as_deref())
}

/// The frame every single-shot command works on.
fn draw_frame(exp: &Experiment, configs: &[&ScenarioConfig]) -> CliResult<Vec<Trial>> {
    let constellation = make_constellation(exp.scenario.config.constellation).map_err(config_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(exp.seed, 0, 0));
    synthesize_trial(&exp.scenario, configs, &constellation, &mut rng).map_err(runtime_err)
}

fn simulate(common: &Common) -> CliResult<()> {
    let exp = load(common)?;
    require_targets(&exp)?;
    let dir = out_dir(common)?;
    let trial = draw_frame(&exp, &[&exp.scenario.config])?.remove(0);
    let hash = exp.config_hash();
    let c = &trial.comps;
    let parts = [
        ("S", &trial.frame.s),
        ("Y", &c.y),
        ("Y_free", &c.y_free),
        ("Y_ISI", &c.y_isi),
        ("Y_ICI", &c.y_ici),
        ("Z", &c.z),
    ];
    for (name, mat) in parts {
        match common.format {
            Format::Csv => {
                let w = open_out(Some(&dir.join(format!("{name}.csv"))))?;
                write_matrix_csv(mat, w).map_err(runtime_err)?;
            }
            Format::Json => write_json(&MatrixEnvelope::new(&hash, name, mat), Some(&dir.join(format!("{name}.json"))))?,
        }
    }
    #[derive(Serialize)]
    struct Truth<'a> {
        config_hash: &'a str,
        targets: &'a [TargetTruth],
        links: &'a [crate::params::TargetLink],
    }
    write_json(&Truth { config_hash: &hash, targets: &trial.truths, links: &trial.links }, Some(&dir.join("truth.json")))?;
    eprintln!("wrote frame {}x{} to {}", c.y.nrows(), c.y.ncols(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeReport {
    config_hash: String,
    sinr_db: f64,
    sinr_asymptotic_db: f64,
    sinr: SinrReport,
    pslr_db: Vec<f64>,
    sidelobe: SidelobeReport,
    targets: Vec<TargetSummary>,
}

fn analyze(common: &Common) -> CliResult<()> {
    let exp = load(common)?;
    require_targets(&exp)?;
    if exp.scenario.random_targets.is_some() {
        return Err(config_err(Error::InvalidConfig(vec!["analyze needs fixed targets".into()])));
    }
    let cfg = &exp.scenario.config;
    let mut links = exp.scenario.targets.iter().map(|t| derive_link(t, cfg, 0.0)).collect::<Result<Vec<_>>>().map_err(config_err)?;
    apply_snr_override(&mut links, cfg);
    let mu4 = make_constellation(cfg.constellation).map_err(config_err)?.mu4();
    let sinr = sinr_closed_form(cfg, &links);
    let sidelobe = sidelobe_level(cfg, &links, mu4);
    let report = AnalyzeReport {
        config_hash: exp.config_hash(),
        sinr_db: to_db(sinr.sinr_exact),
        sinr_asymptotic_db: to_db(sinr.sinr_asymptotic),
        sinr,
        pslr_db: sidelobe.pslr_per_target.iter().map(|p| to_db(*p)).collect(),
        sidelobe,
        targets: target_summaries(&exp).map_err(config_err)?,
    };
    write_json(&report, common.out.as_deref())
}

fn rdm(common: &Common, compare: bool) -> CliResult<()> {
    let exp = load(common)?;
    require_targets(&exp)?;
    if !compare {
        let trial = draw_frame(&exp, &[&exp.scenario.config])?.remove(0);
        let map = compute_rdm(&trial.comps.y, &trial.frame.s).map_err(runtime_err)?;
        let w = open_out(common.out.as_deref())?;
        return map.write_csv(&exp.scenario.config, w).map_err(runtime_err);
    }
    let dir = out_dir(common)?;
    let cmp = rdm_compare(&exp).map_err(runtime_err)?;
    for p in &cmp.panels {
        let w = open_out(Some(&dir.join(format!("rdm_{}.csv", p.label))))?;
        p.rdm.write_csv(&p.config, w).map_err(runtime_err)?;
        eprintln!("{}: median floor {:.2} dB, peaks present {:?}", p.label, p.median_floor_db, p.peaks_present);
    }
    write_json(&cmp, Some(&dir.join("summary.json")))
}

#[derive(Serialize)]
struct SicReport<'a> {
    config_hash: String,
    algorithm: &'static str,
    converged: bool,
    iterations: usize,
    aborted: Option<&'a str>,
    estimates: Vec<EstimateRecord>,
    truth: &'a [TargetTruth],
    #[serde(skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
}

fn sic(common: &Common, use_esprit: bool) -> CliResult<()> {
    let exp = load(common)?;
    require_targets(&exp)?;
    let cfg = &exp.scenario.config;
    let trial = draw_frame(&exp, &[cfg])?.remove(0);
    let (y, s) = (&trial.comps.y, &trial.frame.s);
    let (outcome, warnings): (SicOutcome, Vec<String>) = if use_esprit {
        let params = exp.esprit_params();
        // Surface plan problems as configuration errors before running.
        params.plan(cfg).map_err(config_err)?;
        let r = sic_esprit(y, s, cfg, &exp.sic, &params).map_err(runtime_err)?;
        let warnings = match r.estimate {
            Some(e) => e.warnings,
            None => esprit_pairs(y, s, cfg, &params).map(|e| e.warnings).unwrap_or_default(),
        };
        (r.outcome, warnings)
    } else {
        exp.cfar.check(cfg.n, cfg.m).map_err(config_err)?;
        (sic_dft(y, s, cfg, &exp.sic, &exp.cfar_params()).map_err(runtime_err)?.outcome, Vec::new())
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    for it in &outcome.trace {
        eprintln!(
            "iteration {}: {} targets, energy delta {:.3e}, pslr {:.2} dB",
            it.k,
            it.estimates.len(),
            it.energy_delta,
            it.pslr_db
        );
    }
    let report = SicReport {
        config_hash: exp.config_hash(),
        algorithm: if use_esprit { "sic_esprit" } else { "sic_dft" },
        converged: outcome.converged,
        iterations: outcome.iterations(),
        aborted: outcome.aborted.as_deref(),
        estimates: outcome.estimates.iter().map(|e| e.record(cfg)).collect(),
        truth: &trial.truths,
        warnings,
    };
    match &common.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| runtime_err(e.into()))?;
            write_json(&report, Some(&dir.join("estimates.json")))?;
            let w = open_out(Some(&dir.join("trace.csv")))?;
            outcome.write_trace_csv(w).map_err(runtime_err)
        }
        None => write_json(&report, None),
    }
}

fn sweep(common: &Common, trials: Option<usize>, axis: Option<SweepAxis>) -> CliResult<()> {
    let mut exp = load(common)?;
    if let Some(t) = trials {
        exp.trials = t;
    }
    if let Some(a) = axis {
        if a != exp.sweep.axis {
            exp.sweep = Sweep::default_for(a, &exp.scenario.config);
        }
    }
    exp.validate().map_err(config_err)?;
    eprintln!(
        "sweep {:?} over {} points, {} trials, config {}",
        exp.sweep.axis,
        exp.sweep.values.len(),
        exp.trials,
        exp.config_hash()
    );
    let mut progress = |line: &str| eprintln!("{line}");
    let out = common.out.as_deref();
    match exp.sweep.axis {
        SweepAxis::CpLength => {
            let rows = sweep_cp_length(&exp, &mut progress).map_err(runtime_err)?;
            match common.format {
                Format::Csv => write_cp_csv(&rows, open_out(out)?).map_err(runtime_err),
                Format::Json => write_json(&rows, out),
            }
        }
        SweepAxis::Iteration => {
            let rows = sweep_iterations(&exp, &mut progress).map_err(runtime_err)?;
            match common.format {
                Format::Csv => write_iteration_csv(&rows, open_out(out)?).map_err(runtime_err),
                Format::Json => write_json(&rows, out),
            }
        }
        SweepAxis::Snr => {
            eprintln!("algorithms: {}", snr_labels(&exp).join(", "));
            let rows = sweep_snr_rmse(&exp, &mut progress).map_err(runtime_err)?;
            match common.format {
                Format::Csv => write_snr_csv(&rows, open_out(out)?).map_err(runtime_err),
                Format::Json => write_json(&rows, out),
            }
        }
    }
}
