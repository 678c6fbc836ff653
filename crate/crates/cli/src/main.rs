//! `commutation`: calibrate, collect, fit, simulate and report.
//!
//! Every command writes into an output directory, starting with
//! `manifest.json`. Outputs contain no timestamps or worker counts, so a
//! rerun with the same inputs is byte-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use commutation_core::calibrate::{gd_calibrate, CalibrationError};
use commutation_core::gpff::{fit_and_validate, split_dataset, GpModel};
use commutation_core::metrics::{ma_filter, summarize, MaConfig};
use commutation_core::sim::{
    collect_eta_grid, run_scenario, EtaDataset, FrameFeedforward, Mode, SimError, SimLog, SteadyStateProbe,
};
use commutation_core::trajectory::plan_fourth_order;
use commutation_core::{Config, RunManifest, Vector2};
use serde_json::json;

const EXIT_CONFIG: u8 = 1;
const EXIT_NO_DESCENT: u8 = 2;
const EXIT_BFR_FLOOR: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "commutation", version, about = "Commutation-frame calibration and learned feedforward for a simulated planar motor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Static gradient-descent calibration of the commutation frame.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Validate and print the resolved configuration without simulating.
        #[arg(long)]
        dry_run: bool,
    },
    /// Set-point holds with the commutation regulator to build a training dataset.
    Collect {
        #[command(flatten)]
        common: Common,
        /// Points per side of a uniform grid over the workspace.
        #[arg(long, conflicts_with = "random")]
        grid: Option<usize>,
        /// Number of uniformly random set-points instead of a grid.
        #[arg(long)]
        random: Option<usize>,
        /// Seed for --random.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Worker threads; does not affect the output.
        #[arg(long, env = "COMMUTATION_WORKERS")]
        workers: Option<usize>,
    },
    /// Tune and fit the GP feedforward and report best fit ratios.
    FitGp {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV written by `collect`.
        #[arg(long)]
        dataset: PathBuf,
        /// Fraction of the dataset used for training.
        #[arg(long)]
        split: Option<f64>,
        /// Separate validation dataset; replaces the held-out split.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Minimum validation BFR in percent.
        #[arg(long)]
        bfr_floor: Option<f64>,
    },
    /// Run scan scenarios and write their logs.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// baseline, static-calibrated, dynamic, dynamic+ff or all.
        #[arg(long, default_value = "all")]
        mode: String,
        /// GP model file for dynamic+ff.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Worker threads for batch runs; does not affect the output.
        #[arg(long, env = "COMMUTATION_WORKERS")]
        workers: Option<usize>,
    },
    /// Summarize scenario logs: peak moving-average error and reductions.
    Report {
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
        /// Scenario log CSVs.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
    /// Write the sampled scan profile.
    Profile {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

type Outcome = Result<(), Failure>;

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_CONFIG, e.to_string())
}

fn sim_err(e: SimError) -> Failure {
    match e {
        SimError::NumericalDivergence { .. } => Failure::new(EXIT_DIVERGENCE, e.to_string()),
        other => Failure::new(EXIT_CONFIG, other.to_string()),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display()))
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, content: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, content).map_err(|e| io_err(path, e))
}

/// Loads the configuration and starts a manifest over it.
fn load(common: &Common, command: &str) -> Result<(Config, RunManifest), Failure> {
    let (cfg, text) = match &common.config {
        Some(p) => {
            let bytes = read_file(p)?;
            let text = String::from_utf8(bytes).map_err(|e| io_err(p, e))?;
            (Config::from_toml(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", p.display())))?, text)
        }
        None => (Config::default(), String::new()),
    };
    let mut manifest = RunManifest::new(command, cfg.seed);
    manifest.config_path = common.config.as_ref().map(|p| p.to_string_lossy().into_owned());
    let manifest = manifest.with_input("config", text.as_bytes());
    Ok((cfg, manifest))
}

/// Creates the output directory and writes the manifest first.
fn start_output(out: &Path, manifest: &RunManifest) -> Outcome {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let text = serde_json::to_string_pretty(manifest).expect("serializable") + "\n";
    write_file(&out.join("manifest.json"), text)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), SimError>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(sim_err)?;
    Ok(buf)
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map(|pool| pool.install(f))
            .map_err(config_err),
        None => Ok(f()),
    }
}

fn cmd_calibrate(common: Common, dry_run: bool) -> Outcome {
    let (cfg, manifest) = load(&common, "calibrate")?;
    let sys = cfg.system();
    let gd = cfg.gd_config(&sys);
    gd.validate().map_err(config_err)?;
    if dry_run {
        println!("{}", cfg.to_toml());
        println!("# resolved calibration\n{}", serde_json::to_string_pretty(&gd).expect("serializable"));
        return Ok(());
    }
    start_output(&common.out, &manifest)?;
    let mut probe = SteadyStateProbe::new(&sys);
    if let Some(t) = cfg.measurement.settle_s {
        probe.t_settle = t;
    }
    if let Some(t) = cfg.measurement.average_s {
        probe.t_avg = t;
    }
    let (eta, trace) = match gd_calibrate(&gd, sys.commutation.limit, &probe) {
        Ok(r) => r,
        Err(CalibrationError::NoDescent { lambda, trace }) => {
            let buf = csv_bytes(|b| trace.write_csv(b, Some(&manifest.to_value())))?;
            write_file(&common.out.join("gd_trace.csv"), buf)?;
            return Err(Failure::new(EXIT_NO_DESCENT, format!("no descent direction found (lambda = {lambda:.3e})")));
        }
        Err(CalibrationError::Sim(e)) => return Err(sim_err(e)),
        Err(e) => return Err(config_err(e)),
    };
    let buf = csv_bytes(|b| trace.write_csv(b, Some(&manifest.to_value())))?;
    write_file(&common.out.join("gd_trace.csv"), buf)?;
    let result = json!({
        "manifest": manifest,
        "eta_m": [eta.x, eta.y],
        "objective_n": trace.final_objective,
        "iterations": trace.iterations.len(),
        "converged": trace.converged,
        "measurements": probe.count(),
    });
    write_file(&common.out.join("eta.json"), serde_json::to_string_pretty(&result).expect("serializable") + "\n")?;
    let mut calibrated = cfg.clone();
    calibrated.scenario.static_eta_m = Some([eta.x, eta.y]);
    write_file(&common.out.join("calibrated.toml"), calibrated.to_toml())?;
    println!(
        "eta* = [{:.6e}, {:.6e}] m after {} iterations ({} steady-state measurements), J = {:.4e} N{}",
        eta.x,
        eta.y,
        trace.iterations.len(),
        probe.count(),
        trace.final_objective,
        if trace.converged { "" } else { " (iteration limit reached)" }
    );
    Ok(())
}

fn cmd_collect(common: Common, grid: Option<usize>, random: Option<usize>, seed: u64, workers: Option<usize>) -> Outcome {
    let (cfg, mut manifest) = load(&common, "collect")?;
    let sys = cfg.system();
    let points: Vec<Vector2<f64>> = match (grid, random) {
        (_, Some(k)) => {
            manifest.seed = seed;
            sys.workspace.random_points(k, seed)
        }
        (Some(n), None) => sys.workspace.grid(n, n),
        (None, None) => cfg.collect_grid(),
    };
    if points.is_empty() {
        return Err(config_err("the set-point list is empty"));
    }
    start_output(&common.out, &manifest)?;
    let hold = cfg.hold_time(&sys);
    let ds = collect_eta_grid(&sys, &points, hold, Vector2::zeros(), workers).map_err(sim_err)?;
    let buf = csv_bytes(|b| ds.write_csv(b, Some(&manifest.to_value())))?;
    write_file(&common.out.join("eta_dataset.csv"), buf)?;
    let skipped = ds.records.iter().filter(|r| !r.valid).count();
    println!("collected {} set-points ({} skipped after divergence)", ds.len(), skipped);
    Ok(())
}

fn read_dataset(path: &Path) -> Result<(EtaDataset, Vec<u8>), Failure> {
    let bytes = read_file(path)?;
    let ds = EtaDataset::read_csv(&bytes[..]).map_err(|e| io_err(path, e))?;
    Ok((ds, bytes))
}

fn cmd_fit_gp(
    common: Common,
    dataset: PathBuf,
    split: Option<f64>,
    validation: Option<PathBuf>,
    bfr_floor: Option<f64>,
) -> Outcome {
    let (cfg, manifest) = load(&common, "fit-gp")?;
    let (ds, bytes) = read_dataset(&dataset)?;
    let mut manifest = manifest.with_input("dataset", &bytes);
    if ds.valid().count() < 10 {
        return Err(config_err(format!("{}: need at least 10 valid rows, got {}", dataset.display(), ds.valid().count())));
    }
    let split = split.unwrap_or(cfg.gp.split);
    if !(split > 0.0 && split <= 1.0) {
        return Err(config_err(format!("--split must lie in (0, 1], got {split}")));
    }
    let floor = bfr_floor.unwrap_or(cfg.gp.bfr_floor_pct);
    let (train, held_out) = split_dataset(&ds, split, cfg.gp.seed);
    let val = match &validation {
        Some(p) => {
            let (v, b) = read_dataset(p)?;
            manifest = manifest.with_input("validation", &b);
            Some(v)
        }
        None if held_out.valid().count() >= 2 => Some(held_out),
        None => None,
    };
    start_output(&common.out, &manifest)?;
    let (model, report) = fit_and_validate(&train, val.as_ref(), cfg.gp_period(), &cfg.tune_budget())
        .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    write_file(&common.out.join("gp_model.json"), model.to_json() + "\n")?;
    let summary = json!({
        "manifest": manifest,
        "training_points": train.valid().count(),
        "validation_points": val.as_ref().map(|v| v.valid().count()),
        "bfr_pct": report,
        "bfr_floor_pct": floor,
        "kernel": [model.axes[0].params, model.axes[1].params],
    });
    write_file(&common.out.join("bfr.json"), serde_json::to_string_pretty(&summary).expect("serializable") + "\n")?;
    print!("{}", report.table());
    if let Some(v) = report.validation {
        if v.iter().any(|b| *b < floor) {
            return Err(Failure::new(
                EXIT_BFR_FLOOR,
                format!("validation BFR [{:.2}, {:.2}] % below the floor of {floor:.2} %", v[0], v[1]),
            ));
        }
    }
    Ok(())
}

fn write_log(out: &Path, mode: Mode, log: &SimLog, manifest: &RunManifest) -> Result<PathBuf, Failure> {
    let path = out.join(format!("log_{}.csv", mode.slug()));
    let buf = csv_bytes(|b| log.write_csv(b, Some(&manifest.to_value())))?;
    write_file(&path, buf)?;
    Ok(path)
}

fn write_report(out: &Path, named: &[(String, SimLog)], manifest: &RunManifest) -> Outcome {
    let rows = summarize(named).map_err(config_err)?;
    let report = json!({ "manifest": manifest, "scenarios": rows });
    write_file(&out.join("report.json"), serde_json::to_string_pretty(&report).expect("serializable") + "\n")?;
    // moving-average traces on each log's scan axis
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t_s".to_string()];
    header.extend(named.iter().map(|(n, _)| format!("ma_{n}_m")));
    let mut columns = Vec::new();
    let mut time = Vec::new();
    for (_, log) in named {
        let cfg = MaConfig::for_log(log);
        let axis = log.header.scan_axis.index();
        let e: Vec<f64> = log.records.iter().map(|r| r.e_pos[axis]).collect();
        let tr = ma_filter(&e, cfg.window_samples().map_err(config_err)?).map_err(config_err)?;
        if time.is_empty() {
            time = (0..tr.values.len()).map(|i| log.records[tr.offset + i].t).collect();
        }
        columns.push(tr.values);
    }
    let n = columns.iter().map(|c| c.len()).min().unwrap_or(0).min(time.len());
    let mut buf = format!("# {}\n", manifest.to_value()).into_bytes();
    w.write_record(&header).map_err(config_err)?;
    for i in 0..n {
        let mut row = vec![time[i].to_string()];
        row.extend(columns.iter().map(|c| c[i].to_string()));
        w.write_record(&row).map_err(config_err)?;
    }
    buf.extend(w.into_inner().map_err(config_err)?);
    write_file(&out.join("ma_traces.csv"), buf)?;
    for r in &rows {
        let red = r.reduction_vs_baseline_pct.map_or(String::new(), |p| format!("  reduction {p:6.2} %"));
        println!("{:<18} peak MA {:.4e} m  rms {:.4e} m{red}", r.mode.name(), r.peak_ma_m, r.rms_error_m);
    }
    Ok(())
}

fn cmd_simulate(common: Common, mode: String, model: Option<PathBuf>, workers: Option<usize>) -> Outcome {
    let (mut cfg, mut manifest) = load(&common, "simulate")?;
    let modes: Vec<Mode> = if mode == "all" {
        Mode::ALL.to_vec()
    } else {
        vec![mode.parse::<Mode>().map_err(config_err)?]
    };
    let gp = match &model {
        Some(p) => {
            let bytes = read_file(p)?;
            manifest = manifest.with_input("model", &bytes);
            let text = String::from_utf8(bytes).map_err(|e| io_err(p, e))?;
            Some(GpModel::from_json(&text).map_err(|e| io_err(p, e))?)
        }
        None => None,
    };
    if modes.contains(&Mode::DynamicFf) && gp.is_none() {
        return Err(config_err("mode dynamic+ff requires --model"));
    }
    start_output(&common.out, &manifest)?;
    if modes.contains(&Mode::StaticCalibrated) && cfg.scenario.static_eta_m.is_none() {
        let sys = cfg.system();
        let gd = cfg.gd_config(&sys);
        let probe = SteadyStateProbe::new(&sys);
        let eta = match gd_calibrate(&gd, sys.commutation.limit, &probe) {
            Ok((eta, _)) => eta,
            Err(CalibrationError::NoDescent { .. }) => {
                return Err(Failure::new(EXIT_NO_DESCENT, "static calibration found no descent direction"))
            }
            Err(CalibrationError::Sim(e)) => return Err(sim_err(e)),
            Err(e) => return Err(config_err(e)),
        };
        println!("static calibration: eta* = [{:.6e}, {:.6e}] m", eta.x, eta.y);
        cfg.scenario.static_eta_m = Some([eta.x, eta.y]);
    }
    let ff: Option<&dyn FrameFeedforward> = gp.as_ref().map(|m| m as &dyn FrameFeedforward);
    let results = with_pool(workers, || {
        use rayon::prelude::*;
        modes.par_iter().map(|m| (*m, run_scenario(&cfg.scenario(*m), ff))).collect::<Vec<_>>()
    })?;
    let mut named = Vec::new();
    for (m, res) in results {
        match res {
            Ok(log) => {
                write_log(&common.out, m, &log, &manifest)?;
                named.push((m.slug().to_string(), log));
            }
            Err(SimError::NumericalDivergence { t, error, partial }) => {
                if let Some(log) = partial {
                    write_log(&common.out, m, &log, &manifest)?;
                }
                return Err(Failure::new(
                    EXIT_DIVERGENCE,
                    format!("{m}: numerical divergence at t = {t:.6} s (|e_pos| = {error:.3e} m); partial log kept"),
                ));
            }
            Err(e) => return Err(sim_err(e)),
        }
    }
    write_report(&common.out, &named, &manifest)
}

fn cmd_report(out: PathBuf, logs: Vec<PathBuf>) -> Outcome {
    let mut manifest = RunManifest::new("report", 0);
    let mut named = Vec::new();
    for p in &logs {
        let bytes = read_file(p)?;
        let log = SimLog::read_csv(&bytes[..]).map_err(|e| io_err(p, e))?;
        let name = p.file_stem().map_or_else(|| p.to_string_lossy().into_owned(), |s| s.to_string_lossy().into_owned());
        manifest = manifest.with_input(&name, &bytes);
        named.push((name, log));
    }
    start_output(&out, &manifest)?;
    write_report(&out, &named, &manifest)
}

fn cmd_profile(common: Common) -> Outcome {
    let (cfg, manifest) = load(&common, "profile")?;
    let profile = plan_fourth_order(&cfg.profile()).map_err(config_err)?;
    start_output(&common.out, &manifest)?;
    let mut buf = Vec::new();
    profile.write_csv(&mut buf, Some(&manifest.to_value().to_string())).map_err(config_err)?;
    write_file(&common.out.join("profile.csv"), buf)?;
    println!(
        "duration {:.6} s, cruise [{:.6}, {:.6}] s, {} samples",
        profile.duration,
        profile.cruise.0,
        profile.cruise.1,
        profile.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Calibrate { common, dry_run } => cmd_calibrate(common, dry_run),
        Command::Collect { common, grid, random, seed, workers } => cmd_collect(common, grid, random, seed, workers),
        Command::FitGp { common, dataset, split, validation, bfr_floor } => {
            cmd_fit_gp(common, dataset, split, validation, bfr_floor)
        }
        Command::Simulate { common, mode, model, workers } => cmd_simulate(common, mode, model, workers),
        Command::Report { out, logs } => cmd_report(out, logs),
        Command::Profile { common } => cmd_profile(common),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
