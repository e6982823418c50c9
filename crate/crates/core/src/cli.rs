//! Command-line front end.
//!
//! Three commands share one set of flags:
//!
//! - `simulate` runs one closed loop and writes `trace.csv` and `metrics.txt`;
//! - `compare-patients` runs every cohort patient under each controller;
//! - `delay-sweep` searches the largest tolerated plant delay per controller.
//!
//! Each command also writes `resolved.toml` (the configuration with every
//! default expanded) and `manifest.toml`. Either file can be passed back with
//! `--config` to repeat the run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, ResolvedConfig};
use crate::error::{ModelError, SimError};
use crate::scenario::{
    compute_metrics, fmt_metric, max_tolerable_delay, run_closed_loop, ControllerKind,
    DelayTolerance, RunMetrics, SimTrace,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "doa-sim",
    version,
    about = "Closed-loop depth-of-anesthesia simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one closed-loop simulation.
    Simulate(CommonArgs),
    /// Run every cohort patient under each controller.
    ComparePatients(CommonArgs),
    /// Find the largest tolerated plant delay per controller.
    DelaySweep(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::ComparePatients(_) => "compare-patients",
            Command::DelaySweep(_) => "delay-sweep",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a) | Command::ComparePatients(a) | Command::DelaySweep(a) => a,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Controller to run. `compare-patients` and `delay-sweep` run both when omitted.
    #[arg(long)]
    pub controller: Option<ControllerKind>,
    /// Override a config value, e.g. `--set patient.td=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Noise seed; overrides `scenario.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Model(ModelError::InvalidParam { .. }) | SimError::InvalidScenario(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// What a run wrote and how to repeat it.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    /// Empty when the built-in defaults were used.
    pub config_path: String,
    /// SHA-256 of the config file bytes; empty without a config file.
    pub config_sha256: String,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub out_dir: String,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    /// Output files, relative to `out_dir`.
    pub files: Vec<String>,
    pub resolved: ResolvedConfig,
}

/// Collects output files and writes them in order from one thread.
struct OutputDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_trace(&mut self, name: &str, trace: &SimTrace) -> Result<(), CliError> {
        let mut buf = Vec::new();
        trace
            .write_csv(&mut buf)
            .map_err(|e| io_err(&self.dir.join(name), e))?;
        self.write(name, &buf)
    }

    fn write_csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let path = self.dir.join(name);
        w.write_record(header).map_err(|e| io_err(&path, e))?;
        for r in rows {
            w.write_record(r).map_err(|e| io_err(&path, e))?;
        }
        let buf = w.into_inner().map_err(|e| io_err(&path, e))?;
        self.write(name, &buf)
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Loads the configuration. A manifest written by an earlier run is accepted
/// in place of a config file; its `resolved` table is used.
fn load_config(
    args: &CommonArgs,
    extra: &[String],
) -> Result<(ResolvedConfig, String, String), CliError> {
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    let Some(path) = &args.config else {
        return Ok((
            ResolvedConfig::parse("", &overrides)?,
            String::new(),
            String::new(),
        ));
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let hash = hex::encode(Sha256::digest(text.as_bytes()));
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Validation(format!("config parse error: {e}")))?;
    if table.contains_key("artifact_version") {
        match table.remove("resolved") {
            Some(toml::Value::Table(t)) => table = t,
            _ => {
                return Err(CliError::Validation(
                    "manifest has no `resolved` table".into(),
                ))
            }
        }
    }
    let cfg = ResolvedConfig::from_table_with(table, &overrides)?;
    Ok((cfg, path.display().to_string(), hash))
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code; diagnostics go to stderr.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(done) => {
            print!("{}", done.report);
            eprintln!(
                "wrote {} files to {}",
                done.manifest.files.len(),
                done.manifest.out_dir
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Result of a successful command.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    /// Human-readable summary of the results.
    pub report: String,
}

pub fn run(cli: &Cli) -> Result<RunOutput, CliError> {
    let args = cli.command.args();
    let started = unix_now();
    let mut extra = Vec::new();
    if let Some(seed) = args.seed {
        extra.push(format!("scenario.seed={seed}"));
    }
    if let (Command::Simulate(_), Some(c)) = (&cli.command, args.controller) {
        extra.push(format!("scenario.controller=\"{c}\""));
    }
    let (cfg, config_path, config_sha256) = load_config(args, &extra)?;
    let mut out = OutputDir::create(&args.out)?;

    let report = match &cli.command {
        Command::Simulate(_) => simulate(&cfg, &mut out)?,
        Command::ComparePatients(a) => compare_patients(&cfg, a.controller, &mut out)?,
        Command::DelaySweep(a) => delay_sweep(&cfg, a.controller, &mut out)?,
    };

    out.write("resolved.toml", cfg.to_toml().as_bytes())?;
    out.files.push("manifest.toml".into());
    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.into(),
        command: cli.command.name().into(),
        config_path,
        config_sha256,
        overrides: args.overrides.iter().cloned().chain(extra).collect(),
        seed: cfg.scenario.seed,
        out_dir: args.out.display().to_string(),
        started_unix_s: started,
        finished_unix_s: unix_now(),
        files: out.files.clone(),
        resolved: cfg,
    };
    let text =
        toml::to_string(&manifest).map_err(|e| CliError::Runtime(format!("manifest: {e}")))?;
    let path = out.dir.join("manifest.toml");
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(RunOutput { manifest, report })
}

fn controllers(choice: Option<ControllerKind>) -> Vec<ControllerKind> {
    match choice {
        Some(c) => vec![c],
        None => ControllerKind::ALL.to_vec(),
    }
}

fn simulate(cfg: &ResolvedConfig, out: &mut OutputDir) -> Result<String, CliError> {
    let sc = cfg.scenario_for(cfg.patient, cfg.scenario.controller);
    let trace = run_closed_loop(&sc)?;
    let metrics = compute_metrics(&trace, cfg.scenario.band);
    out.write_trace("trace.csv", &trace)?;
    let mut summary = format!("controller = \"{}\"\n", sc.controller);
    summary.push_str(&metrics.to_summary());
    summary.push_str(&format!(
        "controller_failures = {}\n",
        trace.controller_failures.len()
    ));
    if let Some(last) = trace.rows.last() {
        summary.push_str(&format!("final_bis = {}\n", fmt_metric(last.bis_true)));
    }
    out.write("metrics.txt", summary.as_bytes())?;
    Ok(summary)
}

fn check_file_name(name: &str) -> Result<(), CliError> {
    if name.is_empty()
        || !name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(CliError::Validation(format!(
            "invalid config field `patients.{name}`: patient names may only use letters, digits, `_` and `-`"
        )));
    }
    Ok(())
}

pub const SUMMARY_HEADER: [&str; 11] = [
    "patient",
    "controller",
    "settling_time_s",
    "undershoot_bis",
    "total_drug_ugkg",
    "steady_state_error_bis",
    "band_entry_time_s",
    "band_bis",
    "in_bound",
    "controller_failures",
    "final_bis",
];

fn compare_patients(
    cfg: &ResolvedConfig,
    choice: Option<ControllerKind>,
    out: &mut OutputDir,
) -> Result<String, CliError> {
    for name in cfg.patients.keys() {
        check_file_name(name)?;
    }
    let jobs: Vec<(&String, ControllerKind)> = cfg
        .patients
        .keys()
        .flat_map(|n| controllers(choice).into_iter().map(move |c| (n, c)))
        .collect();
    let results: Vec<Result<(SimTrace, RunMetrics), SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(name, c)| {
                let sc = cfg.scenario_for(cfg.patients[*name], *c);
                s.spawn(move || {
                    let trace = run_closed_loop(&sc)?;
                    let m = compute_metrics(&trace, cfg.scenario.band);
                    Ok((trace, m))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });

    let mut rows = Vec::new();
    let mut drug = std::collections::BTreeMap::new();
    for ((name, c), res) in jobs.iter().zip(results) {
        let (trace, m) = res?;
        out.write_trace(&format!("trace_{name}_{c}.csv"), &trace)?;
        drug.insert((name.as_str(), *c), m.total_drug);
        rows.push(vec![
            name.to_string(),
            c.to_string(),
            fmt_metric(m.settling_time),
            fmt_metric(m.undershoot),
            fmt_metric(m.total_drug),
            fmt_metric(m.steady_state_error),
            fmt_metric(m.band_entry_time),
            fmt_metric(m.band),
            m.in_bound.to_string(),
            trace.controller_failures.len().to_string(),
            fmt_metric(trace.rows.last().map_or(f64::NAN, |r| r.bis_true)),
        ]);
    }
    out.write_csv("summary.csv", &SUMMARY_HEADER, &rows)?;

    let mut report =
        String::from("patient,state_space_drug_ugkg,baseline_drug_ugkg,ratio,within_110pct\n");
    for name in cfg.patients.keys() {
        if let (Some(ss), Some(b)) = (
            drug.get(&(name.as_str(), ControllerKind::StateSpaceEkf)),
            drug.get(&(name.as_str(), ControllerKind::Baseline)),
        ) {
            let ratio = ss / b;
            report.push_str(&format!(
                "{name},{},{},{},{}\n",
                fmt_metric(*ss),
                fmt_metric(*b),
                fmt_metric(ratio),
                ratio <= 1.1
            ));
        }
    }
    out.write("drug_economy.csv", report.as_bytes())?;

    Ok(tab_table(&SUMMARY_HEADER, &rows))
}

pub const DELAY_HEADER: [&str; 8] = [
    "controller",
    "increase_s",
    "max_patient_td_s",
    "nominal_td_s",
    "reference_td_s",
    "min_patient_td_s",
    "capped",
    "boundary_verified",
];

fn delay_sweep(
    cfg: &ResolvedConfig,
    choice: Option<ControllerKind>,
    out: &mut OutputDir,
) -> Result<String, CliError> {
    let band = cfg.scenario.band;
    let resolution = cfg.scenario.resolution;
    let kinds = controllers(choice);
    type Boundary = (DelayTolerance, SimTrace, Option<SimTrace>);
    let results: Vec<Result<Boundary, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = kinds
            .iter()
            .map(|c| {
                let template = cfg.scenario_for(cfg.patient, *c);
                s.spawn(move || {
                    let tol = max_tolerable_delay(&template, band, resolution)?;
                    let mut sc = template.clone();
                    sc.patient.td = tol.max_td();
                    let inside = run_closed_loop(&sc)?;
                    let outside = if tol.capped {
                        None
                    } else {
                        sc.patient.td = tol.max_td() + resolution;
                        Some(run_closed_loop(&sc)?)
                    };
                    Ok((tol, inside, outside))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep thread panicked"))
            .collect()
    });

    let mut rows = Vec::new();
    for (c, res) in kinds.iter().zip(results) {
        let (tol, inside, outside) = res?;
        out.write_trace(&format!("boundary_in_{c}.csv"), &inside)?;
        if let Some(t) = &outside {
            out.write_trace(&format!("boundary_out_{c}.csv"), t)?;
        }
        let mut probes = tol.probes.clone();
        probes.sort_by(|a, b| a.patient_td.total_cmp(&b.patient_td));
        let probe_rows: Vec<Vec<String>> = probes
            .iter()
            .map(|p| vec![fmt_metric(p.patient_td), p.in_bound.to_string()])
            .collect();
        out.write_csv(
            &format!("probes_{c}.csv"),
            &["patient_td_s", "in_bound"],
            &probe_rows,
        )?;
        rows.push(vec![
            c.to_string(),
            fmt_metric(tol.increase),
            fmt_metric(tol.max_td()),
            fmt_metric(tol.nominal_td),
            fmt_metric(tol.reference_td),
            fmt_metric(tol.min_td),
            tol.capped.to_string(),
            tol.boundary_verified.to_string(),
        ]);
    }
    out.write_csv("tolerable_delay.csv", &DELAY_HEADER, &rows)?;
    Ok(tab_table(&DELAY_HEADER, &rows))
}

fn tab_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join("\t");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join("\t"));
        s.push('\n');
    }
    s
}
