use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tcl_testbed::analysis::{
    dephasing_metric, duty_cycle, on_power_points, power_temperature_fit, read_switch_log_csv, read_trace_csv,
    switch_log_from_meter, switch_log_from_trace, temperature_histogram, warmup_end, AnalysisError,
    DEFAULT_WARMUP_CYCLES, ON_TRANSIENT_SKIP_S, SWITCH_LOG_CSV_HEADER, TRACE_CSV_HEADER,
};
use tcl_testbed::client::{square_wave_exerciser, ClientError};
use tcl_testbed::config::{ConfigError, ExperimentConfig};
use tcl_testbed::etp::{HouseParams, Mode};
use tcl_testbed::experiment::{self, cycle_rows, histogram_rows, post_warmup, ExperimentError, CYCLES_CSV_HEADER};
use tcl_testbed::fleet::SwitchLog;
use tcl_testbed::telemetry::{
    inrush_summary, read_inrush_csv, read_meter_csv, TelemetryError, INRUSH_CSV_HEADER, METER_CSV_HEADER,
};

/// Environment variable holding the log filter, e.g. `debug` or
/// `tcl_testbed=trace`.
const LOG_ENV: &str = "TCL_TESTBED_LOG";

#[derive(Parser)]
#[command(name = "tcl-testbed", version, about = "Virtual air-conditioner fleet testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a config file.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run a HEAT_SWEEP, FHM_SWEEP or AMBIENT_SWEEP config.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Serve the configured fleet to one external controller.
    Serve {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Connect to a server and drive it with a square wave of requests.
    Exercise {
        endpoint: String,
        /// Square-wave period, s.
        #[arg(long)]
        period: f64,
        /// ON share of each period, percent. Omit to stay silent.
        #[arg(long)]
        duty: Option<f64>,
    },
    /// Compute a metric from CSV artifacts and print it as CSV.
    Analyze {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        kind: Kind,
        /// Complete cycles discarded per house.
        #[arg(long, default_value_t = DEFAULT_WARMUP_CYCLES)]
        warmup: usize,
        /// Ambient temperature of each meter file, °C (power-fit).
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        ambient: Vec<f64>,
        /// Histogram bins across [lo, hi].
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Histogram lower edge, °C; defaults to the default T-.
        #[arg(long)]
        lo: Option<f64>,
        /// Histogram upper edge, °C; defaults to the default T+.
        #[arg(long)]
        hi: Option<f64>,
        /// Histogram mode filter.
        #[arg(long)]
        mode: Option<ModeArg>,
        /// Release time of the synchronizing forcing, s (dephasing).
        #[arg(long, default_value_t = 0.0)]
        release: f64,
        /// Cycles tracked after release (dephasing).
        #[arg(long, default_value_t = 5)]
        cycles: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Duty,
    Cycles,
    Histogram,
    PowerFit,
    Dephasing,
    Inrush,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    On,
    Off,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::On => Mode::On,
            ModeArg::Off => Mode::Off,
        }
    }
}

/// Failure classes, mapped onto the exit status.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(e) => e.into(),
            ExperimentError::WrongScenario(_) | ExperimentError::Client(ClientError::InvalidArgument(_)) => {
                Failure::Config(e.to_string())
            }
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::InvalidArgument(m) => Failure::Config(m),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::InvalidArgument(_) => Failure::Config(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Writes stdout lines, treating a closed pipe (`| head`) as success.
fn print_lines(lines: impl IntoIterator<Item = String>) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    for line in lines {
        match writeln!(out, "{line}") {
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => return Ok(()),
            other => other?,
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load(path: &Path, output_dir: Option<PathBuf>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

fn report_files(files: &[PathBuf]) -> Result<(), Failure> {
    print_lines(files.iter().map(|f| f.display().to_string()))
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, output_dir } => {
            let cfg = load(&config, output_dir)?;
            let outcome = experiment::run(&cfg)?;
            report_files(&outcome.files)?;
        }
        Command::Sweep { config, output_dir } => {
            let cfg = load(&config, output_dir)?;
            let outcome = experiment::sweep(&cfg)?;
            report_files(&outcome.files)?;
        }
        Command::Serve { config, output_dir } => {
            let mut cfg = load(&config, output_dir)?;
            cfg.scenario = tcl_testbed::config::Scenario::Serve;
            let outcome = experiment::run(&cfg)?;
            report_files(&outcome.files)?;
        }
        Command::Exercise { endpoint, period, duty } => {
            let report = square_wave_exerciser(&endpoint, period, duty)?;
            let rows = report
                .verdicts
                .iter()
                .map(|(step, v)| format!("{step},{},{},{}", v.house_id, v.accepted, v.reason.as_str()));
            print_lines(std::iter::once("step,house_id,accepted,reason".to_owned()).chain(rows))?;
            for (code, message) in &report.errors {
                eprintln!("server error {code:?}: {message}");
            }
            log::info!(
                "{} steps, {} requests, {} rejected",
                report.steps,
                report.requests_sent,
                report.rejections()
            );
        }
        Command::Analyze {
            csv,
            kind,
            warmup,
            ambient,
            bins,
            lo,
            hi,
            mode,
            release,
            cycles,
        } => {
            let rows = analyze(
                &csv,
                kind,
                &AnalyzeArgs {
                    warmup,
                    ambient,
                    bins,
                    lo,
                    hi,
                    mode: mode.map(Mode::from),
                    release,
                    cycles,
                },
            )?;
            print_lines(rows.into_iter().map(|r| r.join(",")))?;
        }
    }
    Ok(())
}

struct AnalyzeArgs {
    warmup: usize,
    ambient: Vec<f64>,
    bins: usize,
    lo: Option<f64>,
    hi: Option<f64>,
    mode: Option<Mode>,
    release: f64,
    cycles: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FileKind {
    SwitchLog,
    Meter,
    Trace,
    Inrush,
}

fn file_kind(path: &Path) -> Result<FileKind, Failure> {
    let mut first = String::new();
    BufReader::new(open(path)?)
        .read_line(&mut first)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let header = first.trim_end();
    let kinds = [
        (SWITCH_LOG_CSV_HEADER.join(","), FileKind::SwitchLog),
        (METER_CSV_HEADER.join(","), FileKind::Meter),
        (TRACE_CSV_HEADER.join(","), FileKind::Trace),
        (INRUSH_CSV_HEADER.join(","), FileKind::Inrush),
    ];
    kinds
        .into_iter()
        .find(|(h, _)| h == header)
        .map(|(_, k)| k)
        .ok_or_else(|| Failure::Runtime(format!("{}: unrecognized CSV header {header:?}", path.display())))
}

fn open(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn telemetry(path: &Path) -> impl Fn(TelemetryError) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Reads a switch log, or reconstructs one from a meter or trace file.
fn load_log(path: &Path) -> Result<SwitchLog, Failure> {
    let f = open(path)?;
    match file_kind(path)? {
        FileKind::SwitchLog => read_switch_log_csv(f).map_err(telemetry(path)),
        FileKind::Meter => Ok(switch_log_from_meter(&read_meter_csv(f).map_err(telemetry(path))?)),
        FileKind::Trace => Ok(switch_log_from_trace(&read_trace_csv(f).map_err(telemetry(path))?)),
        FileKind::Inrush => Err(Failure::Runtime(format!("{}: inrush CSV has no switch events", path.display()))),
    }
}

fn expect_kind(path: &Path, want: FileKind) -> Result<File, Failure> {
    let found = file_kind(path)?;
    if found != want {
        return Err(Failure::Runtime(format!("{}: expected a {want:?} CSV, found {found:?}", path.display())));
    }
    open(path)
}

fn source(path: &Path) -> String {
    path.display().to_string()
}

fn analyze(files: &[PathBuf], kind: Kind, a: &AnalyzeArgs) -> Result<Vec<Vec<String>>, Failure> {
    let mut rows = Vec::new();
    match kind {
        Kind::Duty => {
            rows.push(vec!["source".into(), "house_id".into(), "cycles".into(), "duty_pct".into(), "status".into()]);
            for path in files {
                let log = load_log(path)?;
                for h in log.house_ids() {
                    let row = match duty_cycle(&log, h, a.warmup) {
                        Ok(d) => {
                            let status = if d.is_degenerate() { "no_complete_cycle" } else { "ok" };
                            vec![d.cycles.to_string(), d.percent.to_string(), status.into()]
                        }
                        Err(AnalysisError::InsufficientCycles { .. }) => {
                            vec!["0".into(), String::new(), "insufficient_cycles".into()]
                        }
                        Err(e) => return Err(e.into()),
                    };
                    rows.push([vec![source(path), h.to_string()], row].concat());
                }
            }
        }
        Kind::Cycles => {
            rows.push(std::iter::once("source").chain(CYCLES_CSV_HEADER).map(String::from).collect());
            for path in files {
                let log = load_log(path)?;
                for r in cycle_rows(&log, log.house_ids(), a.warmup) {
                    rows.push([vec![source(path)], r].concat());
                }
            }
        }
        Kind::Histogram => {
            let defaults = HouseParams::default();
            let (lo, hi) = (a.lo.unwrap_or(defaults.t_minus()), a.hi.unwrap_or(defaults.t_plus()));
            rows.push(["source", "mode", "bin_lo_c", "bin_hi_c", "count"].map(String::from).to_vec());
            for path in files {
                let trace = read_trace_csv(expect_kind(path, FileKind::Trace)?).map_err(telemetry(path))?;
                let settled = post_warmup(&trace, &switch_log_from_trace(&trace), a.warmup);
                let modes = match a.mode {
                    Some(m) => vec![m],
                    None => vec![Mode::Off, Mode::On],
                };
                for m in modes {
                    let h = temperature_histogram(&settled, Some(m), lo, hi, a.bins)?;
                    for r in histogram_rows(m, &h) {
                        rows.push([vec![source(path)], r].concat());
                    }
                }
            }
        }
        Kind::PowerFit => {
            if a.ambient.len() != files.len() {
                return Err(Failure::Config(format!(
                    "power-fit needs one --ambient value per file: {} files, {} values",
                    files.len(),
                    a.ambient.len()
                )));
            }
            let mut points = Vec::new();
            for (path, &t_amb) in files.iter().zip(&a.ambient) {
                let samples = read_meter_csv(expect_kind(path, FileKind::Meter)?).map_err(telemetry(path))?;
                let log = switch_log_from_meter(&samples);
                let settled: Vec<_> = samples
                    .into_iter()
                    .filter(|s| warmup_end(&log, s.house_id, a.warmup).is_some_and(|end| s.timestamp >= end))
                    .collect();
                points.extend(on_power_points(&settled, &log, |_| t_amb, ON_TRANSIENT_SKIP_S));
            }
            let fit = power_temperature_fit(&points)?;
            rows.push(
                ["slope_w_per_c", "intercept_w", "reference_ambient_c", "reference_power_w", "slope_pct_per_c", "points"]
                    .map(String::from)
                    .to_vec(),
            );
            rows.push(vec![
                fit.slope_w_per_c.to_string(),
                fit.intercept_w.to_string(),
                fit.reference_ambient_c.to_string(),
                fit.reference_power_w.to_string(),
                fit.slope_pct_per_c.to_string(),
                fit.points.to_string(),
            ]);
        }
        Kind::Dephasing => {
            rows.push(["source", "cycle_index", "circular_variance"].map(String::from).to_vec());
            for path in files {
                let log = load_log(path)?;
                for (k, v) in dephasing_metric(&log, a.release, a.cycles)?.iter().enumerate() {
                    rows.push(vec![source(path), k.to_string(), v.to_string()]);
                }
            }
        }
        Kind::Inrush => {
            rows.push(["source", "peak_ratio", "settle_1pct_s"].map(String::from).to_vec());
            for path in files {
                let trace = read_inrush_csv(expect_kind(path, FileKind::Inrush)?).map_err(telemetry(path))?;
                let (peak, settle) = inrush_summary(&trace, 0.01)
                    .ok_or_else(|| Failure::Runtime(format!("{}: empty or zero-current trace", path.display())))?;
                rows.push(vec![source(path), peak.to_string(), settle.to_string()]);
            }
        }
    }
    Ok(rows)
}
