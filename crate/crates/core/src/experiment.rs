//! Scenario runners. Every output file is a pure function of the
//! configuration: sweeps run their grid points in parallel but write rows in
//! grid order.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use thiserror::Error;

use crate::analysis::{
    cycle_stats, dephasing_metric, on_power_points, power_temperature_fit, temperature_histogram, trace_sample,
    warmup_end, write_switch_log_csv, AnalysisError, CycleStats, Histogram, PowerFit, TraceCsvWriter, TraceSample,
    ON_TRANSIENT_SKIP_S,
};
use crate::client::{run_square_wave, ClientError, ControllerClient, ExerciseReport, SquareWave};
use crate::config::{ConfigError, ExperimentConfig, Scenario};
use crate::etp::{compressor_operating_point, AmbientInput, Mode};
use crate::fleet::{build_fleet, Fleet, FleetError, FleetSpec, SwitchLog};
use crate::protocol::ControlMessage;
use crate::schedule::HeatSchedule;
use crate::server::{serve, ServeMode, ServerConfig, ServerError};
use crate::switching::SwitchRequest;
use crate::telemetry::{
    inrush_trace, sample, write_inrush_csv, MeterConfig, MeterCsvWriter, MeterSample, TelemetryError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("scenario {0:?} cannot be run this way")]
    WrongScenario(Scenario),
}

/// Files written by a run, in creation order.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
}

struct Out<'a> {
    dir: &'a Path,
    outcome: RunOutcome,
}

impl<'a> Out<'a> {
    fn new(dir: &'a Path) -> Result<Self, ExperimentError> {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.to_owned(),
            source,
        })?;
        Ok(Out {
            dir,
            outcome: RunOutcome::default(),
        })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, ExperimentError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|source| ExperimentError::Io {
            path: path.clone(),
            source,
        })?;
        info!("writing {}", path.display());
        self.outcome.files.push(path);
        Ok(BufWriter::new(file))
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(self.create(name)?);
        w.write_record(header).map_err(TelemetryError::from)?;
        for row in rows {
            w.write_record(row).map_err(TelemetryError::from)?;
        }
        w.flush().map_err(TelemetryError::from)?;
        Ok(())
    }
}

/// Runs the configured scenario and writes its artifacts under
/// `config.output_dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    config
        .validate()
        .map_err(|(key, message)| ConfigError::Invalid { key, line: None, message })?;
    let mut out = Out::new(&config.output_dir)?;
    match config.scenario {
        Scenario::FixedSetpoint => fixed_setpoint(config, &mut out)?,
        Scenario::HeatSweep => heat_sweep(config, &mut out)?,
        Scenario::FhmSweep => fhm_sweep(config, &mut out)?,
        Scenario::AmbientSweep => ambient_sweep(config, &mut out)?,
        Scenario::SquareWave => square_wave(config, &mut out)?,
        Scenario::ReleaseTest => release_test(config, &mut out)?,
        Scenario::Serve => serve_scenario(config, &mut out)?,
    }
    Ok(out.outcome)
}

/// Runs one of the sweep scenarios.
pub fn sweep(config: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    if !config.scenario.is_sweep() {
        return Err(ExperimentError::WrongScenario(config.scenario));
    }
    run(config)
}

/// Per-step observers for [`simulate`].
#[derive(Default)]
struct Sinks<W: Write> {
    meter: Option<MeterCsvWriter<W>>,
    trace_file: Option<TraceCsvWriter<W>>,
    trace: Option<Vec<TraceSample>>,
    on_samples: Option<Vec<MeterSample>>,
}

/// Steps `fleet` for the configured duration, reading the meter and the
/// temperatures at every latch boundary including both ends.
fn simulate<W: Write>(fleet: &mut Fleet, config: &ExperimentConfig, sinks: &mut Sinks<W>) -> Result<(), ExperimentError> {
    let steps = config.steps();
    for step in 0..=steps {
        if sinks.meter.is_some() || sinks.on_samples.is_some() {
            let readings = sample(fleet, &config.meter);
            if let Some(m) = &mut sinks.meter {
                m.write(&readings)?;
            }
            if let Some(on) = &mut sinks.on_samples {
                on.extend(
                    readings
                        .iter()
                        .zip(fleet.houses())
                        .filter(|(_, h)| h.state.mode == Mode::On)
                        .map(|(r, _)| *r),
                );
            }
        }
        if sinks.trace.is_some() || sinks.trace_file.is_some() {
            let rows = trace_sample(fleet);
            if let Some(t) = &mut sinks.trace_file {
                t.write(&rows)?;
            }
            if let Some(t) = &mut sinks.trace {
                t.extend(rows);
            }
        }
        if step < steps {
            fleet.advance(config.latch_dt)?;
        }
    }
    Ok(())
}

fn finish<W: Write>(sinks: Sinks<W>) -> Result<(Option<Vec<TraceSample>>, Option<Vec<MeterSample>>), ExperimentError> {
    if let Some(m) = sinks.meter {
        m.finish()?.flush().map_err(TelemetryError::from)?;
    }
    if let Some(t) = sinks.trace_file {
        t.finish()?.flush().map_err(TelemetryError::from)?;
    }
    Ok((sinks.trace, sinks.on_samples))
}

fn fmt(v: f64) -> String {
    v.to_string()
}

pub const CYCLES_CSV_HEADER: [&str; 7] = ["house_id", "cycles", "mean_on_s", "mean_off_s", "mean_full_s", "duty_pct", "status"];

pub fn cycle_rows(log: &SwitchLog, houses: impl IntoIterator<Item = u32>, warmup: usize) -> Vec<Vec<String>> {
    houses
        .into_iter()
        .map(|h| match cycle_stats(log, h, warmup) {
            Ok(s) => vec![
                h.to_string(),
                s.cycles.to_string(),
                fmt(s.mean_on_s),
                fmt(s.mean_off_s),
                fmt(s.mean_full_s),
                fmt(s.duty_pct),
                "ok".into(),
            ],
            Err(_) => vec![h.to_string(), "0".into(), String::new(), String::new(), String::new(), String::new(), "insufficient_cycles".into()],
        })
        .collect()
}

pub const HISTOGRAM_CSV_HEADER: [&str; 4] = ["mode", "bin_lo_c", "bin_hi_c", "count"];

pub fn histogram_rows(mode: Mode, h: &Histogram) -> Vec<Vec<String>> {
    let edges = h.edges();
    h.counts
        .iter()
        .enumerate()
        .map(|(i, c)| vec![mode.as_str().to_owned(), fmt(edges[i]), fmt(edges[i + 1]), c.to_string()])
        .collect()
}

/// Bins across the deadband in the histogram outputs.
pub const HISTOGRAM_BINS: usize = 10;

/// Trace samples of each house taken after its warm-up.
pub fn post_warmup(trace: &[TraceSample], log: &SwitchLog, warmup: usize) -> Vec<TraceSample> {
    let ids = log.house_ids();
    let ends: Vec<(u32, f64)> = ids
        .iter()
        .map(|&h| (h, warmup_end(log, h, warmup).unwrap_or(f64::INFINITY)))
        .collect();
    trace
        .iter()
        .filter(|s| {
            ends.iter()
                .find(|(h, _)| *h == s.house_id)
                .is_some_and(|(_, end)| s.timestamp >= *end)
        })
        .copied()
        .collect()
}

fn fixed_setpoint(config: &ExperimentConfig, out: &mut Out) -> Result<(), ExperimentError> {
    let mut fleet = build_fleet(&config.fleet)?;
    let mut sinks = Sinks {
        meter: if config.outputs.meter {
            Some(MeterCsvWriter::new(out.create("meter.csv")?)?)
        } else {
            None
        },
        trace_file: if config.outputs.trace {
            Some(TraceCsvWriter::new(out.create("trace.csv")?)?)
        } else {
            None
        },
        trace: Some(Vec::new()),
        on_samples: None,
    };
    simulate(&mut fleet, config, &mut sinks)?;
    let (trace, _) = finish(sinks)?;
    let log = fleet.log();
    write_switch_log_csv(out.create("switch_log.csv")?, log)?;
    let ids = fleet.houses().iter().map(|h| h.id);
    out.csv("cycles.csv", &CYCLES_CSV_HEADER, cycle_rows(log, ids, config.warmup_cycles))?;

    let settled = post_warmup(&trace.unwrap_or_default(), log, config.warmup_cycles);
    let p = &config.fleet.base_params;
    let mut rows = Vec::new();
    for mode in [Mode::Off, Mode::On] {
        match temperature_histogram(&settled, Some(mode), p.t_minus(), p.t_plus(), HISTOGRAM_BINS) {
            Ok(h) => rows.extend(histogram_rows(mode, &h)),
            Err(AnalysisError::EmptyTrace) => {}
            Err(e) => return Err(e.into()),
        }
    }
    out.csv("histograms.csv", &HISTOGRAM_CSV_HEADER, rows)?;

    if config.outputs.inrush {
        let t_amb = config.fleet.ambient.at(0.0);
        let (_, w) = compressor_operating_point(Mode::On, p.setpoint, t_amb, p).unwrap_or((0.0, 0.0));
        let steady = (w + p.q_fixed) / (config.meter.voltage * config.meter.power_factor);
        let wave = inrush_trace(steady, &config.inrush, 30.0 / config.inrush.line_frequency, 10_000.0);
        write_inrush_csv(out.create("inrush.csv")?, &wave)?;
    }
    Ok(())
}

/// Fleet-mean cycle statistics of one sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    /// Houses with enough cycles to contribute.
    pub houses: usize,
    pub mean_on_s: f64,
    pub mean_off_s: f64,
    pub mean_full_s: f64,
    pub duty_pct: f64,
}

fn summarize(value: f64, stats: &[CycleStats]) -> SweepPoint {
    let n = stats.len() as f64;
    let mean = |f: fn(&CycleStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
    SweepPoint {
        value,
        houses: stats.len(),
        mean_on_s: mean(|s| s.mean_on_s),
        mean_off_s: mean(|s| s.mean_off_s),
        mean_full_s: mean(|s| s.mean_full_s),
        duty_pct: mean(|s| s.duty_pct),
    }
}

/// Runs `spec` for the configured duration and averages the per-house
/// cycle statistics.
pub fn sweep_point(config: &ExperimentConfig, spec: &FleetSpec, value: f64) -> Result<SweepPoint, ExperimentError> {
    let mut fleet = build_fleet(spec)?;
    simulate::<std::io::Sink>(&mut fleet, config, &mut Sinks::default())?;
    let stats: Vec<CycleStats> = fleet
        .houses()
        .iter()
        .filter_map(|h| cycle_stats(fleet.log(), h.id, config.warmup_cycles).ok())
        .collect();
    Ok(summarize(value, &stats))
}

fn sweep_rows(points: &[SweepPoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| {
            if p.houses == 0 {
                vec![fmt(p.value), "0".into(), String::new(), String::new(), String::new(), String::new()]
            } else {
                vec![
                    fmt(p.value),
                    p.houses.to_string(),
                    fmt(p.duty_pct),
                    fmt(p.mean_on_s),
                    fmt(p.mean_off_s),
                    fmt(p.mean_full_s),
                ]
            }
        })
        .collect()
}

/// Cycle statistics against the programmable heat per house.
pub fn run_heat_sweep(config: &ExperimentConfig) -> Result<Vec<SweepPoint>, ExperimentError> {
    config
        .heat_sweep
        .grid_w
        .par_iter()
        .map(|&q| {
            let spec = FleetSpec {
                schedules: vec![HeatSchedule::constant(q)],
                ..config.fleet.clone()
            };
            sweep_point(config, &spec, q)
        })
        .collect()
}

/// Cycle statistics against the thermometer coupling `f_hm`.
pub fn run_fhm_sweep(config: &ExperimentConfig) -> Result<Vec<SweepPoint>, ExperimentError> {
    config
        .fhm_sweep
        .grid
        .par_iter()
        .map(|&f| {
            let mut spec = config.fleet.clone();
            spec.base_params.f_hm = f;
            sweep_point(config, &spec, f)
        })
        .collect()
}

fn heat_sweep(config: &ExperimentConfig, out: &mut Out) -> Result<(), ExperimentError> {
    let points = run_heat_sweep(config)?;
    out.csv(
        "heat_sweep.csv",
        &["q_w", "houses", "duty_pct", "mean_on_s", "mean_off_s", "mean_full_s"],
        sweep_rows(&points),
    )
}

fn fhm_sweep(config: &ExperimentConfig, out: &mut Out) -> Result<(), ExperimentError> {
    let points = run_fhm_sweep(config)?;
    out.csv(
        "fhm_sweep.csv",
        &["f_hm", "houses", "duty_pct", "mean_on_s", "mean_off_s", "mean_full_s"],
        sweep_rows(&points),
    )
}

/// Mean settled ON power at one ambient temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientPoint {
    pub t_amb: f64,
    /// `(ambient, power)` pairs from ON readings past warm-up and the
    /// start transient.
    pub points: Vec<(f64, f64)>,
}

impl AmbientPoint {
    pub fn mean_power(&self) -> f64 {
        self.points.iter().map(|p| p.1).sum::<f64>() / self.points.len() as f64
    }
}

pub fn run_ambient_sweep(config: &ExperimentConfig) -> Result<(Vec<AmbientPoint>, PowerFit), ExperimentError> {
    let points: Vec<AmbientPoint> = config
        .ambient_sweep
        .grid_c
        .par_iter()
        .map(|&t_amb| {
            let spec = FleetSpec {
                ambient: AmbientInput::constant(t_amb),
                ..config.fleet.clone()
            };
            let mut fleet = build_fleet(&spec)?;
            let mut sinks = Sinks::<std::io::Sink> {
                on_samples: Some(Vec::new()),
                ..Sinks::default()
            };
            simulate(&mut fleet, config, &mut sinks)?;
            let on = sinks.on_samples.unwrap_or_default();
            let log = fleet.log();
            let settled: Vec<MeterSample> = on
                .into_iter()
                .filter(|s| warmup_end(log, s.house_id, config.warmup_cycles).is_some_and(|end| s.timestamp >= end))
                .collect();
            Ok(AmbientPoint {
                t_amb,
                points: on_power_points(&settled, log, |_| t_amb, ON_TRANSIENT_SKIP_S),
            })
        })
        .collect::<Result<_, ExperimentError>>()?;
    let all: Vec<(f64, f64)> = points.iter().flat_map(|p| p.points.iter().copied()).collect();
    let fit = power_temperature_fit(&all)?;
    Ok((points, fit))
}

fn ambient_sweep(config: &ExperimentConfig, out: &mut Out) -> Result<(), ExperimentError> {
    let (points, fit) = run_ambient_sweep(config)?;
    let rows = points
        .iter()
        .map(|p| {
            let mean = if p.points.is_empty() {
                String::new()
            } else {
                fmt(p.mean_power())
            };
            vec![fmt(p.t_amb), mean, p.points.len().to_string()]
        })
        .collect();
    out.csv("ambient_sweep.csv", &["t_amb_c", "mean_on_power_w", "samples"], rows)?;
    out.csv(
        "power_fit.csv",
        &["slope_w_per_c", "intercept_w", "reference_ambient_c", "reference_power_w", "slope_pct_per_c", "points"],
        vec![vec![
            fmt(fit.slope_w_per_c),
            fmt(fit.intercept_w),
            fmt(fit.reference_ambient_c),
            fmt(fit.reference_power_w),
            fmt(fit.slope_pct_per_c),
            fit.points.to_string(),
        ]],
    )
}

/// Serves `fleet` on an ephemeral local port in LOCKSTEP and drives it
/// with the square-wave exerciser over the wire protocol.
pub fn run_square_wave_over_tcp(
    fleet: Fleet,
    config: &ExperimentConfig,
    mut observe: impl FnMut(&ControlMessage),
) -> Result<(Fleet, ExerciseReport), ExperimentError> {
    let server = serve(
        fleet,
        ServerConfig {
            endpoint: "127.0.0.1:0".into(),
            mode: ServeMode::Lockstep,
            latch_dt: config.latch_dt,
            steps: config.steps(),
            lockstep_timeout_s: config.server.lockstep_timeout_s,
            realtime: false,
            wait_for_controller: true,
        },
    )?;
    let wave = SquareWave {
        period_s: config.square_wave.period_s,
        duty_pct: config.square_wave.duty_pct,
    };
    let client = ControllerClient::connect(&server.local_addr().to_string());
    let report = match client {
        Ok(c) => run_square_wave(c, wave, &mut observe),
        Err(e) => Err(e),
    };
    let summary = server.join()?;
    Ok((summary.fleet, report?))
}

fn meter_rows_from_report(frame: &ControlMessage, meter: &MeterConfig) -> Vec<MeterSample> {
    match frame {
        ControlMessage::StateReport { time, houses, .. } => {
            houses.iter().map(|h| meter.reading(*time, h.house_id, h.real_power)).collect()
        }
        _ => Vec::new(),
    }
}

fn square_wave(config: &ExperimentConfig, out: &mut Out) -> Result<(), ExperimentError> {
    let fleet = build_fleet(&config.fleet)?;
    let mut meter = if config.outputs.meter {
        Some(MeterCsvWriter::new(out.create("meter.csv")?)?)
    } else {
        None
    };
    let mut write_error = None;
    let (fleet, report) = run_square_wave_over_tcp(fleet, config, |frame| {
        if let Some(m) = &mut meter {
            if let Err(e) = m.write(&meter_rows_from_report(frame, &config.meter)) {
                write_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    if let Some(m) = meter {
        m.finish()?.flush().map_err(TelemetryError::from)?;
    }
    write_switch_log_csv(out.create("switch_log.csv")?, fleet.log())?;
    let rows = report
        .verdicts
        .iter()
        .map(|(step, v)| {
            vec![
                step.to_string(),
                v.house_id.to_string(),
                v.accepted.to_string(),
                v.reason.as_str().to_owned(),
            ]
        })
        .collect();
    out.csv("verdicts.csv", &["step", "house_id", "accepted", "reason"], rows)?;
    let ids = fleet.houses().iter().map(|h| h.id);
    out.csv("cycles.csv", &CYCLES_CSV_HEADER, cycle_rows(fleet.log(), ids, config.warmup_cycles))?;
    Ok(())
}

/// Forces every house ON at time zero, then lets the fleet run freely.
/// Returns the fleet after the configured duration.
pub fn run_release(config: &ExperimentConfig) -> Result<Fleet, ExperimentError> {
    let mut fleet = build_fleet(&config.fleet)?;
    let requests: Vec<SwitchRequest> = fleet
        .houses()
        .iter()
        .map(|h| SwitchRequest {
            house_id: h.id,
            desired_mode: Mode::On,
            request_time: 0.0,
        })
        .collect();
    fleet.apply_requests(&requests)?;
    simulate::<std::io::Sink>(&mut fleet, config, &mut Sinks::default())?;
    Ok(fleet)
}

fn release_test(config: &ExperimentConfig, out: &mut Out) -> Result<(), ExperimentError> {
    let fleet = run_release(config)?;
    write_switch_log_csv(out.create("switch_log.csv")?, fleet.log())?;
    let variance = dephasing_metric(fleet.log(), 0.0, config.release.cycles)?;
    let rows = variance
        .iter()
        .enumerate()
        .map(|(k, v)| vec![k.to_string(), fmt(*v)])
        .collect();
    out.csv("dephasing.csv", &["cycle_index", "circular_variance"], rows)
}

/// Serves the configured fleet until the configured duration has been
/// stepped, then writes the switch log.
fn serve_scenario(config: &ExperimentConfig, out: &mut Out) -> Result<(), ExperimentError> {
    let fleet = build_fleet(&config.fleet)?;
    let handle = serve(fleet, config.server_config())?;
    info!("listening on {}", handle.local_addr());
    let summary = handle.join()?;
    info!(
        "served {} steps, {} requests, {} rejected frames, {} timeouts",
        summary.steps, summary.requests, summary.rejected_frames, summary.timeouts
    );
    write_switch_log_csv(out.create("switch_log.csv")?, summary.fleet.log())?;
    Ok(())
}
