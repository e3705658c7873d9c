//! Cycle statistics, temperature histograms, the power-vs-ambient
//! regression and the de-phasing metric, plus the CSV formats they read.
//!
//! A complete cycle is an OFF switch, the following ON switch and the next
//! OFF switch: OFF duration runs from the first to the second event, ON
//! duration from the second to the third, and the full cycle from the first
//! OFF to the next OFF.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::etp::Mode;
use crate::fleet::{Cause, Fleet, SwitchEvent, SwitchLog};
use crate::switching::HouseId;
use crate::telemetry::{check_header, MeterSample, TelemetryError};

pub const SWITCH_LOG_CSV_HEADER: [&str; 4] = ["time_s", "house_id", "mode", "cause"];
pub const TRACE_CSV_HEADER: [&str; 8] = ["timestamp", "house_id", "mode", "t_therm_c", "t_a_c", "t_w_c", "t_1_c", "t_2_c"];

/// Cycles discarded at the start of every analysis.
pub const DEFAULT_WARMUP_CYCLES: usize = 3;

/// Leading part of each ON interval left out of the power regression, s.
pub const ON_TRANSIENT_SKIP_S: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("house {house}: insufficient cycles ({found} complete after {warmup} warm-up cycles)")]
    InsufficientCycles { house: HouseId, found: usize, warmup: usize },
    #[error("empty trace")]
    EmptyTrace,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cycle {
    pub off_at: f64,
    pub on_at: f64,
    pub next_off_at: f64,
}

impl Cycle {
    pub fn on_duration(&self) -> f64 {
        self.next_off_at - self.on_at
    }

    pub fn off_duration(&self) -> f64 {
        self.on_at - self.off_at
    }

    pub fn full_duration(&self) -> f64 {
        self.next_off_at - self.off_at
    }
}

/// Mode-change times of one house, with repeated modes collapsed.
fn transitions<'a>(events: impl IntoIterator<Item = &'a SwitchEvent>) -> Vec<(f64, Mode)> {
    let mut out: Vec<(f64, Mode)> = Vec::new();
    for e in events {
        if out.last().map(|&(_, m)| m) != Some(e.mode) {
            out.push((e.time, e.mode));
        }
    }
    out
}

/// Every complete OFF→ON→OFF cycle of `house`, in time order.
pub fn cycles(log: &SwitchLog, house: HouseId) -> Vec<Cycle> {
    let tr = transitions(log.for_house(house));
    tr.windows(3)
        .filter(|w| w[0].1 == Mode::Off)
        .map(|w| Cycle {
            off_at: w[0].0,
            on_at: w[1].0,
            next_off_at: w[2].0,
        })
        .collect()
}

/// Duty cycle of one house, percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DutyCycle {
    pub percent: f64,
    /// Complete cycles the percentage is based on; zero flags a house that
    /// never left its last mode, reported as 0 % or 100 %.
    pub cycles: usize,
}

impl DutyCycle {
    pub fn is_degenerate(&self) -> bool {
        self.cycles == 0
    }
}

fn counted_cycles(log: &SwitchLog, house: HouseId, warmup: usize) -> Result<Vec<Cycle>, AnalysisError> {
    let all = cycles(log, house);
    if all.len() <= warmup {
        return Err(AnalysisError::InsufficientCycles {
            house,
            found: all.len().saturating_sub(warmup),
            warmup,
        });
    }
    Ok(all[warmup..].to_vec())
}

/// Total ON time over total cycle time across the complete cycles after
/// `warmup`, as a percentage.
pub fn duty_cycle(log: &SwitchLog, house: HouseId, warmup: usize) -> Result<DutyCycle, AnalysisError> {
    let tr = transitions(log.for_house(house));
    if tr.len() == 1 {
        let percent = if tr[0].1 == Mode::On { 100.0 } else { 0.0 };
        return Ok(DutyCycle { percent, cycles: 0 });
    }
    let cs = counted_cycles(log, house, warmup)?;
    let on: f64 = cs.iter().map(Cycle::on_duration).sum();
    let full: f64 = cs.iter().map(Cycle::full_duration).sum();
    Ok(DutyCycle {
        percent: 100.0 * on / full,
        cycles: cs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    pub house_id: HouseId,
    pub cycles: usize,
    pub mean_on_s: f64,
    pub mean_off_s: f64,
    pub mean_full_s: f64,
    pub duty_pct: f64,
}

pub fn cycle_stats(log: &SwitchLog, house: HouseId, warmup: usize) -> Result<CycleStats, AnalysisError> {
    let cs = counted_cycles(log, house, warmup)?;
    let n = cs.len() as f64;
    let on: f64 = cs.iter().map(Cycle::on_duration).sum();
    let off: f64 = cs.iter().map(Cycle::off_duration).sum();
    let full: f64 = cs.iter().map(Cycle::full_duration).sum();
    Ok(CycleStats {
        house_id: house,
        cycles: cs.len(),
        mean_on_s: on / n,
        mean_off_s: off / n,
        mean_full_s: full / n,
        duty_pct: 100.0 * on / full,
    })
}

/// Per-house cycle statistics for every house that appears in the log.
pub fn cycle_durations(log: &SwitchLog, warmup: usize) -> Vec<Result<CycleStats, AnalysisError>> {
    log.house_ids().into_iter().map(|h| cycle_stats(log, h, warmup)).collect()
}

/// End of the warm-up period of `house`: the start of its first counted
/// cycle.
pub fn warmup_end(log: &SwitchLog, house: HouseId, warmup: usize) -> Option<f64> {
    cycles(log, house).get(warmup).map(|c| c.off_at)
}

/// Power above which a meter reading counts as compressor ON, relative to
/// the lowest reading of the same house, W.
pub const METER_ON_MARGIN_W: f64 = 50.0;

/// Reconstructs a switch log from 1 Hz meter readings. A house is taken
/// to be ON when its reading exceeds its own minimum by more than
/// [`METER_ON_MARGIN_W`]; mode changes are stamped at the first sample
/// showing the new mode. Like a simulated log, it holds changes only, not
/// the initial mode.
pub fn switch_log_from_meter(samples: &[MeterSample]) -> SwitchLog {
    let mut by_house: BTreeMap<HouseId, Vec<&MeterSample>> = BTreeMap::new();
    for s in samples {
        by_house.entry(s.house_id).or_default().push(s);
    }
    let mut events = Vec::new();
    for (house, mut rows) in by_house {
        rows.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let floor = rows.iter().map(|s| s.real_w).fold(f64::INFINITY, f64::min);
        let mut last = None;
        for s in rows {
            let mode = if s.real_w > floor + METER_ON_MARGIN_W {
                Mode::On
            } else {
                Mode::Off
            };
            if last.is_some_and(|m| m != mode) {
                events.push(SwitchEvent {
                    time: s.timestamp,
                    house_id: house,
                    mode,
                    cause: Cause::Thermostat,
                });
            }
            last = Some(mode);
        }
    }
    SwitchLog::from_events(events)
}

/// Switch log implied by the mode column of a temperature trace, stamped
/// at the first sample showing each new mode.
pub fn switch_log_from_trace(samples: &[TraceSample]) -> SwitchLog {
    let mut by_house: BTreeMap<HouseId, Vec<&TraceSample>> = BTreeMap::new();
    for s in samples {
        by_house.entry(s.house_id).or_default().push(s);
    }
    let mut events = Vec::new();
    for (house, mut rows) in by_house {
        rows.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let mut last = None;
        for s in rows {
            if last.is_some_and(|m| m != s.mode) {
                events.push(SwitchEvent {
                    time: s.timestamp,
                    house_id: house,
                    mode: s.mode,
                    cause: Cause::Thermostat,
                });
            }
            last = Some(s.mode);
        }
    }
    SwitchLog::from_events(events)
}

/// One row of the 1 Hz temperature trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub timestamp: f64,
    pub house_id: HouseId,
    pub mode: Mode,
    #[serde(rename = "t_therm_c")]
    pub t_therm: f64,
    #[serde(rename = "t_a_c")]
    pub t_a: f64,
    #[serde(rename = "t_w_c")]
    pub t_w: f64,
    #[serde(rename = "t_1_c")]
    pub t_1: f64,
    #[serde(rename = "t_2_c")]
    pub t_2: f64,
}

pub fn trace_sample(fleet: &Fleet) -> Vec<TraceSample> {
    fleet
        .houses()
        .iter()
        .map(|h| TraceSample {
            timestamp: fleet.time(),
            house_id: h.id,
            mode: h.state.mode,
            t_therm: h.t_therm(),
            t_a: h.state.t_a,
            t_w: h.state.t_w,
            t_1: h.state.t_1,
            t_2: h.state.t_2,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..=self.counts.len()).map(|i| self.lo + w * i as f64).collect()
    }

    /// Samples that fell inside `[lo, hi)`.
    pub fn in_range(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts in the bins covering the fractional span `[from, to)` of the
    /// range, with partial bins weighted by overlap.
    pub fn mass_between(&self, from: f64, to: f64) -> f64 {
        let n = self.counts.len() as f64;
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let (a, b) = (i as f64 / n, (i + 1) as f64 / n);
                let overlap = (b.min(to) - a.max(from)).max(0.0);
                c as f64 * overlap * n
            })
            .sum()
    }
}

/// Thermostat-temperature occupancy over `[lo, hi)` in `bins` equal bins,
/// counting one entry per (house, sample) whose mode matches `mode` (all
/// samples when `None`).
pub fn temperature_histogram(
    samples: &[TraceSample],
    mode: Option<Mode>,
    lo: f64,
    hi: f64,
    bins: usize,
) -> Result<Histogram, AnalysisError> {
    if bins == 0 {
        return Err(AnalysisError::InvalidArgument("bins must be > 0".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(AnalysisError::InvalidArgument(format!("invalid range [{lo}, {hi})")));
    }
    let mut h = Histogram {
        lo,
        hi,
        counts: vec![0; bins],
        underflow: 0,
        overflow: 0,
    };
    let mut seen = false;
    for s in samples.iter().filter(|s| mode.is_none_or(|m| s.mode == m)) {
        seen = true;
        if s.t_therm < lo {
            h.underflow += 1;
        } else if s.t_therm >= hi {
            h.overflow += 1;
        } else {
            let i = ((s.t_therm - lo) / (hi - lo) * bins as f64) as usize;
            h.counts[i.min(bins - 1)] += 1;
        }
    }
    if !seen {
        return Err(AnalysisError::EmptyTrace);
    }
    Ok(h)
}

/// Least-squares line of ON power against ambient temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub slope_w_per_c: f64,
    pub intercept_w: f64,
    /// Mean ambient of the data, where the slope is normalized, °C.
    pub reference_ambient_c: f64,
    /// Fitted power at the reference ambient, W.
    pub reference_power_w: f64,
    pub slope_pct_per_c: f64,
    pub points: usize,
}

/// Fits `power = a + b·ambient` over `(ambient °C, power W)` points and
/// expresses `b` as a percentage of the fitted power at the mean ambient.
pub fn power_temperature_fit(points: &[(f64, f64)]) -> Result<PowerFit, AnalysisError> {
    if points.iter().any(|(t, p)| !t.is_finite() || !p.is_finite()) {
        return Err(AnalysisError::InvalidArgument("non-finite point".into()));
    }
    let n = points.len() as f64;
    if points.is_empty() {
        return Err(AnalysisError::EmptyTrace);
    }
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_p = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    if points.iter().all(|p| p.0 == points[0].0) || sxx == 0.0 {
        return Err(AnalysisError::Degenerate("need at least two distinct ambient temperatures".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_p)).sum();
    let slope = sxy / sxx;
    let intercept = mean_p - slope * mean_t;
    if mean_p == 0.0 {
        return Err(AnalysisError::Degenerate("zero mean power".into()));
    }
    Ok(PowerFit {
        slope_w_per_c: slope,
        intercept_w: intercept,
        reference_ambient_c: mean_t,
        reference_power_w: mean_p,
        slope_pct_per_c: 100.0 * slope / mean_p,
        points: points.len(),
    })
}

/// Pairs each ON-state meter reading taken at least `skip` seconds into
/// its ON interval with the ambient temperature at that time.
pub fn on_power_points(
    samples: &[MeterSample],
    log: &SwitchLog,
    ambient_at: impl Fn(f64) -> f64,
    skip: f64,
) -> Vec<(f64, f64)> {
    let mut by_house: BTreeMap<HouseId, Vec<(f64, Mode)>> = BTreeMap::new();
    for e in log.events() {
        by_house.entry(e.house_id).or_default().push((e.time, e.mode));
    }
    samples
        .iter()
        .filter_map(|s| {
            let tr = by_house.get(&s.house_id)?;
            let idx = tr.partition_point(|&(t, _)| t <= s.timestamp);
            let (since, mode) = tr[..idx].last()?;
            (*mode == Mode::On && s.timestamp - since >= skip).then(|| (ambient_at(s.timestamp), s.real_w))
        })
        .collect()
}

/// Circular variance `1 - |mean(exp(iφ))|` of a set of phases.
pub fn circular_variance(phases: &[f64]) -> f64 {
    let n = phases.len() as f64;
    let (s, c) = phases.iter().fold((0.0, 0.0), |(s, c), p| (s + p.sin(), c + p.cos()));
    (1.0 - (s * s + c * c).sqrt() / n).max(0.0)
}

/// Spread of ON switching after a synchronized release at `release_time`.
///
/// For every house the ON events at or after the release are numbered
/// `k = 0, 1, ...`. The phase of house `i` at index `k` is the offset of its
/// `k`-th ON time from the fleet mean `k`-th ON time, as a fraction of the
/// house's own mean ON-to-ON period. Returns the circular variance for
/// `k = 0..=cycles`.
pub fn dephasing_metric(log: &SwitchLog, release_time: f64, cycles: usize) -> Result<Vec<f64>, AnalysisError> {
    let houses = log.house_ids();
    if houses.len() < 2 {
        return Err(AnalysisError::InsufficientData(format!(
            "need at least 2 houses, found {}",
            houses.len()
        )));
    }
    let mut on_times = Vec::with_capacity(houses.len());
    for &h in &houses {
        let times: Vec<f64> = transitions(log.for_house(h))
            .into_iter()
            .filter(|&(t, m)| m == Mode::On && t >= release_time)
            .map(|(t, _)| t)
            .collect();
        if times.len() < 2 {
            return Err(AnalysisError::InsufficientData(format!(
                "house {h} has {} ON event(s) after the release",
                times.len()
            )));
        }
        if times.len() < cycles + 1 {
            return Err(AnalysisError::InsufficientData(format!(
                "house {h} has {} ON events after the release, need {}",
                times.len(),
                cycles + 1
            )));
        }
        on_times.push(times);
    }
    let n = on_times.len() as f64;
    Ok((0..=cycles)
        .map(|k| {
            let mean_k = on_times.iter().map(|t| t[k]).sum::<f64>() / n;
            let phases: Vec<f64> = on_times
                .iter()
                .map(|t| {
                    let last = cycles.max(1);
                    let period = (t[last] - t[0]) / last as f64;
                    TAU * (t[k] - mean_k) / period
                })
                .collect();
            circular_variance(&phases)
        })
        .collect())
}

pub fn write_switch_log_csv<W: Write>(out: W, log: &SwitchLog) -> Result<(), TelemetryError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWITCH_LOG_CSV_HEADER)?;
    for e in log.events() {
        w.write_record([
            e.time.to_string(),
            e.house_id.to_string(),
            e.mode.as_str().to_owned(),
            e.cause.as_str().to_owned(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_switch_log_csv<R: Read>(input: R) -> Result<SwitchLog, TelemetryError> {
    let mut rdr = csv::Reader::from_reader(input);
    check_header(&mut rdr, &SWITCH_LOG_CSV_HEADER)?;
    let mut events = Vec::new();
    for (i, rec) in rdr.deserialize::<SwitchEvent>().enumerate() {
        let e = rec?;
        if !e.time.is_finite() {
            return Err(TelemetryError::Row {
                row: i as u64 + 2,
                reason: "non-finite time".into(),
            });
        }
        events.push(e);
    }
    Ok(SwitchLog::from_events(events))
}

pub struct TraceCsvWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TraceCsvWriter<W> {
    pub fn new(out: W) -> Result<Self, TelemetryError> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(TRACE_CSV_HEADER)?;
        Ok(TraceCsvWriter { inner })
    }

    pub fn write(&mut self, samples: &[TraceSample]) -> Result<(), TelemetryError> {
        for s in samples {
            self.inner.serialize(s)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, TelemetryError> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| TelemetryError::Io(e.into_error()))
    }
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceSample>, TelemetryError> {
    let mut rdr = csv::Reader::from_reader(input);
    check_header(&mut rdr, &TRACE_CSV_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<TraceSample>().enumerate() {
        let s = rec?;
        let vals = [s.timestamp, s.t_therm, s.t_a, s.t_w, s.t_1, s.t_2];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(TelemetryError::Row {
                row: i as u64 + 2,
                reason: "non-finite value".into(),
            });
        }
        out.push(s);
    }
    Ok(out)
}
