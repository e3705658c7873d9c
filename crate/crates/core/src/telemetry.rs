//! Emulated power metering: 1 Hz per-house samples and the motor-start
//! inrush overlay.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fleet::Fleet;
use crate::switching::HouseId;

pub const METER_CSV_HEADER: [&str; 6] = ["timestamp", "house_id", "real_w", "apparent_va", "voltage_v", "freq_hz"];
pub const INRUSH_CSV_HEADER: [&str; 2] = ["t_s", "current_a"];

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unexpected header {found:?}, expected {expected:?}")]
    Header { found: Vec<String>, expected: Vec<String> },
    #[error("row {row}: {reason}")]
    Row { row: u64, reason: String },
}

/// Meter constants. The lab line voltage is uncorrelated with load, so
/// voltage and frequency are held constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeterConfig {
    pub power_factor: f64,
    pub voltage: f64,
    pub frequency: f64,
}

impl Default for MeterConfig {
    fn default() -> Self {
        MeterConfig {
            power_factor: 0.95,
            voltage: 120.0,
            frequency: 60.0,
        }
    }
}

impl MeterConfig {
    /// A meter row for a house drawing `real_w`.
    pub fn reading(&self, timestamp: f64, house_id: HouseId, real_w: f64) -> MeterSample {
        MeterSample {
            timestamp,
            house_id,
            real_w,
            apparent_va: real_w / self.power_factor,
            voltage_v: self.voltage,
            freq_hz: self.frequency,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.power_factor > 0.0 && self.power_factor <= 1.0) {
            return Err(format!("power_factor must lie in (0, 1], got {}", self.power_factor));
        }
        if !(self.voltage > 0.0 && self.voltage.is_finite()) {
            return Err(format!("voltage must be positive, got {}", self.voltage));
        }
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(format!("frequency must be positive, got {}", self.frequency));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeterSample {
    pub timestamp: f64,
    pub house_id: HouseId,
    pub real_w: f64,
    pub apparent_va: f64,
    pub voltage_v: f64,
    pub freq_hz: f64,
}

/// Reads every house's meter channel at the fleet's current time.
pub fn sample(fleet: &Fleet, meter: &MeterConfig) -> Vec<MeterSample> {
    let t = fleet.time();
    fleet.houses().iter().map(|h| meter.reading(t, h.id, h.real_power())).collect()
}

pub struct MeterCsvWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MeterCsvWriter<W> {
    pub fn new(out: W) -> Result<Self, TelemetryError> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(METER_CSV_HEADER)?;
        Ok(MeterCsvWriter { inner })
    }

    pub fn write(&mut self, samples: &[MeterSample]) -> Result<(), TelemetryError> {
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

pub(crate) fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<(), TelemetryError> {
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if found.iter().map(String::as_str).ne(expected.iter().copied()) {
        return Err(TelemetryError::Header {
            found,
            expected: expected.iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(())
}

/// Parses a meter CSV stream, rejecting non-finite or negative readings.
pub fn read_meter_csv<R: Read>(input: R) -> Result<Vec<MeterSample>, TelemetryError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    check_header(&mut rdr, &METER_CSV_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<MeterSample>().enumerate() {
        let s = rec?;
        let row = i as u64 + 2;
        let fields = [s.timestamp, s.real_w, s.apparent_va, s.voltage_v, s.freq_hz];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(TelemetryError::Row { row, reason: "non-finite value".into() });
        }
        if s.apparent_va + 1e-9 < s.real_w.abs() {
            return Err(TelemetryError::Row {
                row,
                reason: format!("apparent power {} VA below real power {} W", s.apparent_va, s.real_w),
            });
        }
        out.push(s);
    }
    Ok(out)
}

/// Motor-start current envelope parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InrushParams {
    /// Start-up current as a multiple of the steady current.
    pub peak_multiplier: f64,
    /// Exponential decay time of the excess current, s.
    pub decay_time: f64,
    pub line_frequency: f64,
}

impl Default for InrushParams {
    fn default() -> Self {
        // 25 ms puts the excess under 1% of steady by the tenth line cycle
        InrushParams {
            peak_multiplier: 5.5,
            decay_time: 0.025,
            line_frequency: 60.0,
        }
    }
}

impl InrushParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.peak_multiplier >= 1.0 && self.peak_multiplier.is_finite()) {
            return Err(format!("peak_multiplier must be >= 1, got {}", self.peak_multiplier));
        }
        if !(self.decay_time > 0.0 && self.decay_time.is_finite()) {
            return Err(format!("decay_time must be > 0, got {}", self.decay_time));
        }
        if !(self.line_frequency > 0.0 && self.line_frequency.is_finite()) {
            return Err(format!("line_frequency must be > 0, got {}", self.line_frequency));
        }
        Ok(())
    }
}

/// Current envelope `t_since_on` seconds after a compressor start, A.
pub fn inrush_waveform(t_since_on: f64, steady_current: f64, p: &InrushParams) -> f64 {
    steady_current * (1.0 + (p.peak_multiplier - 1.0) * (-t_since_on.max(0.0) / p.decay_time).exp())
}

/// Envelope samples at `rate_hz` over `duration` seconds, for CSV dumps.
pub fn inrush_trace(steady_current: f64, p: &InrushParams, duration: f64, rate_hz: f64) -> Vec<(f64, f64)> {
    let n = (duration * rate_hz).floor() as usize;
    (0..=n)
        .map(|k| {
            let t = k as f64 / rate_hz;
            (t, inrush_waveform(t, steady_current, p))
        })
        .collect()
}

pub fn write_inrush_csv<W: Write>(out: W, trace: &[(f64, f64)]) -> Result<(), TelemetryError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(INRUSH_CSV_HEADER)?;
    for (t, i) in trace {
        w.write_record([t.to_string(), i.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_inrush_csv<R: Read>(input: R) -> Result<Vec<(f64, f64)>, TelemetryError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    check_header(&mut rdr, &INRUSH_CSV_HEADER)?;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, rec) in rdr.deserialize::<(f64, f64)>().enumerate() {
        let (t, a) = rec?;
        let row = i as u64 + 2;
        if !(t.is_finite() && a.is_finite()) {
            return Err(TelemetryError::Row { row, reason: "non-finite value".into() });
        }
        if out.last().is_some_and(|&(prev, _)| t <= prev) {
            return Err(TelemetryError::Row { row, reason: format!("time {t} does not increase") });
        }
        out.push((t, a));
    }
    Ok(out)
}

/// Peak-to-final ratio of a sampled start-up envelope and the first time
/// after which it stays within `tolerance` (relative) of its final value.
pub fn inrush_summary(trace: &[(f64, f64)], tolerance: f64) -> Option<(f64, f64)> {
    let &(_, last) = trace.last()?;
    if !(last > 0.0) {
        return None;
    }
    let peak = trace.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let settle = trace
        .iter()
        .rposition(|&(_, a)| (a - last).abs() > tolerance * last)
        .map_or(trace[0].0, |i| trace[(i + 1).min(trace.len() - 1)].0);
    Some((peak / last, settle))
}

/// A compressor start: time and steady running current.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StartEvent {
    pub time: f64,
    pub steady_current: f64,
}

/// Peak of the superposed start-up envelopes of every start within
/// `window` seconds of the earliest one, divided by the summed steady
/// current of those starts. Houses already running contribute their
/// steady current; starts outside the window are ignored.
pub fn coincident_inrush(events: &[StartEvent], window: f64, p: &InrushParams) -> Option<f64> {
    if !(window > 0.0) {
        return None;
    }
    let t0 = events.iter().map(|e| e.time).min_by(f64::total_cmp)?;
    let mut group: Vec<StartEvent> = events.iter().copied().filter(|e| e.time - t0 <= window).collect();
    group.sort_by(|a, b| a.time.total_cmp(&b.time));
    let steady: f64 = group.iter().map(|e| e.steady_current).sum();
    if !(steady > 0.0) {
        return None;
    }
    // each envelope decays after its start, so the sum peaks at a start
    // instant; the running and decaying parts are normalized separately so
    // identical simultaneous starts give exactly the peak multiplier
    let peak = group
        .iter()
        .map(|at| {
            let started = group.iter().filter(|e| e.time <= at.time);
            let running: f64 = started.clone().map(|e| e.steady_current).sum();
            let excess: f64 = started
                .map(|e| e.steady_current * (-(at.time - e.time) / p.decay_time).exp())
                .sum();
            running / steady + (p.peak_multiplier - 1.0) * (excess / steady)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Some(peak)
}
