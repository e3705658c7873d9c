//! Experiment configuration: one TOML document per run. Every field has a
//! default, so an empty file is a valid FIXED_SETPOINT run. See
//! `docs/config.md` for the schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fleet::FleetSpec;
use crate::server::{ServeMode, ServerConfig, DEFAULT_ENDPOINT};
use crate::telemetry::{InrushParams, MeterConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scenario {
    FixedSetpoint,
    HeatSweep,
    FhmSweep,
    AmbientSweep,
    SquareWave,
    ReleaseTest,
    Serve,
}

impl Scenario {
    pub fn is_sweep(self) -> bool {
        matches!(self, Scenario::HeatSweep | Scenario::FhmSweep | Scenario::AmbientSweep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    /// 1 Hz meter CSV.
    pub meter: bool,
    /// 1 Hz temperature trace CSV.
    pub trace: bool,
    /// Inrush waveform of one start, `t_s,current_a`.
    pub inrush: bool,
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs {
            meter: true,
            trace: false,
            inrush: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatSweep {
    /// Programmable heat per house at each grid point, W.
    pub grid_w: Vec<f64>,
}

impl Default for HeatSweep {
    fn default() -> Self {
        HeatSweep {
            grid_w: vec![0.0, 50.0, 100.0, 150.0, 200.0, 250.0, 300.0, 350.0, 400.0, 450.0, 500.0, 550.0, 600.0, 650.0, 700.0, 750.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FhmSweep {
    pub grid: Vec<f64>,
}

impl Default for FhmSweep {
    fn default() -> Self {
        FhmSweep {
            grid: vec![0.0, 0.25, 0.5, 0.75, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmbientSweep {
    pub grid_c: Vec<f64>,
}

impl Default for AmbientSweep {
    fn default() -> Self {
        AmbientSweep {
            grid_c: (0..=6).map(|k| 20.0 + 2.0 * k as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SquareWaveConfig {
    pub period_s: f64,
    /// ON share of each period, percent. Leave unset for a silent
    /// controller.
    pub duty_pct: Option<f64>,
}

impl Default for SquareWaveConfig {
    fn default() -> Self {
        SquareWaveConfig {
            period_s: 1200.0,
            duty_pct: Some(50.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReleaseConfig {
    /// ON cycles after the release to measure.
    pub cycles: usize,
}

impl Default for ReleaseConfig {
    fn default() -> Self {
        ReleaseConfig { cycles: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub endpoint: String,
    pub mode: ServeMode,
    pub lockstep_timeout_s: f64,
    pub realtime: bool,
    pub wait_for_controller: bool,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            endpoint: DEFAULT_ENDPOINT.into(),
            mode: ServeMode::Lockstep,
            lockstep_timeout_s: 10.0,
            realtime: false,
            wait_for_controller: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Simulated time per run, s.
    pub duration_s: f64,
    /// Complete cycles discarded per house before any statistic.
    pub warmup_cycles: usize,
    pub latch_dt: f64,
    pub output_dir: PathBuf,
    pub outputs: Outputs,
    pub fleet: FleetSpec,
    pub meter: MeterConfig,
    pub inrush: InrushParams,
    pub heat_sweep: HeatSweep,
    pub fhm_sweep: FhmSweep,
    pub ambient_sweep: AmbientSweep,
    pub square_wave: SquareWaveConfig,
    pub release: ReleaseConfig,
    pub server: ServerSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::FixedSetpoint,
            duration_s: 6.0 * 3600.0,
            warmup_cycles: 3,
            latch_dt: 1.0,
            output_dir: PathBuf::from("out"),
            outputs: Outputs::default(),
            fleet: FleetSpec::default(),
            meter: MeterConfig::default(),
            inrush: InrushParams::default(),
            heat_sweep: HeatSweep::default(),
            fhm_sweep: FhmSweep::default(),
            ambient_sweep: AmbientSweep::default(),
            square_wave: SquareWaveConfig::default(),
            release: ReleaseConfig::default(),
            server: ServerSection::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{}{key}: {message}", .line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { key: String, line: Option<usize>, message: String },
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| {
            let (line, column) = e.span().map(|s| line_col(src, s.start)).unwrap_or((1, 1));
            ConfigError::Parse {
                line,
                column,
                message: e.message().trim().to_owned(),
            }
        })?;
        cfg.validate().map_err(|(key, message)| ConfigError::Invalid {
            line: line_of_key(src, &key),
            key,
            message,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&src)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Checks the cross-field invariants; errors carry the dotted key.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let bad = |key: &str, msg: String| Err((key.to_owned(), msg));
        if !(self.latch_dt.is_finite() && self.latch_dt > 0.0) {
            return bad("latch_dt", format!("must be > 0, got {}", self.latch_dt));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad("duration_s", format!("must be > 0, got {}", self.duration_s));
        }
        // No OFF interval can be shorter than the lockout, so warm-up lasts
        // at least this long.
        let warmup_floor = self.warmup_cycles as f64 * self.fleet.base_params.lockout;
        if self.duration_s <= warmup_floor {
            return bad(
                "duration_s",
                format!(
                    "{} s does not exceed the warm-up ({} cycles of at least {} s each)",
                    self.duration_s, self.warmup_cycles, self.fleet.base_params.lockout
                ),
            );
        }
        if let Err(e) = self.fleet.validate() {
            return bad("fleet", e.to_string());
        }
        if let Err(e) = self.meter.validate() {
            return bad("meter", e);
        }
        if let Err(e) = self.inrush.validate() {
            return bad("inrush", e);
        }
        grid("heat_sweep.grid_w", &self.heat_sweep.grid_w, |w| w >= 0.0)?;
        grid("fhm_sweep.grid", &self.fhm_sweep.grid, |f| (0.0..=1.0).contains(&f))?;
        grid("ambient_sweep.grid_c", &self.ambient_sweep.grid_c, |_| true)?;
        let sw = &self.square_wave;
        if !(sw.period_s.is_finite() && sw.period_s > 0.0) {
            return bad("square_wave.period_s", format!("must be > 0, got {}", sw.period_s));
        }
        if let Some(d) = sw.duty_pct {
            if !(0.0..=100.0).contains(&d) {
                return bad("square_wave.duty_pct", format!("must be within [0, 100], got {d}"));
            }
        }
        if self.release.cycles == 0 {
            return bad("release.cycles", "must be >= 1".into());
        }
        if !(self.server.lockstep_timeout_s.is_finite() && self.server.lockstep_timeout_s > 0.0) {
            return bad(
                "server.lockstep_timeout_s",
                format!("must be > 0, got {}", self.server.lockstep_timeout_s),
            );
        }
        Ok(())
    }

    /// Whole latch steps covering `duration_s`.
    pub fn steps(&self) -> u64 {
        (self.duration_s / self.latch_dt).round() as u64
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            endpoint: self.server.endpoint.clone(),
            mode: self.server.mode,
            latch_dt: self.latch_dt,
            steps: self.steps(),
            lockstep_timeout_s: self.server.lockstep_timeout_s,
            realtime: self.server.realtime,
            wait_for_controller: self.server.wait_for_controller,
        }
    }
}

fn grid(key: &str, values: &[f64], ok: impl Fn(f64) -> bool) -> Result<(), (String, String)> {
    if values.is_empty() {
        return Err((key.to_owned(), "grid must not be empty".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || !ok(**v)) {
        return Err((key.to_owned(), format!("grid value {v} out of range")));
    }
    Ok(())
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Line that sets dotted `key` (or opens its table), if the document
/// spells it out.
fn line_of_key(src: &str, key: &str) -> Option<usize> {
    let (table, leaf) = match key.rsplit_once('.') {
        Some((t, l)) => (t, l),
        None => ("", key),
    };
    let mut current = String::new();
    let mut table_line = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(header) = line.strip_prefix('[') {
            current = header.trim_start_matches('[').trim_end_matches(']').trim().to_owned();
            if current == key || (current == table && table_line.is_none()) {
                table_line = Some(i + 1);
            }
            continue;
        }
        let Some((k, _)) = line.split_once('=') else {
            continue;
        };
        let k = k.trim();
        let full = if current.is_empty() {
            k.to_owned()
        } else {
            format!("{current}.{k}")
        };
        if full == key || (current == table && k == leaf) {
            return Some(i + 1);
        }
    }
    table_line
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_run() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn nested_fields_are_addressable() {
        let src = r#"
scenario = "HEAT_SWEEP"
duration_s = 7200

[fleet]
n_houses = 4
rng_seed = 9

[fleet.base_params]
lockout = 0.0
f_hm = 0.5

[fleet.ambient]
kind = "CONSTANT"
t_amb = 30.0

[[fleet.schedules]]
kind = "RANDOM_PERTURBED"
base_watts = 200.0
amplitude_watts = 20.0
correlation_time_s = 300.0

[heat_sweep]
grid_w = [100.0, 200.0]
"#;
        let cfg = ExperimentConfig::from_toml(src).unwrap();
        assert_eq!(cfg.scenario, Scenario::HeatSweep);
        assert_eq!(cfg.fleet.n_houses, 4);
        assert_eq!(cfg.fleet.base_params.lockout, 0.0);
        assert_eq!(cfg.fleet.base_params.f_hm, 0.5);
        assert_eq!(cfg.fleet.ambient.at(0.0), 30.0);
        assert_eq!(cfg.heat_sweep.grid_w, vec![100.0, 200.0]);
    }

    #[test]
    fn duration_inside_warmup_is_rejected_with_line() {
        let src = "scenario = \"FIXED_SETPOINT\"\nwarmup_cycles = 3\nduration_s = 300\n";
        match ExperimentConfig::from_toml(src) {
            Err(ConfigError::Invalid { key, line, .. }) => {
                assert_eq!(key, "duration_s");
                assert_eq!(line, Some(3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let src = "duration_s = 7200\n\n[fleet.base_params]\nh_mm = 3\n";
        match ExperimentConfig::from_toml(src) {
            Err(ConfigError::Parse { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("h_mm"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_grid_is_rejected() {
        let src = "[fhm_sweep]\ngrid = []\n";
        match ExperimentConfig::from_toml(src) {
            Err(ConfigError::Invalid { key, line, .. }) => {
                assert_eq!(key, "fhm_sweep.grid");
                assert_eq!(line, Some(2));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_type_is_a_parse_error() {
        assert!(matches!(
            ExperimentConfig::from_toml("duration_s = \"long\"\n"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("scenario = \"PARTY\"\n"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
    }
}
