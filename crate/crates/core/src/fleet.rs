//! Heterogeneous ensemble of houses advanced on one latch clock.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::etp::{
    compressor_operating_point, thermostat_temperature, AmbientInput, EtpError, Event, HouseParams, HouseState,
    Integrator, Mode, C_W_20_GAL, C_W_30_GAL,
};
use crate::schedule::{schedule_eval, HeatSchedule, ScheduleStream};
use crate::switching::{adjudicate, lockout_active, thermostat_decision, HouseId, SwitchRequest, Verdict};

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("invalid fleet spec: {0}")]
    InvalidSpec(String),
    #[error("unknown house id {0}")]
    UnknownHouse(HouseId),
    #[error("latch step must be positive, got {0} s")]
    InvalidStep(f64),
    #[error("house {house}: {source}")]
    Integration {
        house: HouseId,
        #[source]
        source: EtpError,
    },
}

/// Relative uniform jitter applied per house, plus the tank-size mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Heterogeneity {
    pub u_a: f64,
    pub h_m: f64,
    pub h_1: f64,
    pub q_fixed: f64,
    pub f_hm: f64,
    pub w_fric: f64,
    /// Probability that a house gets the 30 gallon tank. Zero keeps the
    /// base `c_w` for every house.
    pub large_tank_fraction: f64,
}

impl Default for Heterogeneity {
    fn default() -> Self {
        Heterogeneity {
            u_a: 0.10,
            h_m: 0.05,
            h_1: 0.0,
            q_fixed: 0.05,
            f_hm: 0.02,
            w_fric: 0.05,
            large_tank_fraction: 0.0,
        }
    }
}

impl Heterogeneity {
    pub fn none() -> Self {
        Heterogeneity {
            u_a: 0.0,
            h_m: 0.0,
            h_1: 0.0,
            q_fixed: 0.0,
            f_hm: 0.0,
            w_fric: 0.0,
            large_tank_fraction: 0.0,
        }
    }

    fn jitters(&self) -> [(&'static str, f64); 6] {
        [
            ("u_a", self.u_a),
            ("h_m", self.h_m),
            ("h_1", self.h_1),
            ("q_fixed", self.q_fixed),
            ("f_hm", self.f_hm),
            ("w_fric", self.w_fric),
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, j) in self.jitters() {
            if !(0.0..=0.5).contains(&j) {
                return Err(format!("jitter on {name} must lie in [0, 0.5], got {j}"));
            }
        }
        if !(0.0..=1.0).contains(&self.large_tank_fraction) {
            return Err(format!(
                "large_tank_fraction must lie in [0, 1], got {}",
                self.large_tank_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetSpec {
    pub n_houses: usize,
    pub base_params: HouseParams,
    pub heterogeneity: Heterogeneity,
    pub rng_seed: u64,
    pub ambient: AmbientInput,
    /// Either one schedule shared by every house or one per house.
    pub schedules: Vec<HeatSchedule>,
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            n_houses: 20,
            base_params: HouseParams::default(),
            heterogeneity: Heterogeneity::default(),
            rng_seed: 1,
            ambient: AmbientInput::default(),
            schedules: vec![HeatSchedule::default()],
        }
    }
}

impl FleetSpec {
    pub fn homogeneous(n_houses: usize, params: HouseParams, schedule: HeatSchedule) -> Self {
        FleetSpec {
            n_houses,
            base_params: params,
            heterogeneity: Heterogeneity::none(),
            schedules: vec![schedule],
            ..FleetSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), FleetError> {
        let bad = FleetError::InvalidSpec;
        if self.n_houses == 0 {
            return Err(bad("n_houses must be >= 1".into()));
        }
        self.base_params.validate().map_err(|e| bad(e.to_string()))?;
        self.heterogeneity.validate().map_err(bad)?;
        self.ambient.validate().map_err(bad)?;
        if self.schedules.len() != 1 && self.schedules.len() != self.n_houses {
            return Err(bad(format!(
                "expected 1 or {} schedules, got {}",
                self.n_houses,
                self.schedules.len()
            )));
        }
        for s in &self.schedules {
            s.validate().map_err(bad)?;
        }
        Ok(())
    }

    fn schedule_for(&self, index: usize) -> &HeatSchedule {
        if self.schedules.len() == 1 {
            &self.schedules[0]
        } else {
            &self.schedules[index]
        }
    }
}

/// Derives an independent 64-bit stream seed for `(seed, house, lane)`.
fn stream_seed(seed: u64, house: u64, lane: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ house.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ lane.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What caused a mode change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Cause {
    Thermostat,
    External,
}

impl Cause {
    pub fn as_str(self) -> &'static str {
        match self {
            Cause::Thermostat => "THERMOSTAT",
            Cause::External => "EXTERNAL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    #[serde(rename = "time_s")]
    pub time: f64,
    pub house_id: HouseId,
    pub mode: Mode,
    pub cause: Cause,
}

/// Mode changes of every house in `(time, house id)` order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SwitchLog {
    events: Vec<SwitchEvent>,
}

impl SwitchLog {
    pub fn new() -> Self {
        SwitchLog::default()
    }

    pub fn from_events(mut events: Vec<SwitchEvent>) -> Self {
        sort_events(&mut events);
        SwitchLog { events }
    }

    pub fn events(&self) -> &[SwitchEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn for_house(&self, id: HouseId) -> impl Iterator<Item = &SwitchEvent> + '_ {
        self.events.iter().filter(move |e| e.house_id == id)
    }

    pub fn house_ids(&self) -> Vec<HouseId> {
        let mut ids: Vec<_> = self.events.iter().map(|e| e.house_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn extend(&mut self, mut batch: Vec<SwitchEvent>) {
        sort_events(&mut batch);
        self.events.extend(batch);
    }
}

fn sort_events(events: &mut [SwitchEvent]) {
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.house_id.cmp(&b.house_id)));
}

#[derive(Debug, Clone)]
pub struct House {
    pub id: HouseId,
    pub params: HouseParams,
    pub state: HouseState,
    pub schedule: HeatSchedule,
    stream: ScheduleStream,
    /// Programmable heat currently held for this latch step, W.
    pub programmed_w: f64,
}

impl House {
    /// Total heat into the water node: programmable source plus fixed load.
    pub fn heat_input(&self) -> f64 {
        self.programmed_w + self.params.q_fixed
    }

    pub fn t_therm(&self) -> f64 {
        thermostat_temperature(&self.state, &self.params)
    }

    /// Compressor electrical draw at the current state, W (0 when OFF).
    pub fn compressor_w(&self) -> f64 {
        compressor_operating_point(self.state.mode, self.state.t_1, self.state.t_2, &self.params)
            .map(|(_, w)| w)
            .unwrap_or(f64::NAN)
    }

    /// Metered real power: compressor plus the always-on fixed load, W.
    pub fn real_power(&self) -> f64 {
        self.compressor_w() + self.params.q_fixed
    }

    /// Electrical energy billed so far, J.
    pub fn billed_energy(&self) -> f64 {
        self.state.energy.compressor_j + self.params.q_fixed * self.state.clock
    }

    fn switch(&mut self, mode: Mode, cause: Cause) -> SwitchEvent {
        if self.state.mode == Mode::On && mode == Mode::Off {
            self.state.time_since_off = 0.0;
        }
        self.state.mode = mode;
        self.state.time_in_mode = 0.0;
        SwitchEvent {
            time: self.state.clock,
            house_id: self.id,
            mode,
            cause,
        }
    }

    fn advance(&mut self, target: f64, ambient: &AmbientInput, integrator: &Integrator) -> Result<Vec<SwitchEvent>, EtpError> {
        let mut events = Vec::new();
        let q_w = self.heat_input();
        let min_span = integrator.event_tolerance * 1e-3;
        loop {
            let wanted = thermostat_decision(self.t_therm(), self.state.mode, &self.params);
            if wanted != self.state.mode && !(wanted == Mode::On && lockout_active(&self.state, &self.params)) {
                events.push(self.switch(wanted, Cause::Thermostat));
            }
            let remaining = target - self.state.clock;
            if remaining <= min_span {
                break;
            }
            let mut horizon = remaining;
            if lockout_active(&self.state, &self.params) {
                let wait = self.params.lockout - self.state.time_since_off;
                if wait > min_span {
                    horizon = horizon.min(wait);
                }
            }
            let (next, event) = integrator.integrate_to_event(&self.state, q_w, ambient, &self.params, horizon)?;
            self.state = next;
            if event == Event::Horizon && horizon == remaining {
                self.state.clock = target;
            }
        }
        self.state.clock = target;
        Ok(events)
    }
}

/// Result of one latch step.
#[derive(Debug, Clone, Default)]
pub struct AdvanceReport {
    pub events: Vec<SwitchEvent>,
    /// Real power per house at the end of the step, W.
    pub power: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Fleet {
    houses: Vec<House>,
    ambient: AmbientInput,
    integrator: Integrator,
    time: f64,
    log: SwitchLog,
}

pub fn build_fleet(spec: &FleetSpec) -> Result<Fleet, FleetError> {
    spec.validate()?;
    let het = &spec.heterogeneity;
    let houses = (0..spec.n_houses)
        .map(|i| {
            let id = i as HouseId;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.rng_seed, i as u64, 0));
            let mut p = spec.base_params.clone();
            let mut jitter = |value: &mut f64, frac: f64| {
                let u: f64 = rng.random_range(-1.0..=1.0);
                *value *= 1.0 + frac * u;
            };
            jitter(&mut p.u_a, het.u_a);
            jitter(&mut p.h_m, het.h_m);
            jitter(&mut p.h_1, het.h_1);
            jitter(&mut p.q_fixed, het.q_fixed);
            jitter(&mut p.f_hm, het.f_hm);
            jitter(&mut p.w_fric, het.w_fric);
            p.f_hm = p.f_hm.clamp(0.0, 1.0);
            let large: f64 = rng.random();
            if het.large_tank_fraction > 0.0 {
                p.c_w = if large < het.large_tank_fraction {
                    C_W_30_GAL
                } else {
                    C_W_20_GAL
                };
            }
            p.validate().map_err(|e| FleetError::InvalidSpec(format!("house {id}: {e}")))?;

            let schedule = spec.schedule_for(i).clone();
            let mut stream = ScheduleStream::new(stream_seed(spec.rng_seed, i as u64, 1));
            let programmed_w = schedule_eval(&schedule, 0.0, &mut stream);
            let t_amb = spec.ambient.at(0.0);
            let state = initial_state(&p, programmed_w + p.q_fixed, t_amb);
            Ok(House {
                id,
                params: p,
                state,
                schedule,
                stream,
                programmed_w,
            })
        })
        .collect::<Result<Vec<_>, FleetError>>()?;
    Ok(Fleet {
        houses,
        ambient: spec.ambient.clone(),
        integrator: Integrator::default(),
        time: 0.0,
        log: SwitchLog::new(),
    })
}

/// Thermostat reading at the setpoint with the water above the air by the
/// mean steady-state offset, compressor OFF and free to start.
fn initial_state(p: &HouseParams, heat_in: f64, t_amb: f64) -> HouseState {
    let offset = heat_in / p.h_m;
    let mut s = HouseState::uniform(p.setpoint);
    s.t_a = p.setpoint - p.f_hm * offset;
    s.t_w = p.setpoint + (1.0 - p.f_hm) * offset;
    s.t_1 = s.t_a;
    s.t_2 = t_amb;
    s.time_since_off = p.lockout;
    s
}

impl Fleet {
    pub fn houses(&self) -> &[House] {
        &self.houses
    }

    pub fn len(&self) -> usize {
        self.houses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.houses.is_empty()
    }

    pub fn house(&self, id: HouseId) -> Option<&House> {
        self.houses.iter().find(|h| h.id == id)
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn ambient(&self) -> &AmbientInput {
        &self.ambient
    }

    pub fn log(&self) -> &SwitchLog {
        &self.log
    }

    pub fn integrator(&self) -> Integrator {
        self.integrator
    }

    pub fn set_integrator(&mut self, integrator: Integrator) {
        self.integrator = integrator;
    }

    /// Reorders the houses; ids, parameters and random streams travel with
    /// each house.
    pub fn permute(&mut self, order: &[usize]) {
        let mut slots: Vec<Option<House>> = self.houses.drain(..).map(Some).collect();
        self.houses = order.iter().map(|&i| slots[i].take().expect("permutation repeats an index")).collect();
    }

    fn index_of(&self, id: HouseId) -> Option<usize> {
        self.houses.iter().position(|h| h.id == id)
    }

    /// Adjudicates `requests` in order and applies the accepted ones. All
    /// house ids are checked before anything is applied.
    pub fn apply_requests(&mut self, requests: &[SwitchRequest]) -> Result<Vec<Verdict>, FleetError> {
        let indices = requests
            .iter()
            .map(|r| self.index_of(r.house_id).ok_or(FleetError::UnknownHouse(r.house_id)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut applied = Vec::new();
        let verdicts = requests
            .iter()
            .zip(indices)
            .map(|(req, idx)| {
                let house = &mut self.houses[idx];
                let verdict = adjudicate(req, &house.state, &house.params);
                if verdict.applies() {
                    applied.push(house.switch(req.desired_mode, Cause::External));
                }
                verdict
            })
            .collect();
        self.log.extend(applied);
        Ok(verdicts)
    }

    /// Advances every house by one latch step of `dt` seconds.
    pub fn advance(&mut self, dt: f64) -> Result<AdvanceReport, FleetError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(FleetError::InvalidStep(dt));
        }
        let t0 = self.time;
        let target = t0 + dt;
        let ambient = &self.ambient;
        let integrator = self.integrator;
        let per_house = self
            .houses
            .par_iter_mut()
            .map(|h| {
                h.programmed_w = schedule_eval(&h.schedule, t0, &mut h.stream);
                h.advance(target, ambient, &integrator)
                    .map_err(|source| FleetError::Integration { house: h.id, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let events: Vec<SwitchEvent> = per_house.into_iter().flatten().collect();
        self.time = target;
        self.log.extend(events.clone());
        let mut events = events;
        sort_events(&mut events);
        Ok(AdvanceReport {
            events,
            power: self.houses.iter().map(House::real_power).collect(),
        })
    }
}

/// Sum of per-house real power, W.
pub fn aggregate_power(fleet: &Fleet) -> f64 {
    fleet.houses.iter().map(House::real_power).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n: usize) -> FleetSpec {
        FleetSpec {
            n_houses: n,
            ..FleetSpec::default()
        }
    }

    #[test]
    fn zero_jitter_gives_identical_houses() {
        let spec = FleetSpec::homogeneous(20, HouseParams::default(), HeatSchedule::constant(250.0));
        let fleet = build_fleet(&spec).unwrap();
        let first = &fleet.houses()[0];
        for h in fleet.houses() {
            assert_eq!(h.params, first.params);
            assert_eq!(h.state, first.state);
        }
    }

    #[test]
    fn same_seed_same_fleet() {
        let a = build_fleet(&small_spec(20)).unwrap();
        let b = build_fleet(&small_spec(20)).unwrap();
        for (x, y) in a.houses().iter().zip(b.houses()) {
            assert_eq!(x.params, y.params);
        }
        let mut other = small_spec(20);
        other.rng_seed = 2;
        let c = build_fleet(&other).unwrap();
        assert_ne!(a.houses()[0].params, c.houses()[0].params);
    }

    #[test]
    fn q_fixed_jitter_stays_within_bounds() {
        let mut spec = FleetSpec::homogeneous(20, HouseParams::default(), HeatSchedule::constant(250.0));
        spec.heterogeneity.q_fixed = 0.05;
        let fleet = build_fleet(&spec).unwrap();
        let base = spec.base_params.q_fixed;
        let qs: Vec<f64> = fleet.houses().iter().map(|h| h.params.q_fixed).collect();
        assert!(qs.iter().all(|q| (q / base - 1.0).abs() <= 0.05 + 1e-12));
        assert!(qs.iter().any(|&q| q != base));
    }

    #[test]
    fn tank_mix_uses_both_sizes() {
        let mut spec = small_spec(40);
        spec.heterogeneity.large_tank_fraction = 0.5;
        let fleet = build_fleet(&spec).unwrap();
        let large = fleet.houses().iter().filter(|h| h.params.c_w == C_W_30_GAL).count();
        assert!(large > 0 && large < 40);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec(3);
        spec.heterogeneity.h_m = 0.6;
        assert!(matches!(build_fleet(&spec), Err(FleetError::InvalidSpec(_))));
        let mut spec = small_spec(0);
        spec.n_houses = 0;
        assert!(build_fleet(&spec).is_err());
        let mut spec = small_spec(3);
        spec.schedules = vec![HeatSchedule::default(); 2];
        assert!(build_fleet(&spec).is_err());
    }

    #[test]
    fn initial_state_is_mid_deadband_and_switchable() {
        let fleet = build_fleet(&small_spec(5)).unwrap();
        for h in fleet.houses() {
            assert!((h.t_therm() - h.params.setpoint).abs() < 1e-12);
            assert_eq!(h.state.mode, Mode::Off);
            assert!(!lockout_active(&h.state, &h.params));
        }
    }

    #[test]
    fn unknown_house_is_rejected_atomically() {
        let mut fleet = build_fleet(&small_spec(2)).unwrap();
        let reqs = [
            SwitchRequest { house_id: 0, desired_mode: Mode::On, request_time: 0.0 },
            SwitchRequest { house_id: 7, desired_mode: Mode::On, request_time: 0.0 },
        ];
        assert!(matches!(fleet.apply_requests(&reqs), Err(FleetError::UnknownHouse(7))));
        assert_eq!(fleet.houses()[0].state.mode, Mode::Off);
        assert!(fleet.log().is_empty());
    }

    #[test]
    fn all_off_aggregate_is_fixed_load() {
        let spec = FleetSpec::homogeneous(4, HouseParams::default(), HeatSchedule::constant(250.0));
        let fleet = build_fleet(&spec).unwrap();
        assert_eq!(aggregate_power(&fleet), 4.0 * 125.0);
    }

    #[test]
    fn advance_rejects_bad_step() {
        let mut fleet = build_fleet(&small_spec(1)).unwrap();
        assert!(matches!(fleet.advance(0.0), Err(FleetError::InvalidStep(_))));
    }
}
