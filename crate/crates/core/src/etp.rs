//! Four-node extended equivalent-thermal-parameter (ETP) model of one house.
//!
//! The nodes are the water tank (`t_w`), the room air (`t_a`), the evaporator
//! (`t_1`) and the condenser (`t_2`). The compressor is a single-speed
//! vapor-compression loop whose heat-removal rate follows the vapor-pressure
//! law `A exp(-(L/R)/T1) / T1` and whose electrical draw is a lossy Carnot
//! term plus a constant friction loss.
//!
//! Temperatures are carried in °C; the compressor laws take absolute
//! temperatures in K.
//!
//! [`Integrator::integrate_to_event`] advances the hybrid system with a
//! fixed-step classical Runge-Kutta scheme and localizes thermostat
//! deadband crossings by bisection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Offset between the Celsius and Kelvin scales.
pub const KELVIN_OFFSET: f64 = 273.15;

/// Specific heat of liquid water, J/(kg·°C).
pub const WATER_SPECIFIC_HEAT: f64 = 4186.0;

/// Mass of water in a 20 US gallon tank, kg.
pub const TANK_20_GAL_KG: f64 = 75.708;

/// Mass of water in a 30 US gallon tank, kg.
pub const TANK_30_GAL_KG: f64 = 113.562;

/// Heat capacity of a 20 gallon tank, J/°C.
pub const C_W_20_GAL: f64 = TANK_20_GAL_KG * WATER_SPECIFIC_HEAT;

/// Heat capacity of a 30 gallon tank, J/°C.
pub const C_W_30_GAL: f64 = TANK_30_GAL_KG * WATER_SPECIFIC_HEAT;

/// Nameplate cooling capacity of a 5000 BTU/h window unit, W.
pub const NAMEPLATE_COOLING_W: f64 = 1465.0;

/// Evaporator temperature at which the nameplate capacity is pinned, K.
pub const NAMEPLATE_EVAPORATOR_K: f64 = 300.0;

/// Latent-heat-over-gas-constant ratio for R-410A, K.
///
/// Agrees to 0.1 % with a least-squares fit of `ln P_sat = c - (L/R)/T` to
/// R-410A bubble-point pressures between 0 °C and 40 °C (see
/// `tests/refrigerant_fit.rs`).
pub const R410A_L_OVER_R: f64 = 2371.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EtpError {
    #[error("absolute temperature must be positive, got {kelvin} K")]
    NonPositiveTemperature { kelvin: f64 },
    #[error("cooling rate must be non-negative, got {watts} W")]
    NegativeCooling { watts: f64 },
    #[error("{name} must be positive, got {value}")]
    NonPositiveInput { name: &'static str, value: f64 },
    #[error("invalid house parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },
    #[error("integration step and horizon must be positive (step {step} s, horizon {horizon} s)")]
    InvalidStep { step: f64, horizon: f64 },
    #[error("non-finite state at t = {clock} s (t_w {t_w}, t_a {t_a}, t_1 {t_1}, t_2 {t_2})")]
    NonFinite {
        clock: f64,
        t_w: f64,
        t_a: f64,
        t_1: f64,
        t_2: f64,
    },
}

/// Compressor state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "ON")]
    On,
    #[serde(rename = "OFF")]
    Off,
}

impl Mode {
    pub fn is_on(self) -> bool {
        self == Mode::On
    }

    pub fn toggled(self) -> Mode {
        match self {
            Mode::On => Mode::Off,
            Mode::Off => Mode::On,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::On => "ON",
            Mode::Off => "OFF",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ON" => Ok(Mode::On),
            "OFF" => Ok(Mode::Off),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// Thermal, compressor and thermostat constants for one house.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HouseParams {
    /// Water tank heat capacity, J/°C.
    pub c_w: f64,
    /// Room air heat capacity, J/°C.
    pub c_r: f64,
    /// Evaporator heat capacity, J/°C.
    pub c_1: f64,
    /// Condenser heat capacity, J/°C.
    pub c_2: f64,
    /// Wall conductance to ambient, W/°C.
    pub u_a: f64,
    /// Water-to-air heat transfer coefficient, W/°C.
    pub h_m: f64,
    /// Evaporator-to-air heat transfer coefficient, W/°C.
    pub h_1: f64,
    /// Condenser-to-ambient heat transfer coefficient, W/°C.
    pub h_2: f64,
    /// Compressor amplitude `A`, W·K.
    pub a_comp: f64,
    /// Refrigerant latent heat over gas constant, K.
    pub l_over_r: f64,
    /// Refrigerant-loop loss factor, dimensionless, >= 1.
    pub gamma: f64,
    /// Constant compressor friction loss, W.
    pub w_fric: f64,
    /// Thermometer coupling fraction to the water temperature.
    pub f_hm: f64,
    /// Always-on internal load (pump and duct fan), W.
    pub q_fixed: f64,
    /// Thermostat setpoint, °C.
    pub setpoint: f64,
    /// Full deadband width, °C.
    pub deadband_width: f64,
    /// Minimum OFF dwell before the compressor may restart, s.
    pub lockout: f64,
    /// Minimum ON dwell before an external OFF request is honored, s.
    pub min_on_dwell: f64,
}

impl Default for HouseParams {
    fn default() -> Self {
        let l_over_r = R410A_L_OVER_R;
        HouseParams {
            c_w: C_W_20_GAL,
            c_r: 2.2e3,
            c_1: 5.0e3,
            c_2: 5.0e3,
            u_a: 5.0,
            h_m: 300.0,
            h_1: 150.0,
            h_2: 120.0,
            a_comp: amplitude_for_capacity(NAMEPLATE_COOLING_W, NAMEPLATE_EVAPORATOR_K, l_over_r),
            l_over_r,
            gamma: 1.5,
            w_fric: 200.0,
            f_hm: 0.75,
            q_fixed: 125.0,
            setpoint: 23.0,
            deadband_width: 1.0,
            lockout: 180.0,
            min_on_dwell: 0.0,
        }
    }
}

impl HouseParams {
    /// Lower deadband limit `T-`.
    pub fn t_minus(&self) -> f64 {
        self.setpoint - 0.5 * self.deadband_width
    }

    /// Upper deadband limit `T+`.
    pub fn t_plus(&self) -> f64 {
        self.setpoint + 0.5 * self.deadband_width
    }

    /// Re-pins `a_comp` so that the compressor removes `watts` at an
    /// evaporator temperature of `kelvin`.
    pub fn with_nameplate(mut self, watts: f64, kelvin: f64) -> Self {
        self.a_comp = amplitude_for_capacity(watts, kelvin, self.l_over_r);
        self
    }

    pub fn validate(&self) -> Result<(), EtpError> {
        let positive = [
            ("c_w", self.c_w),
            ("c_r", self.c_r),
            ("c_1", self.c_1),
            ("c_2", self.c_2),
            ("u_a", self.u_a),
            ("h_m", self.h_m),
            ("h_1", self.h_1),
            ("h_2", self.h_2),
            ("a_comp", self.a_comp),
            ("l_over_r", self.l_over_r),
            ("deadband_width", self.deadband_width),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(EtpError::InvalidParam {
                    field,
                    reason: format!("must be finite and > 0, got {value}"),
                });
            }
        }
        let non_negative = [
            ("w_fric", self.w_fric),
            ("q_fixed", self.q_fixed),
            ("lockout", self.lockout),
            ("min_on_dwell", self.min_on_dwell),
        ];
        for (field, value) in non_negative {
            if !(value.is_finite() && value >= 0.0) {
                return Err(EtpError::InvalidParam {
                    field,
                    reason: format!("must be finite and >= 0, got {value}"),
                });
            }
        }
        if !(self.gamma.is_finite() && self.gamma >= 1.0) {
            return Err(EtpError::InvalidParam {
                field: "gamma",
                reason: format!("must be >= 1, got {}", self.gamma),
            });
        }
        if !(0.0..=1.0).contains(&self.f_hm) {
            return Err(EtpError::InvalidParam {
                field: "f_hm",
                reason: format!("must lie in [0, 1], got {}", self.f_hm),
            });
        }
        if !self.setpoint.is_finite() {
            return Err(EtpError::InvalidParam {
                field: "setpoint",
                reason: "must be finite".into(),
            });
        }
        let nominal = cooling_power(NAMEPLATE_EVAPORATOR_K, self)?;
        if !(nominal.is_finite() && nominal > 0.0) {
            return Err(EtpError::InvalidParam {
                field: "a_comp",
                reason: format!("cooling power at {NAMEPLATE_EVAPORATOR_K} K is {nominal} W"),
            });
        }
        Ok(())
    }
}

/// Amplitude `A` that makes [`cooling_power`] equal `watts` at `kelvin`.
pub fn amplitude_for_capacity(watts: f64, kelvin: f64, l_over_r: f64) -> f64 {
    watts * kelvin * (l_over_r / kelvin).exp()
}

/// Outside (lab) temperature seen by the walls and the condenser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum AmbientInput {
    Constant {
        t_amb: f64,
    },
    /// Piecewise-linear in time, held at the end values outside the range.
    Profile {
        points: Vec<(f64, f64)>,
    },
}

impl Default for AmbientInput {
    fn default() -> Self {
        AmbientInput::Constant { t_amb: 25.0 }
    }
}

impl AmbientInput {
    pub fn constant(t_amb: f64) -> Self {
        AmbientInput::Constant { t_amb }
    }

    /// Ambient temperature at time `t`, °C.
    pub fn at(&self, t: f64) -> f64 {
        match self {
            AmbientInput::Constant { t_amb } => *t_amb,
            AmbientInput::Profile { points } => interpolate(points, t),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            AmbientInput::Constant { t_amb } if !t_amb.is_finite() => {
                Err(format!("ambient temperature must be finite, got {t_amb}"))
            }
            AmbientInput::Constant { .. } => Ok(()),
            AmbientInput::Profile { points } => {
                if points.is_empty() {
                    return Err("ambient profile needs at least one point".into());
                }
                if points.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
                    return Err("ambient profile points must be finite".into());
                }
                if points.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err("ambient profile times must be strictly increasing".into());
                }
                Ok(())
            }
        }
    }
}

/// Linear interpolation over `(t, value)` breakpoints, clamped at the ends.
pub(crate) fn interpolate(points: &[(f64, f64)], t: f64) -> f64 {
    match points {
        [] => 0.0,
        [(_, v)] => *v,
        _ => {
            let (t0, v0) = points[0];
            if t <= t0 {
                return v0;
            }
            let (tn, vn) = points[points.len() - 1];
            if t >= tn {
                return vn;
            }
            let idx = points.partition_point(|(ti, _)| *ti <= t);
            let (ta, va) = points[idx - 1];
            let (tb, vb) = points[idx];
            va + (vb - va) * (t - ta) / (tb - ta)
        }
    }
}

/// Running integrals of the boundary fluxes of one house, J.
///
/// Internal exchange terms (water-air, air-evaporator, the refrigerant
/// heat `Q_c`) cancel in the sum over nodes, so the stored node energy
/// changes by exactly the sum of these four terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    /// Heat injected into the water node.
    pub injected_j: f64,
    /// Heat conducted in through the walls.
    pub wall_gain_j: f64,
    /// Heat gained by the condenser from ambient (negative while rejecting).
    pub condenser_gain_j: f64,
    /// Compressor electrical work, excluding the fixed load.
    pub compressor_j: f64,
}

/// Continuous temperatures, compressor mode and switch timers of one house.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseState {
    pub t_w: f64,
    pub t_a: f64,
    pub t_1: f64,
    pub t_2: f64,
    pub mode: Mode,
    /// Seconds since the last mode change.
    pub time_in_mode: f64,
    /// Seconds since the last ON→OFF transition; infinite if none yet.
    pub time_since_off: f64,
    /// Simulation time, s.
    pub clock: f64,
    pub energy: EnergyLedger,
}

impl HouseState {
    /// All four nodes at `temp`, compressor OFF, never switched.
    pub fn uniform(temp: f64) -> Self {
        HouseState {
            t_w: temp,
            t_a: temp,
            t_1: temp,
            t_2: temp,
            mode: Mode::Off,
            time_in_mode: 0.0,
            time_since_off: f64::INFINITY,
            clock: 0.0,
            energy: EnergyLedger::default(),
        }
    }

    /// Stored sensible heat `sum C_i T_i`, J (relative to 0 °C).
    pub fn stored_energy(&self, params: &HouseParams) -> f64 {
        params.c_w * self.t_w + params.c_r * self.t_a + params.c_1 * self.t_1 + params.c_2 * self.t_2
    }

    pub fn temperatures(&self) -> [f64; 4] {
        [self.t_w, self.t_a, self.t_1, self.t_2]
    }
}

/// Time derivatives of the four node temperatures, °C/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivatives {
    pub t_w: f64,
    pub t_a: f64,
    pub t_1: f64,
    pub t_2: f64,
}

/// Heat-removal rate of the running compressor at evaporator temperature
/// `t_1_k`, W.
pub fn cooling_power(t_1_k: f64, params: &HouseParams) -> Result<f64, EtpError> {
    if !(t_1_k > 0.0) {
        return Err(EtpError::NonPositiveTemperature { kelvin: t_1_k });
    }
    Ok(params.a_comp * (-params.l_over_r / t_1_k).exp() / t_1_k)
}

/// Electrical power of the running compressor, W.
pub fn compressor_power(q_c: f64, t_1_k: f64, t_2_k: f64, params: &HouseParams) -> Result<f64, EtpError> {
    if !(t_1_k > 0.0) {
        return Err(EtpError::NonPositiveTemperature { kelvin: t_1_k });
    }
    if !(q_c >= 0.0) {
        return Err(EtpError::NegativeCooling { watts: q_c });
    }
    Ok(params.gamma * q_c * (t_2_k - t_1_k) / t_1_k + params.w_fric)
}

/// Cooling rate and electrical draw for the given mode; both zero when OFF.
pub fn compressor_operating_point(mode: Mode, t_1: f64, t_2: f64, params: &HouseParams) -> Result<(f64, f64), EtpError> {
    match mode {
        Mode::Off => Ok((0.0, 0.0)),
        Mode::On => {
            let t_1_k = t_1 + KELVIN_OFFSET;
            let q_c = cooling_power(t_1_k, params)?;
            let w = compressor_power(q_c, t_1_k, t_2 + KELVIN_OFFSET, params)?;
            Ok((q_c, w))
        }
    }
}

/// Right-hand side of the heat-flow equations. `q_w` is the total heat
/// delivered to the water node (programmable source plus fixed load).
pub fn derivatives(state: &HouseState, q_w: f64, ambient: &AmbientInput, params: &HouseParams) -> Result<Derivatives, EtpError> {
    let t_amb = ambient.at(state.clock);
    let rates = node_rates(&state.temperatures(), state.mode, q_w, t_amb, params)?;
    Ok(Derivatives {
        t_w: rates.temps[0],
        t_a: rates.temps[1],
        t_1: rates.temps[2],
        t_2: rates.temps[3],
    })
}

/// Thermostat-sensed temperature: a blend of air and water temperature.
pub fn thermostat_temperature(state: &HouseState, params: &HouseParams) -> f64 {
    blend(state.t_a, state.t_w, params.f_hm)
}

#[inline]
fn blend(t_a: f64, t_w: f64, f_hm: f64) -> f64 {
    (1.0 - f_hm) * t_a + f_hm * t_w
}

/// Effective thermometer coupling to the water implied by the local air
/// speed `air_speed` past the sensor, clipped to `[0, 1]`.
///
/// Equates the convective exchange `h (T_w - T_a)` with the enthalpy
/// carried by the air stream `rho c_p v (T_therm - T_a)`, which gives
/// `h / (rho c_p v)`. Faster air drives the reading toward the mixed air
/// temperature.
pub fn effective_coupling(air_speed: f64, h: f64, rho: f64, cp: f64) -> Result<f64, EtpError> {
    for (name, value) in [("air_speed", air_speed), ("h", h), ("rho", rho), ("cp", cp)] {
        if !(value.is_finite() && value > 0.0) {
            return Err(EtpError::NonPositiveInput { name, value });
        }
    }
    Ok((h / (rho * cp * air_speed)).clamp(0.0, 1.0))
}

/// Outcome of [`Integrator::integrate_to_event`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    /// The thermostat temperature fell through `T-` while ON.
    ReachedTMinus,
    /// The thermostat temperature rose through `T+` while OFF.
    ReachedTPlus,
    Horizon,
}

/// Fixed-step RK4 with bisection localization of deadband crossings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integrator {
    /// Internal step, s.
    pub dt: f64,
    /// Width of the final bracket around a crossing, s.
    pub event_tolerance: f64,
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator {
            dt: 0.1,
            event_tolerance: 1e-3,
        }
    }
}

// State vector: four temperatures followed by the four ledger integrals.
const N: usize = 8;

struct Rates {
    temps: [f64; 4],
    fluxes: [f64; 4],
}

fn node_rates(temps: &[f64; 4], mode: Mode, q_w: f64, t_amb: f64, p: &HouseParams) -> Result<Rates, EtpError> {
    let [t_w, t_a, t_1, t_2] = *temps;
    let (q_c, w) = compressor_operating_point(mode, t_1, t_2, p)?;
    let wall = p.u_a * (t_amb - t_a);
    let water_to_air = p.h_m * (t_w - t_a);
    let evap_to_air = p.h_1 * (t_1 - t_a);
    let condenser = p.h_2 * (t_amb - t_2);
    Ok(Rates {
        temps: [
            (q_w - water_to_air) / p.c_w,
            (wall + water_to_air + evap_to_air) / p.c_r,
            (-evap_to_air - q_c) / p.c_1,
            (condenser + q_c + w) / p.c_2,
        ],
        fluxes: [q_w, wall, condenser, w],
    })
}

struct Stepper<'a> {
    mode: Mode,
    q_w: f64,
    ambient: &'a AmbientInput,
    params: &'a HouseParams,
}

impl Stepper<'_> {
    fn rhs(&self, y: &[f64; N], t: f64) -> Result<[f64; N], EtpError> {
        let temps = [y[0], y[1], y[2], y[3]];
        let r = node_rates(&temps, self.mode, self.q_w, self.ambient.at(t), self.params)?;
        Ok([
            r.temps[0], r.temps[1], r.temps[2], r.temps[3], r.fluxes[0], r.fluxes[1], r.fluxes[2], r.fluxes[3],
        ])
    }

    fn step(&self, y: &[f64; N], t: f64, h: f64) -> Result<[f64; N], EtpError> {
        let k1 = self.rhs(y, t)?;
        let k2 = self.rhs(&axpy(y, 0.5 * h, &k1), t + 0.5 * h)?;
        let k3 = self.rhs(&axpy(y, 0.5 * h, &k2), t + 0.5 * h)?;
        let k4 = self.rhs(&axpy(y, h, &k3), t + h)?;
        let mut out = *y;
        for i in 0..N {
            out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        Ok(out)
    }
}

fn axpy(y: &[f64; N], a: f64, k: &[f64; N]) -> [f64; N] {
    let mut out = *y;
    for i in 0..N {
        out[i] += a * k[i];
    }
    out
}

fn pack(state: &HouseState) -> [f64; N] {
    let e = &state.energy;
    [
        state.t_w,
        state.t_a,
        state.t_1,
        state.t_2,
        e.injected_j,
        e.wall_gain_j,
        e.condenser_gain_j,
        e.compressor_j,
    ]
}

fn unpack(y: &[f64; N], template: &HouseState, elapsed: f64) -> HouseState {
    HouseState {
        t_w: y[0],
        t_a: y[1],
        t_1: y[2],
        t_2: y[3],
        mode: template.mode,
        time_in_mode: template.time_in_mode + elapsed,
        time_since_off: template.time_since_off + elapsed,
        clock: template.clock + elapsed,
        energy: EnergyLedger {
            injected_j: y[4],
            wall_gain_j: y[5],
            condenser_gain_j: y[6],
            compressor_j: y[7],
        },
    }
}

impl Integrator {
    pub fn new(dt: f64) -> Self {
        Integrator {
            dt,
            ..Integrator::default()
        }
    }

    /// Advances `state` by at most `horizon` seconds with the compressor
    /// held in `state.mode`, stopping early at the first crossing of the
    /// deadband limit the thermostat watches in that mode (`T-` when ON,
    /// `T+` when OFF).
    ///
    /// Only crossings are reported: a state that already sits beyond the
    /// watched limit integrates to the horizon. On an event the returned
    /// state lies on the far side of the limit, within `event_tolerance`
    /// seconds of the crossing. The mode is never changed here.
    pub fn integrate_to_event(
        &self,
        state: &HouseState,
        q_w: f64,
        ambient: &AmbientInput,
        params: &HouseParams,
        horizon: f64,
    ) -> Result<(HouseState, Event), EtpError> {
        if !(self.dt > 0.0 && horizon > 0.0 && self.event_tolerance > 0.0) || !horizon.is_finite() {
            return Err(EtpError::InvalidStep {
                step: self.dt,
                horizon,
            });
        }
        let stepper = Stepper {
            mode: state.mode,
            q_w,
            ambient,
            params,
        };
        let (limit, event) = match state.mode {
            Mode::On => (params.t_minus(), Event::ReachedTMinus),
            Mode::Off => (params.t_plus(), Event::ReachedTPlus),
        };
        let f_hm = params.f_hm;
        let crossed = |y: &[f64; N]| {
            let th = blend(y[1], y[0], f_hm);
            match state.mode {
                Mode::On => th <= limit,
                Mode::Off => th >= limit,
            }
        };

        let mut y = pack(state);
        let mut watching = !crossed(&y);
        let mut elapsed = 0.0;
        while elapsed < horizon {
            let remaining = horizon - elapsed;
            let h = if remaining <= self.dt * (1.0 + 1e-9) {
                remaining
            } else {
                self.dt
            };
            let t0 = state.clock + elapsed;
            let next = stepper.step(&y, t0, h)?;
            check_finite(&next, t0 + h)?;
            if watching && crossed(&next) {
                let (tau, at) = self.bisect(&stepper, &y, t0, h, next, &crossed)?;
                return Ok((unpack(&at, state, elapsed + tau), event));
            }
            watching = watching || !crossed(&next);
            y = next;
            elapsed = if h == remaining { horizon } else { elapsed + h };
        }
        Ok((unpack(&y, state, horizon), Event::Horizon))
    }

    fn bisect(
        &self,
        stepper: &Stepper<'_>,
        y0: &[f64; N],
        t0: f64,
        h: f64,
        mut hi_state: [f64; N],
        crossed: &impl Fn(&[f64; N]) -> bool,
    ) -> Result<(f64, [f64; N]), EtpError> {
        let (mut lo, mut hi) = (0.0, h);
        while hi - lo > self.event_tolerance {
            let mid = 0.5 * (lo + hi);
            let trial = stepper.step(y0, t0, mid)?;
            if crossed(&trial) {
                hi = mid;
                hi_state = trial;
            } else {
                lo = mid;
            }
        }
        Ok((hi, hi_state))
    }
}

fn check_finite(y: &[f64; N], clock: f64) -> Result<(), EtpError> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EtpError::NonFinite {
            clock,
            t_w: y[0],
            t_a: y[1],
            t_1: y[2],
            t_2: y[3],
        })
    }
}

/// [`Integrator::integrate_to_event`] with the default 100 ms step.
pub fn integrate_to_event(
    state: &HouseState,
    q_w: f64,
    ambient: &AmbientInput,
    params: &HouseParams,
    horizon: f64,
) -> Result<(HouseState, Event), EtpError> {
    Integrator::default().integrate_to_event(state, q_w, ambient, params, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params_with(f: impl FnOnce(&mut HouseParams)) -> HouseParams {
        let mut p = HouseParams::default();
        f(&mut p);
        p
    }

    #[test]
    fn default_params_are_valid() {
        HouseParams::default().validate().unwrap();
    }

    #[test]
    fn nameplate_amplitude_inverts_cooling_law() {
        let p = HouseParams::default();
        let expected = 1465.0 * 300.0 * (p.l_over_r / 300.0).exp();
        assert_relative_eq!(p.a_comp, expected, max_relative = 1e-15);
        assert_relative_eq!(cooling_power(300.0, &p).unwrap(), 1465.0, max_relative = 1e-12);
    }

    #[test]
    fn cooling_power_rejects_nonpositive_kelvin() {
        let p = HouseParams::default();
        assert!(matches!(cooling_power(0.0, &p), Err(EtpError::NonPositiveTemperature { .. })));
        assert!(matches!(cooling_power(-3.0, &p), Err(EtpError::NonPositiveTemperature { .. })));
        assert!(cooling_power(f64::NAN, &p).is_err());
    }

    #[test]
    fn cooling_power_is_pure() {
        let p = HouseParams::default();
        assert_eq!(cooling_power(287.3, &p).unwrap(), cooling_power(287.3, &p).unwrap());
    }

    #[test]
    fn compressor_power_equal_temperatures_is_friction() {
        let p = HouseParams::default();
        assert_eq!(compressor_power(900.0, 290.0, 290.0, &p).unwrap(), p.w_fric);
    }

    #[test]
    fn compressor_power_worked_example() {
        let p = params_with(|p| {
            p.gamma = 1.0;
            p.w_fric = 50.0;
        });
        assert_relative_eq!(compressor_power(1000.0, 280.0, 308.0, &p).unwrap(), 150.0, max_relative = 1e-14);
    }

    #[test]
    fn compressor_power_domain_errors() {
        let p = HouseParams::default();
        assert!(compressor_power(100.0, 0.0, 300.0, &p).is_err());
        assert!(compressor_power(-1.0, 290.0, 300.0, &p).is_err());
    }

    #[test]
    fn off_mode_draws_nothing() {
        let p = HouseParams::default();
        assert_eq!(compressor_operating_point(Mode::Off, 10.0, 40.0, &p).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn global_equilibrium_has_zero_rates() {
        let p = HouseParams::default();
        let s = HouseState::uniform(25.0);
        let d = derivatives(&s, 0.0, &AmbientInput::constant(25.0), &p).unwrap();
        assert_eq!((d.t_w, d.t_a, d.t_1, d.t_2), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn analytic_off_fixed_point_has_zero_rates() {
        let p = params_with(|p| {
            p.u_a = 5.0;
            p.h_m = 25.0;
        });
        let mut s = HouseState::uniform(25.0);
        s.t_a = 35.0;
        s.t_w = 37.0;
        s.t_1 = 35.0;
        s.t_2 = 25.0;
        let d = derivatives(&s, 50.0, &AmbientInput::constant(25.0), &p).unwrap();
        for v in [d.t_w, d.t_a, d.t_1, d.t_2] {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn thermostat_temperature_blends() {
        let mut s = HouseState::uniform(0.0);
        s.t_a = 24.0;
        s.t_w = 30.0;
        for (f, want) in [(0.0, 24.0), (1.0, 30.0), (0.5, 27.0)] {
            let p = params_with(|p| p.f_hm = f);
            assert_eq!(thermostat_temperature(&s, &p), want);
        }
    }

    #[test]
    fn effective_coupling_examples() {
        let f = effective_coupling(0.01, 12.0, 1.2, 1005.0).unwrap();
        assert_relative_eq!(f, 12.0 / (1.2 * 1005.0 * 0.01), max_relative = 1e-15);
        assert!(f <= 1.0 && f > 0.99);
        let slow = effective_coupling(0.001, 12.0, 1.2, 1005.0).unwrap();
        assert_eq!(slow, 1.0);
        assert!(effective_coupling(1e6, 12.0, 1.2, 1005.0).unwrap() < 1e-7);
        let a = effective_coupling(0.1, 12.0, 1.2, 1005.0).unwrap();
        let b = effective_coupling(0.2, 12.0, 1.2, 1005.0).unwrap();
        assert_relative_eq!(b, a / 2.0, max_relative = 1e-15);
        assert!(effective_coupling(0.0, 12.0, 1.2, 1005.0).is_err());
        assert!(effective_coupling(1.0, -12.0, 1.2, 1005.0).is_err());
    }

    #[test]
    fn validate_rejects_bad_fields() {
        let cases: Vec<(&str, HouseParams)> = vec![
            ("c_w", params_with(|p| p.c_w = 0.0)),
            ("h_1", params_with(|p| p.h_1 = -1.0)),
            ("f_hm", params_with(|p| p.f_hm = 1.2)),
            ("gamma", params_with(|p| p.gamma = 0.9)),
            ("w_fric", params_with(|p| p.w_fric = -1.0)),
            ("deadband_width", params_with(|p| p.deadband_width = 0.0)),
            ("lockout", params_with(|p| p.lockout = -5.0)),
        ];
        for (field, p) in cases {
            match p.validate() {
                Err(EtpError::InvalidParam { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }

    #[test]
    fn nonpositive_horizon_is_rejected() {
        let p = HouseParams::default();
        let s = HouseState::uniform(23.0);
        let amb = AmbientInput::default();
        assert!(integrate_to_event(&s, 0.0, &amb, &p, 0.0).is_err());
        assert!(Integrator::new(0.0).integrate_to_event(&s, 0.0, &amb, &p, 1.0).is_err());
    }

    #[test]
    fn tiny_horizon_advances_exactly() {
        let p = HouseParams::default();
        let s = HouseState::uniform(23.0);
        let (next, ev) = integrate_to_event(&s, 375.0, &AmbientInput::default(), &p, 0.001).unwrap();
        assert_eq!(ev, Event::Horizon);
        assert_eq!(next.clock, 0.001);
        assert!(next.t_w > s.t_w);
    }

    #[test]
    fn overloaded_house_never_reaches_lower_limit() {
        let p = HouseParams::default();
        let mut s = HouseState::uniform(23.0);
        s.mode = Mode::On;
        let (next, ev) = integrate_to_event(&s, 2500.0, &AmbientInput::default(), &p, 4.0 * 3600.0).unwrap();
        assert_eq!(ev, Event::Horizon);
        assert!(thermostat_temperature(&next, &p) > p.t_minus());
    }

    #[test]
    fn state_beyond_limit_integrates_to_horizon() {
        let p = HouseParams::default();
        let mut s = HouseState::uniform(p.t_plus() + 0.5);
        s.t_2 = 25.0;
        let (_, ev) = integrate_to_event(&s, 375.0, &AmbientInput::default(), &p, 30.0).unwrap();
        assert_eq!(ev, Event::Horizon);
    }

    #[test]
    fn interpolation_clamps_and_blends() {
        let pts = [(0.0, 100.0), (3600.0, 200.0)];
        assert_eq!(interpolate(&pts, 1800.0), 150.0);
        assert_eq!(interpolate(&pts, -5.0), 100.0);
        assert_eq!(interpolate(&pts, 1e9), 200.0);
        assert_eq!(interpolate(&[(5.0, 7.0)], 0.0), 7.0);
    }
}
