//! Software thermostat, compressor lockout and adjudication of external
//! switch requests.
//!
//! Authority is ordered lockout > thermostat > request: a restart inside
//! the lockout window is always refused, then a request that would hold
//! the house outside its deadband is overridden, and only then is the
//! request applied.

use serde::{Deserialize, Serialize};

use crate::etp::{thermostat_temperature, HouseParams, HouseState, Mode};

pub type HouseId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchRequest {
    pub house_id: HouseId,
    pub desired_mode: Mode,
    pub request_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    Applied,
    LockoutActive,
    ThermostatOverride,
    NoChange,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Applied => "APPLIED",
            Reason::LockoutActive => "LOCKOUT_ACTIVE",
            Reason::ThermostatOverride => "THERMOSTAT_OVERRIDE",
            Reason::NoChange => "NO_CHANGE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Verdict {
    pub accepted: bool,
    pub reason: Reason,
}

impl Verdict {
    pub fn new(reason: Reason) -> Self {
        Verdict {
            accepted: matches!(reason, Reason::Applied | Reason::NoChange),
            reason,
        }
    }

    /// True when the verdict changes the compressor mode.
    pub fn applies(&self) -> bool {
        self.reason == Reason::Applied
    }
}

/// Bang-bang decision with hysteresis: ON at or above `T+`, OFF at or
/// below `T-`, otherwise hold.
pub fn thermostat_decision(t_therm: f64, current_mode: Mode, params: &HouseParams) -> Mode {
    if t_therm >= params.t_plus() {
        Mode::On
    } else if t_therm <= params.t_minus() {
        Mode::Off
    } else {
        current_mode
    }
}

/// True while a restart would violate the lockout window.
pub fn lockout_active(state: &HouseState, params: &HouseParams) -> bool {
    state.mode == Mode::Off && state.time_since_off < params.lockout
}

pub fn adjudicate(request: &SwitchRequest, state: &HouseState, params: &HouseParams) -> Verdict {
    if request.desired_mode == state.mode {
        return Verdict::new(Reason::NoChange);
    }
    let t_therm = thermostat_temperature(state, params);
    match request.desired_mode {
        Mode::On => {
            if lockout_active(state, params) {
                Verdict::new(Reason::LockoutActive)
            } else if t_therm <= params.t_minus() {
                Verdict::new(Reason::ThermostatOverride)
            } else {
                Verdict::new(Reason::Applied)
            }
        }
        Mode::Off => {
            if state.time_in_mode < params.min_on_dwell {
                Verdict::new(Reason::LockoutActive)
            } else if t_therm >= params.t_plus() {
                Verdict::new(Reason::ThermostatOverride)
            } else {
                Verdict::new(Reason::Applied)
            }
        }
    }
}
