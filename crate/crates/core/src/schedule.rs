//! Programmable heat injection into the water node.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::etp::interpolate;

/// Heat delivered by a house's water heater over time, W.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum HeatSchedule {
    Constant {
        base_watts: f64,
    },
    /// `base_watts` plus an Ornstein-Uhlenbeck perturbation with stationary
    /// standard deviation `amplitude_watts`, bounded to three deviations
    /// and clamped so the total never goes negative.
    RandomPerturbed {
        base_watts: f64,
        amplitude_watts: f64,
        correlation_time_s: f64,
    },
    /// `(time s, watts)` breakpoints, linearly interpolated and held at the
    /// end values outside the range.
    Profile {
        points: Vec<(f64, f64)>,
    },
}

impl Default for HeatSchedule {
    fn default() -> Self {
        HeatSchedule::Constant { base_watts: 250.0 }
    }
}

impl HeatSchedule {
    pub fn constant(base_watts: f64) -> Self {
        HeatSchedule::Constant { base_watts }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            HeatSchedule::Constant { base_watts } => non_negative("base_watts", *base_watts),
            HeatSchedule::RandomPerturbed {
                base_watts,
                amplitude_watts,
                correlation_time_s,
            } => {
                non_negative("base_watts", *base_watts)?;
                non_negative("amplitude_watts", *amplitude_watts)?;
                if !(correlation_time_s.is_finite() && *correlation_time_s > 0.0) {
                    return Err(format!("correlation_time_s must be > 0, got {correlation_time_s}"));
                }
                Ok(())
            }
            HeatSchedule::Profile { points } => {
                if points.is_empty() {
                    return Err("profile needs at least one breakpoint".into());
                }
                for (t, w) in points {
                    if !t.is_finite() {
                        return Err(format!("profile time {t} is not finite"));
                    }
                    non_negative("profile watts", *w)?;
                }
                if points.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err("profile breakpoints must be strictly increasing in time".into());
                }
                Ok(())
            }
        }
    }

    /// Nominal heating rate ignoring any random perturbation, W.
    pub fn nominal(&self, t: f64) -> f64 {
        match self {
            HeatSchedule::Constant { base_watts } | HeatSchedule::RandomPerturbed { base_watts, .. } => *base_watts,
            HeatSchedule::Profile { points } => interpolate(points, t).max(0.0),
        }
    }
}

fn non_negative(name: &str, v: f64) -> Result<(), String> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(format!("{name} must be finite and >= 0, got {v}"))
    }
}

/// Per-house random state for [`HeatSchedule::RandomPerturbed`].
#[derive(Debug, Clone)]
pub struct ScheduleStream {
    rng: ChaCha8Rng,
    perturbation: f64,
    last_t: Option<f64>,
}

impl ScheduleStream {
    pub fn new(seed: u64) -> Self {
        ScheduleStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            perturbation: 0.0,
            last_t: None,
        }
    }
}

/// Heating rate at time `t`, W. Times passed for one stream must be
/// nondecreasing.
pub fn schedule_eval(schedule: &HeatSchedule, t: f64, stream: &mut ScheduleStream) -> f64 {
    match schedule {
        HeatSchedule::Constant { base_watts } => *base_watts,
        HeatSchedule::Profile { .. } => schedule.nominal(t),
        HeatSchedule::RandomPerturbed {
            base_watts,
            amplitude_watts,
            correlation_time_s,
        } => {
            let z: f64 = StandardNormal.sample(&mut stream.rng);
            let x = match stream.last_t {
                None => amplitude_watts * z,
                Some(prev) => {
                    let decay = (-(t - prev).max(0.0) / correlation_time_s).exp();
                    stream.perturbation * decay + amplitude_watts * (1.0 - decay * decay).sqrt() * z
                }
            };
            let bound = 3.0 * amplitude_watts;
            stream.perturbation = x.clamp(-bound, bound);
            stream.last_t = Some(t);
            (base_watts + stream.perturbation).max(0.0)
        }
    }
}
