//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the crate's model code; the heat-flow equations
//! and the thermostat are written out again from scratch.

#![allow(dead_code)]

use tcl_testbed::etp::{HouseParams, HouseState, Mode};

pub const K: f64 = 273.15;

/// Node temperatures `[t_w, t_a, t_1, t_2]`.
pub type Temps = [f64; 4];

pub fn q_c(p: &HouseParams, t_1: f64) -> f64 {
    let t = t_1 + K;
    p.a_comp * (-p.l_over_r / t).exp() / t
}

pub fn work(p: &HouseParams, t_1: f64, t_2: f64) -> f64 {
    p.gamma * q_c(p, t_1) * (t_2 - t_1) / (t_1 + K) + p.w_fric
}

/// Heat-flow network: conductances between node pairs plus sources.
pub fn slopes(p: &HouseParams, x: &Temps, on: bool, q_w: f64, t_amb: f64) -> Temps {
    const AMB: usize = 4;
    let t = [x[0], x[1], x[2], x[3], t_amb];
    let links = [(0, 1, p.h_m), (1, 2, p.h_1), (1, AMB, p.u_a), (3, AMB, p.h_2)];
    let mut heat = [0.0; 4];
    for (i, j, g) in links {
        let flow = g * (t[j] - t[i]);
        heat[i] += flow;
        if j != AMB {
            heat[j] -= flow;
        }
    }
    heat[0] += q_w;
    if on {
        let qc = q_c(p, x[2]);
        heat[2] -= qc;
        heat[3] += qc + work(p, x[2], x[3]);
    }
    let caps = [p.c_w, p.c_r, p.c_1, p.c_2];
    [heat[0] / caps[0], heat[1] / caps[1], heat[2] / caps[2], heat[3] / caps[3]]
}

pub fn t_therm(p: &HouseParams, x: &Temps) -> f64 {
    (1.0 - p.f_hm) * x[1] + p.f_hm * x[0]
}

pub fn temps(s: &HouseState) -> Temps {
    [s.t_w, s.t_a, s.t_1, s.t_2]
}

pub fn euler_step(p: &HouseParams, x: &Temps, on: bool, q_w: f64, t_amb: f64, h: f64) -> Temps {
    let d = slopes(p, x, on, q_w, t_amb);
    [x[0] + h * d[0], x[1] + h * d[1], x[2] + h * d[2], x[3] + h * d[3]]
}

pub fn rk4_step(p: &HouseParams, x: &Temps, on: bool, q_w: f64, t_amb: f64, h: f64) -> Temps {
    let f = |y: &Temps| slopes(p, y, on, q_w, t_amb);
    let add = |y: &Temps, a: f64, k: &Temps| [y[0] + a * k[0], y[1] + a * k[1], y[2] + a * k[2], y[3] + a * k[3]];
    let k1 = f(x);
    let k2 = f(&add(x, h / 2.0, &k1));
    let k3 = f(&add(x, h / 2.0, &k2));
    let k4 = f(&add(x, h, &k3));
    let mut out = *x;
    for i in 0..4 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Explicit-Euler run of one thermostat-controlled house with lockout.
pub struct EulerRun {
    /// `(time, new mode)` for every switch.
    pub switches: Vec<(f64, Mode)>,
    /// Temperatures at every whole second, starting at t = 0.
    pub samples: Vec<Temps>,
}

pub fn euler_house(p: &HouseParams, start: &HouseState, q_w: f64, t_amb: f64, seconds: u64, dt: f64) -> EulerRun {
    let per_second = (1.0 / dt).round() as u64;
    let mut x = temps(start);
    let mut on = start.mode == Mode::On;
    let mut since_off = start.time_since_off;
    let mut switches = Vec::new();
    let mut samples = vec![x];
    let (lo, hi) = (p.setpoint - p.deadband_width / 2.0, p.setpoint + p.deadband_width / 2.0);
    for k in 1..=seconds * per_second {
        x = euler_step(p, &x, on, q_w, t_amb, dt);
        since_off += dt;
        let now = k as f64 * dt;
        let th = t_therm(p, &x);
        if on && th <= lo {
            on = false;
            since_off = 0.0;
            switches.push((now, Mode::Off));
        } else if !on && th >= hi && since_off >= p.lockout - 1e-9 {
            on = true;
            switches.push((now, Mode::On));
        }
        if k % per_second == 0 {
            samples.push(x);
        }
    }
    EulerRun { switches, samples }
}
