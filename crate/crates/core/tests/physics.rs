mod common;

use tcl_testbed::analysis::cycles;
use tcl_testbed::etp::{
    compressor_operating_point, thermostat_temperature, AmbientInput, Event, HouseParams, HouseState, Integrator, Mode,
};
use tcl_testbed::fleet::{build_fleet, Fleet, FleetSpec, Heterogeneity};
use tcl_testbed::schedule::HeatSchedule;

fn fleet(n: usize, q: f64, het: Heterogeneity) -> Fleet {
    let spec = FleetSpec {
        heterogeneity: het,
        ..FleetSpec::homogeneous(n, HouseParams::default(), HeatSchedule::constant(q))
    };
    build_fleet(&spec).unwrap()
}

fn run(f: &mut Fleet, seconds: usize) {
    for _ in 0..seconds {
        f.advance(1.0).unwrap();
    }
}

/// Drives one house through the ON phase of a steady cycle and returns
/// the state right at the ON→OFF crossing, already switched OFF.
fn state_at_switch_off(p: &HouseParams, q_w: f64, ambient: &AmbientInput) -> HouseState {
    let integrator = Integrator::default();
    let mut s = HouseState::uniform(p.setpoint);
    s.t_w += 1.0;
    s.t_2 = ambient.at(0.0);
    s.mode = Mode::On;
    let mut offs = 0;
    loop {
        let (next, event) = integrator.integrate_to_event(&s, q_w, ambient, p, 1e5).unwrap();
        s = next;
        match event {
            Event::ReachedTPlus => s.mode = Mode::On,
            Event::ReachedTMinus => {
                s.mode = Mode::Off;
                offs += 1;
                if offs == 6 {
                    return s;
                }
            }
            Event::Horizon => panic!("house stopped cycling"),
        }
    }
}

#[test]
fn air_undershoots_after_switch_off() {
    let p = HouseParams::default();
    let ambient = AmbientInput::constant(25.0);
    let q_w = 250.0 + p.q_fixed;
    let s = state_at_switch_off(&p, q_w, &ambient);
    let at_event = s.t_a;
    let integrator = Integrator::default();
    let mut cur = s;
    let mut lowest = at_event;
    for _ in 0..600 {
        let (next, event) = integrator.integrate_to_event(&cur, q_w, &ambient, &p, 0.1).unwrap();
        assert_eq!(event, Event::Horizon);
        lowest = lowest.min(next.t_a);
        cur = next;
    }
    let dip = at_event - lowest;
    assert!(dip > 0.0 && dip < 0.5, "dip {dip}");
}

#[test]
fn switch_instants_sit_on_deadband_edges() {
    let p = HouseParams::default();
    let ambient = AmbientInput::constant(25.0);
    let s = state_at_switch_off(&p, 375.0, &ambient);
    let th = thermostat_temperature(&s, &p);
    assert!(th <= p.t_minus() && th >= p.t_minus() - 1e-3, "{th}");
}

#[test]
fn heat_flows_balance_over_steady_cycles() {
    let mut f = fleet(4, 250.0, Heterogeneity::default());
    run(&mut f, 3600);
    let before: Vec<(f64, f64)> = f
        .houses()
        .iter()
        .map(|h| {
            let e = h.state.energy;
            (h.state.stored_energy(&h.params), e.injected_j + e.wall_gain_j + e.condenser_gain_j + e.compressor_j)
        })
        .collect();
    run(&mut f, 3600);
    for (h, (stored0, ledger0)) in f.houses().iter().zip(before) {
        let e = h.state.energy;
        let ledger = e.injected_j + e.wall_gain_j + e.condenser_gain_j + e.compressor_j;
        let residual = (h.state.stored_energy(&h.params) - stored0) - (ledger - ledger0);
        let throughput = e.injected_j.abs() + e.compressor_j.abs();
        assert!(residual.abs() < 1e-6 * throughput, "house {}: residual {residual} J", h.id);
    }
}

#[test]
fn on_power_keeps_rising_through_each_interval() {
    let mut f = fleet(3, 250.0, Heterogeneity::default());
    let mut trace: Vec<Vec<f64>> = vec![Vec::new(); 3];
    for _ in 0..4 * 3600 {
        f.advance(1.0).unwrap();
        for (i, h) in f.houses().iter().enumerate() {
            trace[i].push(h.compressor_w());
        }
    }
    let mut checked = 0;
    for h in f.houses() {
        for c in cycles(f.log(), h.id).iter().skip(3) {
            // samples k hold the state at t = k + 1
            let at = |t: f64| trace[h.id as usize][t.floor() as usize - 1];
            let early = at(c.on_at.ceil() + 30.0);
            let late = at(c.next_off_at.floor() - 1.0);
            assert!(late > early, "house {}: {early} W at +30 s, {late} W before off", h.id);
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn evaporator_stays_below_room_air_while_cooling() {
    let mut f = fleet(3, 250.0, Heterogeneity::default());
    run(&mut f, 3600);
    for _ in 0..3600 {
        f.advance(1.0).unwrap();
        for h in f.houses() {
            if h.state.mode == Mode::On && h.state.time_in_mode > 30.0 {
                assert!(h.state.t_1 <= h.state.t_a);
            }
        }
    }
}

#[test]
fn overloaded_house_never_switches_off() {
    let mut f = fleet(1, 2500.0, Heterogeneity::none());
    run(&mut f, 4 * 3600);
    let events = f.log().events();
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].mode, Mode::On);
}

#[test]
fn house_without_cooling_demand_never_starts() {
    let spec = FleetSpec {
        // the walls leak more than the 125 W fixed load injects
        ambient: AmbientInput::constant(-10.0),
        ..FleetSpec::homogeneous(2, HouseParams::default(), HeatSchedule::constant(0.0))
    };
    let mut f = build_fleet(&spec).unwrap();
    run(&mut f, 4 * 3600);
    assert!(f.log().is_empty());
}

#[test]
fn identical_houses_follow_identical_trajectories() {
    let mut f = fleet(20, 250.0, Heterogeneity::none());
    run(&mut f, 3600);
    let first = &f.houses()[0].state;
    assert!(f.houses().iter().all(|h| &h.state == first));
    let times: Vec<f64> = f.log().for_house(0).map(|e| e.time).collect();
    for id in 1..20 {
        assert_eq!(f.log().for_house(id).map(|e| e.time).collect::<Vec<_>>(), times);
    }
}

#[test]
fn permuting_houses_changes_no_trajectory() {
    let mut a = fleet(8, 250.0, Heterogeneity::default());
    let mut b = a.clone();
    b.permute(&[5, 2, 7, 0, 1, 6, 3, 4]);
    run(&mut a, 2400);
    run(&mut b, 2400);
    assert_eq!(a.log(), b.log());
    for h in a.houses() {
        assert_eq!(&h.state, &b.house(h.id).unwrap().state);
    }
}

#[test]
fn duty_cycle_grows_with_heat() {
    let duty = |q: f64| {
        let mut f = fleet(1, q, Heterogeneity::none());
        run(&mut f, 6 * 3600);
        tcl_testbed::analysis::duty_cycle(f.log(), 0, 3).unwrap().percent
    };
    let d: Vec<f64> = [100.0, 250.0, 400.0, 550.0].into_iter().map(duty).collect();
    assert!(d.windows(2).all(|w| w[1] > w[0]), "{d:?}");
}

#[test]
fn running_power_rises_with_ambient() {
    let p = HouseParams::default();
    let power = |t_amb: f64| compressor_operating_point(Mode::On, 12.0, t_amb + 15.0, &p).unwrap().1;
    assert!(power(30.0) > power(25.0));
    let mean_on = |t_amb: f64| {
        let spec = FleetSpec {
            ambient: AmbientInput::constant(t_amb),
            ..FleetSpec::homogeneous(1, HouseParams::default(), HeatSchedule::constant(250.0))
        };
        let mut f = build_fleet(&spec).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for _ in 0..4 * 3600 {
            f.advance(1.0).unwrap();
            let h = &f.houses()[0];
            if h.state.clock > 3600.0 && h.state.mode == Mode::On {
                sum += h.compressor_w();
                n += 1;
            }
        }
        sum / n as f64
    };
    let m: Vec<f64> = [20.0, 24.0, 28.0, 32.0].into_iter().map(mean_on).collect();
    assert!(m.windows(2).all(|w| w[1] > w[0]), "{m:?}");
}
