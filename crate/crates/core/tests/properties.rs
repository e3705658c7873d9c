use proptest::prelude::*;

use tcl_testbed::analysis::{read_switch_log_csv, write_switch_log_csv};
use tcl_testbed::config::ExperimentConfig;
use tcl_testbed::etp::{cooling_power, HouseParams, Mode};
use tcl_testbed::fleet::{build_fleet, Cause, FleetSpec, Heterogeneity, SwitchEvent, SwitchLog};
use tcl_testbed::protocol::{decode, encode, ControlMessage, ErrorCode, HouseReport, RequestEntry, VerdictEntry};
use tcl_testbed::schedule::HeatSchedule;
use tcl_testbed::switching::{thermostat_decision, Reason, SwitchRequest};
use tcl_testbed::telemetry::{read_meter_csv, MeterConfig, MeterCsvWriter};

fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::On), Just(Mode::Off)]
}

fn reason() -> impl Strategy<Value = Reason> {
    prop_oneof![
        Just(Reason::Applied),
        Just(Reason::LockoutActive),
        Just(Reason::ThermostatOverride),
        Just(Reason::NoChange)
    ]
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e9..1e9f64, Just(0.0), Just(f64::MAX), Just(f64::MIN_POSITIVE)]
}

fn report() -> impl Strategy<Value = HouseReport> {
    (any::<u32>(), finite(), finite(), finite(), mode(), finite(), finite(), finite()).prop_map(
        |(house_id, t_therm, t_a, t_w, mode, time_in_mode, time_since_off, real_power)| HouseReport {
            house_id,
            t_therm,
            t_a,
            t_w,
            mode,
            time_in_mode,
            time_since_off,
            real_power,
        },
    )
}

fn message() -> impl Strategy<Value = ControlMessage> {
    let code = prop_oneof![
        Just(ErrorCode::Malformed),
        Just(ErrorCode::Ordering),
        Just(ErrorCode::UnknownHouse),
        Just(ErrorCode::VersionMismatch),
        Just(ErrorCode::Busy),
        Just(ErrorCode::UnexpectedFrame)
    ];
    prop_oneof![
        (".*", any::<u32>(), finite()).prop_map(|(protocol, n_houses, latch_dt)| ControlMessage::Hello {
            protocol,
            n_houses,
            latch_dt
        }),
        (any::<u64>(), finite(), prop::collection::vec(report(), 0..5), finite()).prop_map(
            |(step, time, houses, aggregate_power)| ControlMessage::StateReport {
                step,
                time,
                houses,
                aggregate_power
            }
        ),
        (any::<u64>(), prop::collection::vec((any::<u32>(), mode()), 0..8)).prop_map(|(step, r)| {
            ControlMessage::SwitchRequests {
                step,
                requests: r
                    .into_iter()
                    .map(|(house_id, desired_mode)| RequestEntry { house_id, desired_mode })
                    .collect(),
            }
        }),
        (any::<u64>(), prop::collection::vec((any::<u32>(), any::<bool>(), reason()), 0..8)).prop_map(|(step, v)| {
            ControlMessage::Verdicts {
                step,
                verdicts: v
                    .into_iter()
                    .map(|(house_id, accepted, reason)| VerdictEntry { house_id, accepted, reason })
                    .collect(),
            }
        }),
        any::<u64>().prop_map(|step| ControlMessage::StepAck { step }),
        (code, ".*").prop_map(|(code, message)| ControlMessage::Error { code, message }),
    ]
}

proptest! {
    #[test]
    fn frames_round_trip(msg in message()) {
        let bytes = encode(&msg).unwrap();
        prop_assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
        prop_assert_eq!(bytes.last(), Some(&b'\n'));
        prop_assert_eq!(decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn cooling_law_is_increasing(l_over_r in 1000.0..5000.0f64, k in 0usize..500) {
        let p = HouseParams { l_over_r, a_comp: 1e6, ..HouseParams::default() };
        let t = 270.0 + k as f64 * 0.1;
        prop_assert!(cooling_power(t + 0.1, &p).unwrap() > cooling_power(t, &p).unwrap());
    }

    #[test]
    fn thermostat_holds_inside_deadband(frac in 0.001..0.999f64, m in mode()) {
        let p = HouseParams::default();
        let t = p.t_minus() + frac * p.deadband_width;
        let once = thermostat_decision(t, m, &p);
        prop_assert_eq!(once, m);
        prop_assert_eq!(thermostat_decision(t, once, &p), once);
    }

    #[test]
    fn switch_log_csv_round_trips(raw in prop::collection::vec((0.0..1e6f64, 0u32..50, mode(), any::<bool>()), 0..40)) {
        let log = SwitchLog::from_events(raw.into_iter().map(|(time, house_id, mode, ext)| SwitchEvent {
            time,
            house_id,
            mode,
            cause: if ext { Cause::External } else { Cause::Thermostat },
        }).collect());
        let mut buf = Vec::new();
        write_switch_log_csv(&mut buf, &log).unwrap();
        prop_assert_eq!(read_switch_log_csv(buf.as_slice()).unwrap(), log);
    }

    #[test]
    fn meter_csv_round_trips(rows in prop::collection::vec((0.0..1e6f64, 0u32..50, 0.0..5e3f64), 0..40)) {
        let meter = MeterConfig::default();
        let samples: Vec<_> = rows.into_iter().map(|(t, h, w)| meter.reading(t, h, w)).collect();
        let mut w = MeterCsvWriter::new(Vec::new()).unwrap();
        w.write(&samples).unwrap();
        let buf = w.finish().unwrap();
        prop_assert_eq!(read_meter_csv(buf.as_slice()).unwrap(), samples);
    }

    #[test]
    fn config_survives_serialization(n in 1usize..50, seed in any::<u64>(), q in 0.0..900.0f64, lockout in 0.0..300.0f64) {
        let mut cfg = ExperimentConfig::default();
        cfg.fleet.n_houses = n;
        cfg.fleet.rng_seed = seed;
        cfg.fleet.schedules = vec![HeatSchedule::constant(q)];
        cfg.fleet.base_params.lockout = lockout;
        prop_assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn no_request_sequence_shortens_lockout(
        seed in any::<u64>(),
        script in prop::collection::vec(prop::collection::vec((0u32..4, mode()), 0..6), 200..400),
    ) {
        let spec = FleetSpec {
            rng_seed: seed,
            heterogeneity: Heterogeneity::default(),
            ..FleetSpec::homogeneous(4, HouseParams::default(), HeatSchedule::constant(300.0))
        };
        let mut fleet = build_fleet(&spec).unwrap();
        for step in script {
            let requests: Vec<SwitchRequest> = step
                .into_iter()
                .map(|(house_id, desired_mode)| SwitchRequest { house_id, desired_mode, request_time: fleet.time() })
                .collect();
            fleet.apply_requests(&requests).unwrap();
            fleet.advance(1.0).unwrap();
        }
        let lockout = spec.base_params.lockout;
        for id in 0..4 {
            let events: Vec<&SwitchEvent> = fleet.log().for_house(id).collect();
            for w in events.windows(2) {
                prop_assert_ne!(w[0].mode, w[1].mode);
                prop_assert!(w[1].time >= w[0].time);
                if w[0].mode == Mode::Off {
                    prop_assert!(w[1].time - w[0].time >= lockout - 1e-9);
                }
            }
        }
    }
}
