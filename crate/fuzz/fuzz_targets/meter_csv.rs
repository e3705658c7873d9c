#![no_main]

use libfuzzer_sys::fuzz_target;
use tcl_testbed::telemetry::read_meter_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_meter_csv(data);
});
