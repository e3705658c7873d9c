#![no_main]

use libfuzzer_sys::fuzz_target;
use tcl_testbed::telemetry::read_inrush_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_inrush_csv(data);
});
