#![no_main]

use libfuzzer_sys::fuzz_target;
use tcl_testbed::analysis::read_switch_log_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_switch_log_csv(data);
});
