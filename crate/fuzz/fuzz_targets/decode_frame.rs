#![no_main]

use libfuzzer_sys::fuzz_target;
use tcl_testbed::protocol::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(msg) = decode(data) {
        // anything accepted must survive a round trip unchanged
        let bytes = encode(&msg).expect("decoded frame re-encodes");
        assert_eq!(decode(&bytes).expect("re-encoded frame decodes"), msg);
    }
});
