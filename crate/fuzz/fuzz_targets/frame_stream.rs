#![no_main]

use libfuzzer_sys::fuzz_target;
use tcl_testbed::protocol::FrameReader;

fuzz_target!(|data: &[u8]| {
    let mut reader = FrameReader::new(data);
    let mut last = 0;
    for _ in 0..=data.len() {
        match reader.next_frame() {
            None => break,
            Some(_) => {
                assert!(reader.offset() >= last);
                last = reader.offset();
            }
        }
    }
    assert!(reader.offset() <= data.len() as u64);
});
