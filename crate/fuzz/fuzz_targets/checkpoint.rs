#![no_main]

use libfuzzer_sys::fuzz_target;
use texrect_core::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // a successful decode consumed every byte, so re-encoding is lossless
        assert_eq!(ck.encode(), data);
    }
});
