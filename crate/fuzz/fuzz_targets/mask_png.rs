#![no_main]

use libfuzzer_sys::fuzz_target;
use texrect_core::mask::Mask;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Mask::decode_png(data) {
        assert!(m.data().iter().all(|&v| v <= 1));
        assert_eq!(m.data().len(), m.height() * m.width());
    }
});
