#![no_main]

use libfuzzer_sys::fuzz_target;
use texrect_core::dataset::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::parse(text) {
        let text = m.to_text();
        let back = Manifest::parse(&text).expect("written manifest parses");
        assert_eq!(back.to_text(), text);
    }
});
