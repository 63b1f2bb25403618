#![no_main]

use libfuzzer_sys::fuzz_target;
use sbss::formats::{decode_ecw, encode_ecw};

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = decode_ecw(data) {
        assert!(w.is_finite());
        assert_eq!(encode_ecw(&w), data);
    }
});
