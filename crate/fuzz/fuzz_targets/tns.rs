#![no_main]

use libfuzzer_sys::fuzz_target;
use sbss::formats::{decode_tns, encode_tns, probmap_from_tensor};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_tns(data) {
        // The decoder is strict, so anything it accepts re-encodes to the same bytes.
        assert_eq!(encode_tns(&t), data);
        if let Ok(m) = probmap_from_tensor(t) {
            assert!(m.validate().is_ok());
        }
    }
});
