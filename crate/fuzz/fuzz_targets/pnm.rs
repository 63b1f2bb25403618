#![no_main]

use libfuzzer_sys::fuzz_target;
use sbss::formats::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_ppm(data) {
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }
    if let Ok(labels) = decode_pgm(data) {
        assert_eq!(decode_pgm(&encode_pgm(&labels)).unwrap(), labels);
    }
});
