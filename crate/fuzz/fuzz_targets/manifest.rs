#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use sbss::backend::{FileBackend, ManifestRecord};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = serde_json::from_slice::<Vec<ManifestRecord>>(data) {
        let n = records.len();
        if let Ok(b) = FileBackend::from_records(records, Path::new("/nonexistent")) {
            assert_eq!(b.len(), n);
        }
    }
});
