#![no_main]

use libfuzzer_sys::fuzz_target;
use sbss_cli::spec::RunSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = RunSpec::from_json(text) {
        let again = RunSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(again, spec);
        assert!(spec.schedule().is_ok());
    }
});
