#![no_main]

use std::path::Path;

use ivr_core::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // An absolute anchor makes path resolution idempotent.
    let root = Path::new("/");
    if let Ok(cfg) = ExperimentConfig::from_json(text, root) {
        let back = ExperimentConfig::from_json(&cfg.to_json().to_string(), root)
            .expect("effective config reloads");
        assert_eq!(back, cfg);
    }
});
