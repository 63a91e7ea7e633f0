#![no_main]

use kmr::harness::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        let _ = cfg.validate();
        let again = cfg.to_json().expect("encode");
        ExperimentConfig::from_json(&again).expect("reparse");
    }
});
