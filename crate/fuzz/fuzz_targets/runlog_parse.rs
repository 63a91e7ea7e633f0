#![no_main]

use kmr::harness::report::report_rows;
use kmr::harness::runlog::{parse_run_log, without_timing};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(log) = parse_run_log(text) {
        assert_eq!(report_rows(&log).len(), log.steps.len() + 1);
        without_timing(text).expect("parsed log is valid JSON per line");
    }
});
