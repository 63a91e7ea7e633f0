#![no_main]

use kmr::harness::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = checkpoint::from_json(text) {
        // anything accepted must survive a round trip unchanged
        let again = checkpoint::to_json(&model).expect("encode");
        assert_eq!(checkpoint::from_json(&again).expect("reload"), model);
    }
});
