#![no_main]

use libfuzzer_sys::fuzz_target;
use recalign::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_json(text) {
        cfg.validate().expect("parsed configs are valid");
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).expect("round trip"), cfg);
    }
});
