#![no_main]

use libfuzzer_sys::fuzz_target;
use recalign::trainer::SweepSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = SweepSpec::from_json(text) {
        spec.validate().expect("parsed sweeps are valid");
    }
});
