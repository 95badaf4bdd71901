#![no_main]

use libfuzzer_sys::fuzz_target;
use recalign::nn::ParamSet;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ps) = ParamSet::from_checkpoint_json(text) {
        let again = ParamSet::from_checkpoint_json(&ps.to_checkpoint_json()).expect("round trip");
        assert_eq!(ps, again);
    }
});
