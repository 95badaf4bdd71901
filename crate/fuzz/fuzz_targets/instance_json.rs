#![no_main]

use libfuzzer_sys::fuzz_target;
use recalign::instance::Instance;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(inst) = Instance::from_json(text) {
        let again = Instance::from_json(&inst.to_json()).expect("serialized instance reparses");
        assert_eq!(inst, again);
    }
});
