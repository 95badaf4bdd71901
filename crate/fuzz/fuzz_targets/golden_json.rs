#![no_main]

use libfuzzer_sys::fuzz_target;
use recalign::repmap::GoldenRisks;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = GoldenRisks::from_json(text) {
        for (s, u) in [g.example1, g.example2] {
            assert!((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&u));
        }
    }
});
