#![no_main]

use libfuzzer_sys::fuzz_target;
use recalign::frontier::parse_gamma_grid;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(grid) = parse_gamma_grid(text) {
        assert!(!grid.is_empty());
        assert!(grid.iter().all(|g| g.is_finite() && *g >= 0.0));
        assert!(grid.windows(2).all(|w| w[0] <= w[1]));
    }
});
