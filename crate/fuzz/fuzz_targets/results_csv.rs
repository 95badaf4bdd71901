#![no_main]

use libfuzzer_sys::fuzz_target;
use recalign::trainer::{parse_results_csv, summarize, write_results_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_results_csv(text) {
        let again = parse_results_csv(&write_results_csv(&rows, true)).expect("written CSV reparses");
        assert_eq!(rows, again);
        let _ = summarize(&rows);
    }
});
