#![no_main]
use libfuzzer_sys::fuzz_target;
use qprobe::report::{decomposition_csv, parse_decomposition_csv};

fuzz_target!(|data: &str| {
    if let Ok(rows) = parse_decomposition_csv(data) {
        let text = decomposition_csv(&rows).expect("write");
        assert_eq!(parse_decomposition_csv(&text).expect("reparse"), rows);
    }
});
