#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = qprobe::scaling::parse_points_csv(data);
});
