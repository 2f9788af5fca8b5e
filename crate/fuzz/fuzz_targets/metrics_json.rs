#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = qprobe::report::parse_metrics_json(data);
});
