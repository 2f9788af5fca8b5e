#![no_main]
use libfuzzer_sys::fuzz_target;
use qprobe::trainer::TrainConfig;

fuzz_target!(|data: &str| {
    let _ = TrainConfig::from_json(data);
});
