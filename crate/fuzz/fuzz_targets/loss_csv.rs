#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = qprobe::trainer::parse_loss_csv(data);
});
