#![no_main]
use libfuzzer_sys::fuzz_target;
use qprobe::optim::OptimizerConfig;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = serde_json::from_str::<OptimizerConfig>(data) {
        let _ = cfg.validate();
    }
});
