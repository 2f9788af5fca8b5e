#![no_main]
use libfuzzer_sys::fuzz_target;
use qprobe::quant::QuantConfig;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = serde_json::from_str::<QuantConfig>(data) {
        let _ = cfg.validate();
    }
});
