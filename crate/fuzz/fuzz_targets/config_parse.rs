#![no_main]

use hetdp_core::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        let again = cfg.to_toml().expect("valid configs serialize");
        assert_eq!(ExperimentConfig::from_toml(&again).expect("round trip"), cfg);
    }
});
