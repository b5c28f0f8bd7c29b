#![no_main]

use libfuzzer_sys::fuzz_target;
use sketchfill::config::TrainConfig;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = TrainConfig::from_toml(text) {
        if cfg.validate().is_ok() {
            let again = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(again, cfg);
        }
    }
});
