#![no_main]
use bevnav_model::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(config) = Config::from_toml(text) {
        let again = Config::from_toml(&config.to_toml()).expect("serialized config parses");
        assert_eq!(again, config);
    }
});
