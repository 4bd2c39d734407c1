#![no_main]
use bevnav_model::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((config, model)) = decode(data) {
        let bytes = encode(&config, &model);
        let (config2, _) = decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(config2, config);
        assert_eq!(encode(&config2, &model), bytes);
    }
});
