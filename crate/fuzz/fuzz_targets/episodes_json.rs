#![no_main]
use bevnav_core::env::EpisodeSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(set) = EpisodeSet::from_json(text, None) {
        let again = EpisodeSet::from_json(&set.to_json(), None).expect("serialized episodes parse");
        assert_eq!(again, set);
    }
});
