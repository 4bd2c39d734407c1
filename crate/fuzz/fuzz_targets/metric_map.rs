#![no_main]
use bevnav_core::codec::{decode_metric_map, encode_metric_map};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = decode_metric_map(data) {
        let again = decode_metric_map(&encode_metric_map(&map)).expect("re-encoded map decodes");
        assert_eq!(again, map);
    }
});
