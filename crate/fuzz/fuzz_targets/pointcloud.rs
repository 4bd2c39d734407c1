#![no_main]
use bevnav_core::codec::{decode_pointcloud, encode_pointcloud};
use libfuzzer_sys::fuzz_target;

// The encoding is canonical, so anything accepted must re-encode to itself.
fuzz_target!(|data: &[u8]| {
    if let Ok(pc) = decode_pointcloud(data) {
        assert_eq!(encode_pointcloud(&pc), data);
    }
});
