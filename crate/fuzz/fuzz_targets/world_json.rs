#![no_main]
use bevnav_core::env::World;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(world) = World::from_json(text) {
        let again = World::from_json(&world.to_json()).expect("serialized world parses");
        assert_eq!(again, world);
    }
});
