#![no_main]
use bevnav_core::topo_map::TopoMapDoc;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(doc) = TopoMapDoc::from_json(text) {
        let again = TopoMapDoc::from_json(&doc.to_json()).expect("serialized map parses");
        assert_eq!(again, doc);
    }
});
