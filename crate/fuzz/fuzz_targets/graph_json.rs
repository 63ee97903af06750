#![no_main]

use asr_core::StructuralGraph;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(value) = StructuralGraph::from_json(text) {
        let again = StructuralGraph::from_json(&value.to_json()).expect("serialized value parses");
        assert_eq!(again, value);
    }
});
