#![no_main]

use asr_core::graph::{format_index_set, parse_index_set};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&d_s, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let d_s = usize::from(d_s);
    if let Ok(set) = parse_index_set(text, d_s) {
        assert!(set.iter().all(|&i| i < d_s));
        assert_eq!(parse_index_set(&format_index_set(&set), d_s).expect("formatted sets parse"), set);
    }
});
