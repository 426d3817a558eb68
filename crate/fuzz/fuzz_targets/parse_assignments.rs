#![no_main]
use cegcl::eval::{format_assignments, parse_assignments};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let ids: Vec<String> = ["a", "b", "c", "31", "paper 7"].iter().map(|s| s.to_string()).collect();
    if let Ok(labels) = parse_assignments(text, &ids) {
        assert_eq!(labels.len(), ids.len());
        assert_eq!(parse_assignments(&format_assignments(&ids, &labels), &ids).unwrap(), labels);
    }
});
