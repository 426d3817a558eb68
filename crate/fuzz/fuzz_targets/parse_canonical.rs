#![no_main]
use cegcl::graph_io::{parse_canonical, to_canonical, CanonicalFiles};
use libfuzzer_sys::fuzz_target;

// Input is `<meta.json>\0<features.tsv>\0<edges.tsv>[\0<labels.tsv>]`.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut parts = text.split('\0');
    let files = CanonicalFiles {
        meta: parts.next().unwrap_or_default().to_string(),
        features: parts.next().unwrap_or_default().to_string(),
        edges: parts.next().unwrap_or_default().to_string(),
        labels: parts.next().map(str::to_string),
    };
    if let Ok(bundle) = parse_canonical(&files) {
        assert_eq!(parse_canonical(&to_canonical(&bundle)).unwrap(), bundle);
    }
});
