#![no_main]
use cegcl::graph_io::{parse_canonical, parse_linqs, to_canonical};
use libfuzzer_sys::fuzz_target;

// Input is `<content>\0<cites>`.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (content, cites) = text.split_once('\0').unwrap_or((text, ""));
    if let Ok((bundle, report)) = parse_linqs(content, cites) {
        assert_eq!(report.nodes, bundle.num_nodes());
        assert_eq!(parse_canonical(&to_canonical(&bundle)).unwrap(), bundle);
    }
});
