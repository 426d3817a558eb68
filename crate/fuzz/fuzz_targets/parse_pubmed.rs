#![no_main]
use cegcl::graph_io::parse_pubmed;
use libfuzzer_sys::fuzz_target;

// Input is `<NODE.paper.tab>\0<DIRECTED.cites.tab>`.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (nodes, cites) = text.split_once('\0').unwrap_or((text, ""));
    if let Ok(graph) = parse_pubmed(nodes, cites) {
        assert_eq!(graph.tokens.len(), graph.bundle.num_features());
    }
});
