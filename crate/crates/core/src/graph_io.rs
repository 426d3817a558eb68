//! Graph ingestion and the GCN propagation operator.
//!
//! Three on-disk formats are supported:
//!
//! * LINQS citation data: a `.content` file with one
//!   `<id>\t<feat_1>…<feat_k>\t<class_name>` line per node and a `.cites`
//!   file with `<cited_id>\t<citing_id>` lines.
//! * The PubMed-Diabetes tab format (`.NODE.paper.tab` and
//!   `.DIRECTED.cites.tab`) with sparse `token=value` features.
//! * A canonical bundle directory holding `features.tsv`, `edges.tsv`, an
//!   optional `labels.tsv` and `meta.json`.
//!
//! Citation direction is discarded: every graph is stored as a set of
//! undirected index pairs `(i, j)` with `i < j`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// An attributed graph with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBundle {
    node_ids: Vec<String>,
    features: Array2<f64>,
    edges: Vec<(usize, usize)>,
    labels: Option<Vec<usize>>,
    num_communities: usize,
}

/// Counters collected while loading raw citation files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub nodes: usize,
    /// Edge lines read from the citation file, before any filtering.
    pub raw_edge_lines: usize,
    /// Citations naming an id that is absent from the node file.
    pub dropped_unknown: usize,
    pub duplicate_edges: usize,
    pub self_loops: usize,
    pub isolated_nodes: usize,
}

impl GraphBundle {
    /// Validates and assembles a bundle. Edges must already be canonical:
    /// `i < j`, in range, without duplicates.
    pub fn new(
        node_ids: Vec<String>,
        features: Array2<f64>,
        edges: Vec<(usize, usize)>,
        labels: Option<Vec<usize>>,
        num_communities: usize,
    ) -> Result<Self> {
        let n = node_ids.len();
        if features.nrows() != n {
            return Err(Error::InvalidBundle(format!(
                "feature matrix has {} rows for {n} nodes",
                features.nrows()
            )));
        }
        if num_communities == 0 {
            return Err(Error::InvalidBundle("community count must be positive".into()));
        }
        if let Some(bad) = node_ids.iter().find(|id| id.is_empty() || id.contains(['\t', '\n', '\r'])) {
            return Err(Error::InvalidBundle(format!("node id {bad:?} is empty or contains a tab or line break")));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(Error::InvalidBundle(format!("edge ({a}, {b}) out of range for {n} nodes")));
            }
            if a == b {
                return Err(Error::InvalidBundle(format!("self-loop on node {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidBundle(format!("duplicate edge ({a}, {b})")));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::InvalidBundle(format!("{} labels for {n} nodes", labels.len())));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= num_communities) {
                return Err(Error::InvalidBundle(format!("label {bad} outside [0, {num_communities})")));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBundle("non-finite feature value".into()));
        }
        Ok(GraphBundle {
            node_ids,
            features,
            edges: seen.into_iter().collect(),
            labels,
            num_communities,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_communities(&self) -> usize {
        self.num_communities
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn isolated_nodes(&self) -> usize {
        let mut touched = vec![false; self.num_nodes()];
        for &(a, b) in &self.edges {
            touched[a] = true;
            touched[b] = true;
        }
        touched.iter().filter(|t| !**t).count()
    }

    /// Subgraph induced by `keep` (indices into this bundle, any order).
    /// Node order follows `keep`; the community count is unchanged.
    pub fn induced_subgraph(&self, keep: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.num_nodes()];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.num_nodes() || remap[old] != usize::MAX {
                return Err(Error::InvalidArgument(format!("bad or repeated node index {old}")));
            }
            remap[old] = new;
        }
        let node_ids = keep.iter().map(|&i| self.node_ids[i].clone()).collect();
        let features = self.features.select(ndarray::Axis(0), keep);
        let edges = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                let (x, y) = (remap[a], remap[b]);
                (x != usize::MAX && y != usize::MAX).then_some((x.min(y), x.max(y)))
            })
            .collect();
        let labels = self.labels.as_ref().map(|l| keep.iter().map(|&i| l[i]).collect());
        GraphBundle::new(node_ids, features, edges, labels, self.num_communities)
    }

    /// Induced subgraph on `count` nodes drawn uniformly without
    /// replacement, kept in their original order.
    pub fn sample_nodes(&self, count: usize, seed: u64) -> Result<Self> {
        if count > self.num_nodes() {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {count} of {} nodes",
                self.num_nodes()
            )));
        }
        let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Synthetic, 3, 0);
        let mut keep = rand::seq::index::sample(&mut rng, self.num_nodes(), count).into_vec();
        keep.sort_unstable();
        self.induced_subgraph(&keep)
    }
}

fn check_unique_ids(ids: &[String], path: &str) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(Error::parse(path, i + 1, format!("duplicate node id {id:?}")));
        }
    }
    Ok(index)
}

/// Collects undirected edges, counting drops, self-loops and duplicates.
struct EdgeCollector<'a> {
    index: &'a HashMap<String, usize>,
    set: BTreeSet<(usize, usize)>,
    report: LoadReport,
}

impl<'a> EdgeCollector<'a> {
    fn new(index: &'a HashMap<String, usize>) -> Self {
        EdgeCollector {
            index,
            set: BTreeSet::new(),
            report: LoadReport::default(),
        }
    }

    fn push(&mut self, a: &str, b: &str) {
        self.report.raw_edge_lines += 1;
        let (Some(&i), Some(&j)) = (self.index.get(a), self.index.get(b)) else {
            self.report.dropped_unknown += 1;
            return;
        };
        if i == j {
            self.report.self_loops += 1;
        } else if !self.set.insert((i.min(j), i.max(j))) {
            self.report.duplicate_edges += 1;
        }
    }

    fn finish(self) -> (Vec<(usize, usize)>, LoadReport) {
        if self.report.dropped_unknown > 0 {
            log::warn!(
                "dropped {} citation(s) referencing unknown node ids",
                self.report.dropped_unknown
            );
        }
        (self.set.into_iter().collect(), self.report)
    }
}

/// Parses LINQS `.content` and `.cites` text.
pub fn parse_linqs(content: &str, cites: &str) -> Result<(GraphBundle, LoadReport)> {
    const CONTENT: &str = "content";
    const CITES: &str = "cites";
    let mut ids = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut class_of: Vec<usize> = Vec::new();
    let mut classes: HashMap<String, usize> = HashMap::new();
    let mut width: Option<usize> = None;

    for (lineno, line) in content.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(Error::parse(CONTENT, lineno, format!("expected id, features and class, got {} field(s)", fields.len())));
        }
        let k = fields.len() - 2;
        match width {
            None => width = Some(k),
            Some(w) if w != k => {
                return Err(Error::parse(CONTENT, lineno, format!("expected {} fields, got {}", w + 2, fields.len())));
            }
            _ => {}
        }
        ids.push(fields[0].to_string());
        for f in &fields[1..fields.len() - 1] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::parse(CONTENT, lineno, format!("feature {f:?} is not a number")))?;
            if !v.is_finite() {
                return Err(Error::parse(CONTENT, lineno, format!("feature {f:?} is not finite")));
            }
            rows.push(v);
        }
        let class = fields[fields.len() - 1].trim();
        let next = classes.len();
        class_of.push(*classes.entry(class.to_string()).or_insert(next));
    }
    let Some(k) = width else {
        return Err(Error::InvalidBundle("content file has no nodes".into()));
    };
    let index = check_unique_ids(&ids, CONTENT)?;

    let mut collector = EdgeCollector::new(&index);
    for (lineno, line) in cites.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::parse(CITES, lineno, format!("expected 2 fields, got {}", fields.len())));
        }
        collector.push(fields[0].trim(), fields[1].trim());
    }
    let (edges, mut report) = collector.finish();

    let n = ids.len();
    let features = Array2::from_shape_vec((n, k), rows).expect("row-major feature buffer");
    let bundle = GraphBundle::new(ids, features, edges, Some(class_of), classes.len())?;
    report.nodes = n;
    report.isolated_nodes = bundle.isolated_nodes();
    Ok((bundle, report))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_linqs_bundle(content_path: &Path, cites_path: &Path) -> Result<(GraphBundle, LoadReport)> {
    parse_linqs(&read_text(content_path)?, &read_text(cites_path)?)
}

/// A PubMed-format graph with its feature vocabulary.
#[derive(Debug, Clone)]
pub struct PubmedGraph {
    pub bundle: GraphBundle,
    pub report: LoadReport,
    /// Column `c` of the feature matrix holds token `tokens[c]`.
    pub tokens: Vec<String>,
}

/// Parses PubMed-Diabetes `NODE.paper.tab` and `DIRECTED.cites.tab` text.
///
/// Feature columns follow the first appearance of each token, which for the
/// distributed file is the order of the declaration line.
pub fn parse_pubmed(nodes: &str, cites: &str) -> Result<PubmedGraph> {
    const NODES: &str = "NODE.paper.tab";
    const CITES: &str = "DIRECTED.cites.tab";
    let mut tokens: Vec<String> = Vec::new();
    let mut column: HashMap<String, usize> = HashMap::new();
    let mut ids: Vec<String> = Vec::new();
    let mut seen_ids: HashMap<String, usize> = HashMap::new();
    let mut sparse_rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut label_raw: Vec<usize> = Vec::new();
    let mut label_index: HashMap<String, usize> = HashMap::new();

    let mut column_for = |tok: &str, tokens: &mut Vec<String>| -> usize {
        if let Some(&c) = column.get(tok) {
            return c;
        }
        let c = tokens.len();
        tokens.push(tok.to_string());
        column.insert(tok.to_string(), c);
        c
    };

    for (lineno, line) in nodes.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let first = fields[0].trim();
        if first == "NODE" {
            continue;
        }
        if first.starts_with("cat=") || first.starts_with("numeric:") {
            for f in &fields {
                // numeric:<token>:<default>
                if let Some(rest) = f.trim().strip_prefix("numeric:") {
                    let tok = rest.rsplit_once(':').map_or(rest, |(t, _)| t);
                    column_for(tok, &mut tokens);
                }
            }
            continue;
        }
        if seen_ids.insert(first.to_string(), ids.len()).is_some() {
            return Err(Error::parse(NODES, lineno, format!("duplicate node id {first:?}")));
        }
        ids.push(first.to_string());
        let mut row = Vec::new();
        let mut label = None;
        for f in fields.iter().skip(1).map(|f| f.trim()) {
            if f.is_empty() || f.starts_with("summary=") {
                continue;
            }
            let Some((key, value)) = f.split_once('=') else {
                return Err(Error::parse(NODES, lineno, format!("field {f:?} is not key=value")));
            };
            if key == "label" {
                let next = label_index.len();
                label = Some(*label_index.entry(value.to_string()).or_insert(next));
                continue;
            }
            let v: f64 = value
                .parse()
                .map_err(|_| Error::parse(NODES, lineno, format!("value {value:?} for {key:?} is not a real number")))?;
            if !v.is_finite() {
                return Err(Error::parse(NODES, lineno, format!("value {value:?} for {key:?} is not finite")));
            }
            row.push((column_for(key, &mut tokens), v));
        }
        let Some(label) = label else {
            return Err(Error::parse(NODES, lineno, "missing label= field"));
        };
        label_raw.push(label);
        sparse_rows.push(row);
    }
    if ids.is_empty() {
        return Err(Error::InvalidBundle("node file has no nodes".into()));
    }

    let mut features = Array2::zeros((ids.len(), tokens.len()));
    for (r, row) in sparse_rows.iter().enumerate() {
        for &(c, v) in row {
            features[[r, c]] = v;
        }
    }

    let mut collector = EdgeCollector::new(&seen_ids);
    for (lineno, line) in cites.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("DIRECTED") || trimmed.starts_with("NO_FEATURES") {
            continue;
        }
        let papers: Vec<&str> = line
            .split('\t')
            .filter_map(|f| f.trim().strip_prefix("paper:"))
            .collect();
        if papers.len() != 2 {
            return Err(Error::parse(CITES, lineno, format!("expected 2 paper: fields, got {}", papers.len())));
        }
        collector.push(papers[0], papers[1]);
    }
    let (edges, mut report) = collector.finish();

    let k = label_index.len();
    let n = ids.len();
    let bundle = GraphBundle::new(ids, features, edges, Some(label_raw), k)?;
    report.nodes = n;
    report.isolated_nodes = bundle.isolated_nodes();
    Ok(PubmedGraph { bundle, report, tokens })
}

pub fn load_pubmed_bundle(node_tab_path: &Path, edge_tab_path: &Path) -> Result<PubmedGraph> {
    parse_pubmed(&read_text(node_tab_path)?, &read_text(edge_tab_path)?)
}

/// `meta.json` of the canonical bundle directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub n: usize,
    pub k: usize,
    #[serde(rename = "K")]
    pub num_communities: usize,
}

/// Text of the four canonical files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalFiles {
    pub features: String,
    pub edges: String,
    pub labels: Option<String>,
    pub meta: String,
}

pub fn to_canonical(bundle: &GraphBundle) -> CanonicalFiles {
    let mut features = String::new();
    for (id, row) in bundle.node_ids.iter().zip(bundle.features.rows()) {
        features.push_str(id);
        for v in row {
            // `{}` on f64 prints the shortest representation that round-trips.
            let _ = write!(features, "\t{v}");
        }
        features.push('\n');
    }
    let mut edges = String::new();
    for &(a, b) in &bundle.edges {
        let _ = writeln!(edges, "{a}\t{b}");
    }
    let labels = bundle.labels.as_ref().map(|labels| {
        let mut s = String::new();
        for (id, l) in bundle.node_ids.iter().zip(labels) {
            let _ = writeln!(s, "{id}\t{l}");
        }
        s
    });
    let meta = BundleMeta {
        n: bundle.num_nodes(),
        k: bundle.num_features(),
        num_communities: bundle.num_communities,
    };
    CanonicalFiles {
        features,
        edges,
        labels,
        meta: serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
    }
}

fn parse_index(field: &str, path: &str, lineno: usize) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, lineno, format!("{field:?} is not a non-negative integer")))
}

pub fn parse_canonical(files: &CanonicalFiles) -> Result<GraphBundle> {
    let meta: BundleMeta =
        serde_json::from_str(&files.meta).map_err(|e| Error::parse("meta.json", e.line(), e.to_string()))?;

    let mut ids = Vec::with_capacity(meta.n.min(1 << 20));
    let mut values = Vec::with_capacity(meta.n.saturating_mul(meta.k).min(1 << 24));
    for (lineno, line) in files.features.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != meta.k + 1 {
            return Err(Error::parse("features.tsv", lineno, format!("expected {} fields, got {}", meta.k + 1, fields.len())));
        }
        ids.push(fields[0].to_string());
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse("features.tsv", lineno, format!("{f:?} is not a number")))?;
            values.push(v);
        }
    }
    if ids.len() != meta.n {
        return Err(Error::InvalidBundle(format!("meta.json declares n={} but features.tsv has {} rows", meta.n, ids.len())));
    }
    check_unique_ids(&ids, "features.tsv")?;

    let mut edges = Vec::new();
    for (lineno, line) in files.edges.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::parse("edges.tsv", lineno, format!("expected 2 fields, got {}", fields.len())));
        }
        let a = parse_index(fields[0], "edges.tsv", lineno)?;
        let b = parse_index(fields[1], "edges.tsv", lineno)?;
        edges.push((a.min(b), a.max(b)));
    }

    let labels = match &files.labels {
        None => None,
        Some(text) => {
            let mut labels = Vec::with_capacity(meta.n.min(1 << 20));
            for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
                if line.is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 2 {
                    return Err(Error::parse("labels.tsv", lineno, format!("expected 2 fields, got {}", fields.len())));
                }
                if ids.get(labels.len()).map(String::as_str) != Some(fields[0]) {
                    return Err(Error::parse("labels.tsv", lineno, format!("node id {:?} out of order", fields[0])));
                }
                labels.push(parse_index(fields[1], "labels.tsv", lineno)?);
            }
            Some(labels)
        }
    };

    let features = Array2::from_shape_vec((meta.n, meta.k), values).expect("row-major feature buffer");
    GraphBundle::new(ids, features, edges, labels, meta.num_communities)
}

pub fn write_canonical_dir(bundle: &GraphBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = to_canonical(bundle);
    let put = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    put("features.tsv", &files.features)?;
    put("edges.tsv", &files.edges)?;
    if let Some(labels) = &files.labels {
        put("labels.tsv", labels)?;
    }
    put("meta.json", &files.meta)
}

pub fn read_canonical_dir(dir: &Path) -> Result<GraphBundle> {
    let labels_path = dir.join("labels.tsv");
    let files = CanonicalFiles {
        features: read_text(&dir.join("features.tsv"))?,
        edges: read_text(&dir.join("edges.tsv"))?,
        labels: if labels_path.exists() {
            Some(read_text(&labels_path)?)
        } else {
            None
        },
        meta: read_text(&dir.join("meta.json"))?,
    };
    parse_canonical(&files)
}

fn find_with_suffix(dir: &Path, suffix: &str) -> Option<std::path::PathBuf> {
    let mut hits: Vec<_> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|s| s.to_str()).is_some_and(|s| s.ends_with(suffix)))
        .collect();
    hits.sort();
    hits.into_iter().next()
}

/// Loads whichever supported format `dir` contains: a canonical bundle,
/// a LINQS `*.content`/`*.cites` pair, or PubMed `*.NODE.paper.tab` files.
pub fn load_dataset_dir(dir: &Path) -> Result<(GraphBundle, LoadReport)> {
    if dir.join("meta.json").exists() {
        let bundle = read_canonical_dir(dir)?;
        let report = LoadReport {
            nodes: bundle.num_nodes(),
            raw_edge_lines: bundle.edges().len(),
            isolated_nodes: bundle.isolated_nodes(),
            ..LoadReport::default()
        };
        return Ok((bundle, report));
    }
    if let (Some(content), Some(cites)) = (find_with_suffix(dir, ".content"), find_with_suffix(dir, ".cites")) {
        return load_linqs_bundle(&content, &cites);
    }
    if let (Some(nodes), Some(cites)) = (
        find_with_suffix(dir, ".NODE.paper.tab"),
        find_with_suffix(dir, ".DIRECTED.cites.tab"),
    ) {
        let g = load_pubmed_bundle(&nodes, &cites)?;
        return Ok((g.bundle, g.report));
    }
    Err(Error::InvalidArgument(format!(
        "{} holds no canonical bundle, LINQS files or PubMed files",
        dir.display()
    )))
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` as a CSR matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: CsrMatrix,
    degrees: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// Self-loop degrees `d̃_i = 1 + deg(i)`.
    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn n(&self) -> usize {
        self.degrees.len()
    }
}

pub fn build_normalized_adjacency(bundle: &GraphBundle) -> NormalizedAdjacency {
    normalized_adjacency_from_edges(bundle.num_nodes(), bundle.edges())
}

pub fn normalized_adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> NormalizedAdjacency {
    let mut degrees = vec![1.0f64; n];
    for &(a, b) in edges {
        degrees[a] += 1.0;
        degrees[b] += 1.0;
    }
    let mut triplets = Vec::with_capacity(n + 2 * edges.len());
    for i in 0..n {
        triplets.push((i, i, 1.0 / degrees[i]));
    }
    for &(a, b) in edges {
        let w = 1.0 / (degrees[a] * degrees[b]).sqrt();
        triplets.push((a, b, w));
        triplets.push((b, a, w));
    }
    NormalizedAdjacency {
        matrix: CsrMatrix::from_triplets(n, n, triplets),
        degrees,
    }
}
