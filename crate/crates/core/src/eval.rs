//! Clustering metrics against ground truth, and Newman modularity.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_assignment;
use crate::error::{Error, Result};

/// Entropy normalization used by [`nmi`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmiNormalization {
    #[default]
    Arithmetic,
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub modularity: f64,
    /// `mapping[c]` is the class matched to predicted cluster `c`.
    pub mapping: Vec<Option<usize>>,
    /// Predicted size of each ground-truth community after mapping.
    pub per_community_counts: Vec<usize>,
    /// True size of each ground-truth community.
    pub true_counts: Vec<usize>,
}

impl MetricsReport {
    /// `community\ttrue_size\tpredicted_size` rows.
    pub fn counts_tsv(&self) -> String {
        let mut out = String::from("community\ttrue_size\tpredicted_size\n");
        for (c, (t, p)) in self.true_counts.iter().zip(&self.per_community_counts).enumerate() {
            let _ = writeln!(out, "{c}\t{t}\t{p}");
        }
        out
    }
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} entries, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty labeling".into()));
    }
    Ok(())
}

fn contingency(pred: &[usize], truth: &[usize]) -> Array2<f64> {
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let mut c = Array2::zeros((kp, kt));
    for (&p, &t) in pred.iter().zip(truth) {
        c[[p, t]] += 1.0;
    }
    c
}

/// Best accuracy over injective cluster-to-class maps, and the map itself.
pub fn accuracy_hungarian(pred: &[usize], truth: &[usize]) -> Result<(f64, Vec<Option<usize>>)> {
    check_lengths(pred, truth)?;
    let c = contingency(pred, truth);
    let mapping = max_weight_assignment(&c);
    let hits: f64 = mapping
        .iter()
        .enumerate()
        .filter_map(|(p, t)| t.map(|t| c[[p, t]]))
        .sum();
    Ok((hits / pred.len() as f64, mapping))
}

fn entropy(counts: impl Iterator<Item = f64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0.0)
        .map(|c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    nmi_with(pred, truth, NmiNormalization::Arithmetic)
}

pub fn nmi_with(pred: &[usize], truth: &[usize], norm: NmiNormalization) -> Result<f64> {
    check_lengths(pred, truth)?;
    let c = contingency(pred, truth);
    let n = pred.len() as f64;
    let rows = c.sum_axis(ndarray::Axis(1));
    let cols = c.sum_axis(ndarray::Axis(0));
    let hp = entropy(rows.iter().copied(), n);
    let ht = entropy(cols.iter().copied(), n);
    if hp == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for ((i, j), &nij) in c.indexed_iter() {
        if nij > 0.0 {
            mi += nij / n * (n * nij / (rows[i] * cols[j])).ln();
        }
    }
    let denom = match norm {
        NmiNormalization::Arithmetic => (hp + ht) / 2.0,
        NmiNormalization::Geometric => (hp * ht).sqrt(),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::InvalidArgument("ARI needs at least two items".into()));
    }
    let c = contingency(pred, truth);
    let index: f64 = c.iter().map(|&x| choose2(x)).sum();
    let a: f64 = c.sum_axis(ndarray::Axis(1)).iter().map(|&x| choose2(x)).sum();
    let b: f64 = c.sum_axis(ndarray::Axis(0)).iter().map(|&x| choose2(x)).sum();
    let total = choose2(pred.len() as f64);
    let expected = a * b / total;
    let max_index = (a + b) / 2.0;
    if max_index == expected {
        // Both partitions trivial in the same way.
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max_index - expected))
}

/// Relabels predictions through `mapping`; unmatched clusters become `None`.
pub fn apply_mapping(pred: &[usize], mapping: &[Option<usize>]) -> Vec<Option<usize>> {
    pred.iter().map(|&p| mapping.get(p).copied().flatten()).collect()
}

/// Micro and macro F1 of mapped predictions; `None` counts as an error.
pub fn f1_scores(mapped: &[Option<usize>], truth: &[usize]) -> Result<(f64, f64)> {
    if mapped.len() != truth.len() || truth.is_empty() {
        return Err(Error::InvalidArgument("F1 needs equal, non-empty labelings".into()));
    }
    let k = truth.iter().copied().chain(mapped.iter().flatten().copied()).max().unwrap_or(0) + 1;
    let mut tp = vec![0.0; k];
    let mut fp = vec![0.0; k];
    let mut fn_ = vec![0.0; k];
    // Predictions from unmatched clusters name no real class.
    let mut stray = 0.0;
    for (&m, &t) in mapped.iter().zip(truth) {
        match m {
            Some(m) if m == t => tp[t] += 1.0,
            Some(m) => {
                fp[m] += 1.0;
                fn_[t] += 1.0;
            }
            None => {
                fn_[t] += 1.0;
                stray += 1.0;
            }
        }
    }
    let f1 = |tp: f64, fp: f64, fn_: f64| {
        let d = tp + 0.5 * (fp + fn_);
        if d == 0.0 {
            0.0
        } else {
            tp / d
        }
    };
    let micro = f1(tp.iter().sum(), fp.iter().sum::<f64>() + stray, fn_.iter().sum());
    let classes: Vec<usize> = (0..k).filter(|&c| tp[c] + fn_[c] > 0.0).collect();
    let macro_f1 = classes.iter().map(|&c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / classes.len() as f64;
    Ok((micro, macro_f1))
}

/// `Q = Σ_c (e_cc/m − (d_c/2m)²)` over an undirected simple edge list.
pub fn modularity(edges: &[(usize, usize)], partition: &[usize]) -> Result<f64> {
    if edges.is_empty() {
        return Err(Error::InvalidArgument("modularity needs at least one edge".into()));
    }
    let k = partition.iter().max().map_or(0, |m| m + 1);
    let mut inside = vec![0.0; k];
    let mut degree = vec![0.0; k];
    for &(a, b) in edges {
        let (ca, cb) = match (partition.get(a), partition.get(b)) {
            (Some(&ca), Some(&cb)) => (ca, cb),
            _ => return Err(Error::InvalidArgument(format!("edge ({a}, {b}) outside partition"))),
        };
        if ca == cb {
            inside[ca] += 1.0;
        }
        degree[ca] += 1.0;
        degree[cb] += 1.0;
    }
    let m = edges.len() as f64;
    Ok((0..k).map(|c| inside[c] / m - (degree[c] / (2.0 * m)).powi(2)).sum())
}

/// All metrics at once; modularity is 0 for graphs without edges.
pub fn evaluate(pred: &[usize], truth: &[usize], edges: &[(usize, usize)]) -> Result<MetricsReport> {
    let (acc, mapping) = accuracy_hungarian(pred, truth)?;
    let mapped = apply_mapping(pred, &mapping);
    let (micro_f1, macro_f1) = f1_scores(&mapped, truth)?;
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let mut per_community_counts = vec![0; kt];
    for m in mapped.iter().flatten() {
        per_community_counts[*m] += 1;
    }
    let mut true_counts = vec![0; kt];
    for &t in truth {
        true_counts[t] += 1;
    }
    Ok(MetricsReport {
        acc,
        nmi: nmi(pred, truth)?,
        ari: if pred.len() >= 2 { ari(pred, truth)? } else { 1.0 },
        micro_f1,
        macro_f1,
        modularity: if edges.is_empty() { 0.0 } else { modularity(edges, pred)? },
        mapping,
        per_community_counts,
        true_counts,
    })
}

/// `node_id\tcommunity` lines in node order.
pub fn format_assignments(node_ids: &[String], labels: &[usize]) -> String {
    let mut out = String::new();
    for (id, l) in node_ids.iter().zip(labels) {
        let _ = writeln!(out, "{id}\t{l}");
    }
    out
}

/// Reads `node_id\tcommunity` lines into a label per node of `node_ids`.
///
/// Blank lines and `#` comments are skipped. Every node must appear exactly
/// once.
pub fn parse_assignments(text: &str, node_ids: &[String]) -> Result<Vec<usize>> {
    let index: std::collections::HashMap<&str, usize> =
        node_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut labels = vec![None; node_ids.len()];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let here = |msg: String| Error::Parse {
            path: "assignments".into(),
            line: lineno + 1,
            msg,
        };
        let mut fields = line.split('\t');
        let (Some(id), Some(label), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(here("expected node_id<TAB>community".into()));
        };
        let &node = index.get(id).ok_or_else(|| here(format!("unknown node id {id:?}")))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| here(format!("community {label:?} is not a non-negative integer")))?;
        if labels[node].replace(label).is_some() {
            return Err(here(format!("node {id:?} assigned twice")));
        }
    }
    labels
        .iter()
        .zip(node_ids)
        .map(|(l, id)| {
            l.ok_or_else(|| Error::Parse {
                path: "assignments".into(),
                line: 0,
                msg: format!("node {id:?} has no assignment"),
            })
        })
        .collect()
}
