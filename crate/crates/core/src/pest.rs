//! Personalized self-training: incremental K-medoids sampling in embedding
//! space and the cross-entropy objective on the sampled medoids.
//!
//! Every `t` epochs one round of K-medoids picks `K` real nodes from the
//! not-yet-selected set `U_l`. The chosen medoids join the training set with
//! one label each, so every round is class balanced. Labels keep a stable
//! meaning across rounds: the first round is matched to the clustering
//! centers (or ordered by node index when no centers are given) and later
//! rounds are matched to the first round's medoids.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::assignment::min_cost_assignment;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Epsilon added inside the logarithm of predicted probabilities.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct KMedoidsResult {
    /// Medoid point indices; cluster `c` is represented by `medoids[c]`.
    pub medoids: Vec<usize>,
    /// Cluster of every point.
    pub assignment: Vec<usize>,
    /// `Σ_i min_c ‖x_i − x_{medoids[c]}‖₂` at the returned medoids.
    pub objective: f64,
    /// Objective after each assignment step, starting at the initial medoids.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_norms(x: ArrayView2<'_, f64>) -> Vec<f64> {
    x.rows().into_iter().map(|r| r.dot(&r)).collect()
}

fn euclid(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Assigns every point to its nearest medoid; ties go to the medoid with
/// the lowest point index.
fn assign(points: ArrayView2<'_, f64>, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut order: Vec<usize> = (0..medoids.len()).collect();
    order.sort_by_key(|&c| medoids[c]);
    let mut total = 0.0;
    let assignment = points
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = (f64::INFINITY, 0);
            for &c in &order {
                let d = euclid(row, points.row(medoids[c]));
                if d < best.0 {
                    best = (d, c);
                }
            }
            total += best.0;
            best.1
        })
        .collect();
    (assignment, total)
}

/// Candidate in `cands` minimizing the summed distance to `members`
/// (lowest index on ties).
fn best_medoid(points: ArrayView2<'_, f64>, norms: &[f64], cands: &[usize], members: &[usize]) -> Option<usize> {
    const BLOCK: usize = 256;
    let mem = points.select(Axis(0), members);
    let mut best: Option<(f64, usize)> = None;
    for chunk in cands.chunks(BLOCK) {
        let block = points.select(Axis(0), chunk);
        let gram = block.dot(&mem.t());
        for (ci, &cand) in chunk.iter().enumerate() {
            let cost: f64 = members
                .iter()
                .enumerate()
                .map(|(mi, &m)| {
                    if m == cand {
                        0.0
                    } else {
                        (norms[cand] + norms[m] - 2.0 * gram[[ci, mi]]).max(0.0).sqrt()
                    }
                })
                .sum();
            match best {
                Some((b, idx)) if cost > b || (cost == b && cand > idx) => {}
                _ => best = Some((cost, cand)),
            }
        }
    }
    best.map(|(_, c)| c)
}

/// Voronoi-iteration K-medoids.
///
/// The objective sums over every row of `points`, while medoids are drawn
/// only from `candidates`. Initialization is greedy farthest-point seeding
/// from a seeded random candidate.
pub fn kmedoids(points: ArrayView2<'_, f64>, candidates: &[usize], k: usize, max_iter: usize, seed: u64) -> Result<KMedoidsResult> {
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if cands.len() < k {
        return Err(Error::ScheduleExhausted {
            remaining: cands.len(),
            k,
        });
    }
    if let Some(&bad) = cands.iter().find(|&&c| c >= points.nrows()) {
        return Err(Error::InvalidArgument(format!("candidate {bad} out of range")));
    }
    let is_cand = {
        let mut v = vec![false; points.nrows()];
        for &c in &cands {
            v[c] = true;
        }
        v
    };

    let mut rng = stream_rng(seed, Stream::KMedoids, 0, 0);
    let mut medoids = vec![cands[rng.random_range(0..cands.len())]];
    let mut chosen = vec![false; points.nrows()];
    chosen[medoids[0]] = true;
    let mut min_dist: Vec<f64> = cands.iter().map(|&c| euclid(points.row(c), points.row(medoids[0]))).collect();
    while medoids.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for (pos, &c) in cands.iter().enumerate() {
            if chosen[c] {
                continue;
            }
            if best.is_none_or(|(d, _)| min_dist[pos] > d) {
                best = Some((min_dist[pos], c));
            }
        }
        let (_, next) = best.expect("enough candidates");
        chosen[next] = true;
        medoids.push(next);
        for (pos, &c) in cands.iter().enumerate() {
            min_dist[pos] = min_dist[pos].min(euclid(points.row(c), points.row(next)));
        }
    }

    let norms = sq_norms(points);
    let mut history = Vec::new();
    let mut iterations = 0;
    let (mut assignment, mut objective) = assign(points, &medoids);
    history.push(objective);
    while iterations < max_iter {
        iterations += 1;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            members[c].push(i);
        }
        let mut changed = false;
        for c in 0..k {
            let local: Vec<usize> = members[c].iter().copied().filter(|&i| is_cand[i]).collect();
            if local.is_empty() {
                continue;
            }
            let mut pool = local;
            // The current medoid stays eligible even when a tie put it in
            // another cluster.
            if !pool.contains(&medoids[c]) {
                pool.push(medoids[c]);
                pool.sort_unstable();
            }
            if let Some(best) = best_medoid(points, &norms, &pool, &members[c]) {
                if best != medoids[c] && !medoids.contains(&best) {
                    medoids[c] = best;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
        let (a, obj) = assign(points, &medoids);
        assignment = a;
        objective = obj;
        history.push(objective);
    }
    Ok(KMedoidsResult {
        medoids,
        assignment,
        objective,
        history,
        iterations,
    })
}

/// Sampling period and the not-yet-selected node set `U_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSchedule {
    pub period: usize,
    pub rounds: usize,
    unselected: Vec<bool>,
    remaining: usize,
    /// Set once a round found fewer than `K` candidates; no further rounds run.
    pub exhausted: bool,
}

impl SamplingSchedule {
    pub fn new(n: usize, period: usize) -> Self {
        SamplingSchedule {
            period,
            rounds: 0,
            unselected: vec![true; n],
            remaining: n,
            exhausted: false,
        }
    }

    /// Whether a round is due after `epoch` (1-based) epochs.
    pub fn due(&self, epoch: usize) -> bool {
        !self.exhausted && self.period > 0 && epoch > 0 && epoch % self.period == 0
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    pub fn unselected(&self) -> Vec<usize> {
        self.unselected
            .iter()
            .enumerate()
            .filter_map(|(i, &u)| u.then_some(i))
            .collect()
    }

    fn remove(&mut self, nodes: &[usize]) {
        for &i in nodes {
            if std::mem::replace(&mut self.unselected[i], false) {
                self.remaining -= 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MedoidEntry {
    pub node: usize,
    /// 1-based sampling round.
    pub round: usize,
    pub label: usize,
}

/// Accumulated medoids `M^T` with their labels `N^T`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MedoidTrainingSet {
    entries: Vec<MedoidEntry>,
}

impl MedoidTrainingSet {
    pub fn entries(&self) -> &[MedoidEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nodes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.node).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn round(&self, round: usize) -> Vec<MedoidEntry> {
        self.entries.iter().filter(|e| e.round == round).copied().collect()
    }

    /// TSV with one `node_id\tround\tlabel` line per medoid.
    pub fn to_tsv(&self, node_ids: &[String]) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", node_ids[e.node], e.round, e.label);
        }
        out
    }

    /// Fraction of medoids whose label, mapped through `label_to_class`,
    /// matches the ground truth.
    pub fn label_accuracy(&self, truth: &[usize], label_to_class: &[Option<usize>]) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let hits = self
            .entries
            .iter()
            .filter(|e| label_to_class.get(e.label).copied().flatten() == Some(truth[e.node]))
            .count();
        hits as f64 / self.entries.len() as f64
    }
}

fn distance_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| euclid(a.row(i), b.row(j)))
}

/// Runs one sampling round on the unselected nodes and appends it to `set`.
///
/// `embeddings` is a detached copy of the node embeddings. `centers`, when
/// given, fixes the label meaning of the first round (label = index of the
/// matched center).
pub fn incremental_sample(
    schedule: &mut SamplingSchedule,
    set: &mut MedoidTrainingSet,
    embeddings: ArrayView2<'_, f64>,
    k: usize,
    centers: Option<ArrayView2<'_, f64>>,
    max_iter: usize,
    seed: u64,
) -> Result<Vec<MedoidEntry>> {
    let cands = schedule.unselected();
    let result = match kmedoids(embeddings, &cands, k, max_iter, seed ^ schedule.rounds as u64) {
        Ok(r) => r,
        Err(e @ Error::ScheduleExhausted { .. }) => {
            schedule.exhausted = true;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let round = schedule.rounds + 1;
    let medoid_rows = embeddings.select(Axis(0), &result.medoids);

    let labels: Vec<usize> = if set.is_empty() {
        match centers {
            Some(c) if c.nrows() == k => min_cost_assignment(&distance_matrix(&medoid_rows, &c.to_owned()))
                .into_iter()
                .map(|l| l.expect("square assignment"))
                .collect(),
            _ => {
                let mut order: Vec<usize> = (0..k).collect();
                order.sort_by_key(|&c| result.medoids[c]);
                let mut labels = vec![0; k];
                for (label, c) in order.into_iter().enumerate() {
                    labels[c] = label;
                }
                labels
            }
        }
    } else {
        let mut first = set.round(1);
        first.sort_by_key(|e| e.label);
        let first_nodes: Vec<usize> = first.iter().map(|e| e.node).collect();
        let reference = embeddings.select(Axis(0), &first_nodes);
        min_cost_assignment(&distance_matrix(&medoid_rows, &reference))
            .into_iter()
            .map(|j| first[j.expect("square assignment")].label)
            .collect()
    };

    let mut entries: Vec<MedoidEntry> = result
        .medoids
        .iter()
        .zip(&labels)
        .map(|(&node, &label)| MedoidEntry { node, round, label })
        .collect();
    entries.sort_by_key(|e| e.label);
    schedule.remove(&result.medoids);
    schedule.rounds = round;
    set.entries.extend_from_slice(&entries);
    Ok(entries)
}

/// `−(1/m) Σ_i ln(ŷ_{i, label_i} + ε)` over the rows of `predictions`.
///
/// An empty medoid set contributes a constant zero.
pub fn self_training_loss(tape: &mut Tape, predictions: Var, labels: &[usize]) -> Result<Var> {
    let (m, k) = tape.shape(predictions);
    if m != labels.len() {
        return Err(Error::InvalidArgument(format!("{} labels for {m} prediction rows", labels.len())));
    }
    if m == 0 {
        return Ok(tape.constant(Array2::zeros((1, 1))));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0, {k})")));
    }
    let onehot = tape.constant(Array2::from_shape_fn((m, k), |(i, c)| if labels[i] == c { 1.0 } else { 0.0 }));
    let shifted = tape.add_scalar(predictions, LOG_EPS);
    let logs = tape.log(shifted);
    let picked = tape.elementwise_mul(logs, onehot)?;
    let s = tape.sum(picked);
    Ok(tape.scalar_mul(s, -1.0 / m as f64))
}
