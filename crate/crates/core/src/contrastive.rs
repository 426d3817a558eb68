//! Debiased negative sampling and the InfoNCE objective.
//!
//! For anchor `i` with positive similarity `s_p` and negative similarities
//! `s_k` the loss is
//!
//! ```text
//! −ln( e^{s_p/τ} / (e^{s_p/τ} + Σ_k e^{s_k/τ}) ) = ln(1 + Σ_k e^{(s_k − s_p)/τ})
//! ```
//!
//! The right-hand form is what gets recorded: it is exactly zero when the
//! negative set is empty and never negative.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::anchor_rng;
use crate::sparse::CsrMatrix;

/// `Ñ_i = { m : c*_m ≠ c*_i }`, ascending.
pub fn debiased_negative_set(i: usize, pseudo_labels: &[usize]) -> Vec<usize> {
    let own = pseudo_labels[i];
    pseudo_labels
        .iter()
        .enumerate()
        .filter(|&(m, &c)| m != i && c != own)
        .map(|(m, _)| m)
        .collect()
}

/// Uniform sample without replacement of `min(n_neg, |pool|)` entries of
/// `pool`, returned in ascending pool order.
pub fn sample_negatives<R: Rng>(pool: &[usize], n_neg: usize, rng: &mut R) -> Vec<usize> {
    let amount = n_neg.min(pool.len());
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .collect();
    picks.sort_unstable();
    picks.into_iter().map(|p| pool[p]).collect()
}

/// Negatives drawn for every anchor in one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSampleSet {
    pub per_anchor: Vec<Vec<usize>>,
    pub budget: usize,
    /// Anchors whose debiased pool was empty and fell back to all `j ≠ i`.
    pub fallback_anchors: usize,
}

impl NegativeSampleSet {
    pub fn len(&self) -> usize {
        self.per_anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_anchor.is_empty()
    }

    pub fn total_negatives(&self) -> usize {
        self.per_anchor.iter().map(Vec::len).sum()
    }

    /// Pairwise similarities the contrastive loss evaluates: one positive
    /// plus the sampled negatives per anchor.
    pub fn similarity_evaluations(&self) -> usize {
        self.len() + self.total_negatives()
    }
}

/// `p`-th element (0-based) of `[0, n) \ members`, with `members` sorted.
fn nth_outside(members: &[usize], p: usize) -> usize {
    // m_j − j is non-decreasing, so the members preceding the answer are
    // exactly those with m_j − j ≤ p.
    let (mut lo, mut hi) = (0, members.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if members[mid] - mid <= p {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    p + lo
}

/// Samples debiased negatives for every anchor.
///
/// For each anchor the result equals
/// `sample_negatives(&debiased_negative_set(i, labels), n_neg, anchor_rng(seed, epoch, i))`
/// without materializing the O(n) pool; an empty pool falls back to all
/// nodes other than `i`.
pub fn sample_debiased(pseudo_labels: &[usize], n_neg: usize, seed: u64, epoch: u64) -> NegativeSampleSet {
    let n = pseudo_labels.len();
    let k = pseudo_labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in pseudo_labels.iter().enumerate() {
        members[c].push(i);
    }
    let mut fallback_anchors = 0;
    let per_anchor = (0..n)
        .map(|i| {
            let mut own = members[pseudo_labels[i]].as_slice();
            let single = [i];
            if own.len() == n {
                fallback_anchors += 1;
                own = &single;
            }
            let pool = n - own.len();
            let mut rng = anchor_rng(seed, epoch, i as u64);
            let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, pool, n_neg.min(pool))
                .into_iter()
                .collect();
            picks.sort_unstable();
            picks.into_iter().map(|p| nth_outside(own, p)).collect()
        })
        .collect();
    NegativeSampleSet {
        per_anchor,
        budget: n_neg,
        fallback_anchors,
    }
}

/// Negatives drawn uniformly from all `j ≠ i` (pretraining).
pub fn sample_uniform(n: usize, n_neg: usize, seed: u64, epoch: u64) -> NegativeSampleSet {
    let mut set = sample_debiased(&vec![0; n], n_neg, seed, epoch);
    set.fallback_anchors = 0;
    set
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Per-anchor InfoNCE losses as an `n×1` column.
///
/// Anchor `i` pairs row `i` of `anchors` with row `i` of `positives`; its
/// negatives are rows of `negatives_from` listed in `negs.per_anchor[i]`.
pub fn infonce_batch(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    negatives_from: Var,
    negs: &NegativeSampleSet,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let n = tape.shape(anchors).0;
    if negs.len() != n {
        return Err(Error::InvalidArgument(format!("{} negative lists for {n} anchors", negs.len())));
    }
    let prod = tape.elementwise_mul(anchors, positives)?;
    let s_pos = tape.row_sum(prod);
    let total = negs.total_negatives();
    if total == 0 {
        return Ok(tape.scalar_mul(s_pos, 0.0));
    }
    let mut owner = Vec::with_capacity(total);
    let mut other = Vec::with_capacity(total);
    for (i, list) in negs.per_anchor.iter().enumerate() {
        for &j in list {
            owner.push(i);
            other.push(j);
        }
    }
    let aggregate = Arc::new(CsrMatrix::from_triplets(
        n,
        total,
        owner.iter().enumerate().map(|(t, &i)| (i, t, 1.0)).collect(),
    ));
    let a = tape.gather_rows(anchors, owner.clone())?;
    let b = tape.gather_rows(negatives_from, other)?;
    let ab = tape.elementwise_mul(a, b)?;
    let s_neg = tape.row_sum(ab);
    let s_pos_rep = tape.gather_rows(s_pos, owner)?;
    let diff = tape.sub(s_neg, s_pos_rep)?;
    let scaled = tape.scalar_mul(diff, 1.0 / tau);
    let e = tape.exp(scaled);
    let summed = tape.sparse_matmul(aggregate, e)?;
    let shifted = tape.add_scalar(summed, 1.0);
    Ok(tape.log(shifted))
}

/// InfoNCE for a single anchor: `z` and `z_pos` are `1×d`, `z_neg` is `m×d`.
pub fn infonce_loss(tape: &mut Tape, z: Var, z_pos: Var, z_neg: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let prod = tape.elementwise_mul(z, z_pos)?;
    let s_pos = tape.sum(prod);
    let m = tape.shape(z_neg).0;
    if m == 0 {
        return Ok(tape.scalar_mul(s_pos, 0.0));
    }
    let zt = tape.transpose(z);
    let s_neg = tape.matmul(z_neg, zt)?;
    let s_pos_rep = tape.gather_rows(s_pos, vec![0; m])?;
    let diff = tape.sub(s_neg, s_pos_rep)?;
    let scaled = tape.scalar_mul(diff, 1.0 / tau);
    let e = tape.exp(scaled);
    let s = tape.sum(e);
    let shifted = tape.add_scalar(s, 1.0);
    Ok(tape.log(shifted))
}

/// Convenience evaluation of the single-anchor loss from raw vectors.
pub fn infonce_value(z: &[f64], z_pos: &[f64], z_neg: &[Vec<f64>], tau: f64) -> Result<f64> {
    let d = z.len();
    let mut tape = Tape::new();
    let zv = tape.constant(Array2::from_shape_vec((1, d), z.to_vec()).map_err(|e| Error::InvalidArgument(e.to_string()))?);
    let pv = tape.constant(
        Array2::from_shape_vec((1, d), z_pos.to_vec()).map_err(|e| Error::InvalidArgument(e.to_string()))?,
    );
    let flat: Vec<f64> = z_neg.iter().flatten().copied().collect();
    let nv = tape.constant(
        Array2::from_shape_vec((z_neg.len(), d), flat).map_err(|e| Error::InvalidArgument(e.to_string()))?,
    );
    let loss = infonce_loss(&mut tape, zv, pv, nv, tau)?;
    tape.forward()?;
    tape.scalar(loss)
}
