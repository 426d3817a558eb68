//! Aligned graph clustering: Student-t soft assignment, sharpened target
//! distribution, KL clustering loss, center alignment and pseudo-labels.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{mlp_predict, MlpVars};
use crate::error::{Error, Result};
use crate::pest::{self_training_loss, LOG_EPS};
use crate::rng::{stream_rng, Stream};

/// Learnable centers and the quantities derived from them each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub centers: Array2<f64>,
    /// Student-t degrees of freedom.
    pub alpha: f64,
    pub q: Array2<f64>,
    pub p: Array2<f64>,
    pub pseudo_labels: Vec<usize>,
}

impl ClusterState {
    pub fn new(centers: Array2<f64>) -> Self {
        ClusterState {
            centers,
            alpha: 1.0,
            q: Array2::zeros((0, 0)),
            p: Array2::zeros((0, 0)),
            pseudo_labels: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.centers.nrows()
    }
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's K-means with k-means++ seeding and at most 100 iterations.
pub fn init_centers(h: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<Array2<f64>> {
    let (n, d) = h.dim();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("cannot place {k} centers on {n} points")));
    }
    let mut rng = stream_rng(seed, Stream::KMeans, 0, 0);
    let mut centers = Array2::zeros((k, d));
    centers.row_mut(0).assign(&h.row(rng.random_range(0..n)));
    let mut closest: Vec<f64> = h.rows().into_iter().map(|r| sq_dist(r, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in closest.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&h.row(pick));
        for (i, row) in h.rows().into_iter().enumerate() {
            closest[i] = closest[i].min(sq_dist(row, centers.row(c)));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, row) in h.rows().into_iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dd = sq_dist(row, centers.row(c));
                if dd < best.0 {
                    best = (dd, c);
                }
            }
            if assignment[i] != best.1 {
                assignment[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, row) in h.rows().into_iter().enumerate() {
            sums.row_mut(assignment[i]).scaled_add(1.0, &row);
            counts[assignment[i]] += 1;
        }
        for c in 0..k {
            // Empty clusters keep their previous center.
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    Ok(centers)
}

/// `q_ik ∝ (1 + ‖h_i − μ_k‖²/α)^{−(α+1)/2}`, row-normalized.
pub fn soft_assign(tape: &mut Tape, h: Var, mu: Var, alpha: f64) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let h2 = tape.square(h);
    let h_norm = tape.row_sum(h2);
    let m2 = tape.square(mu);
    let m_norm = tape.row_sum(m2);
    let m_norm_t = tape.transpose(m_norm);
    let mu_t = tape.transpose(mu);
    let cross = tape.matmul(h, mu_t)?;
    let cross = tape.scalar_mul(cross, -2.0);
    let d2 = tape.add_col(cross, h_norm)?;
    let d2 = tape.add_row(d2, m_norm_t)?;
    let scaled = tape.scalar_mul(d2, 1.0 / alpha);
    let base = tape.add_scalar(scaled, 1.0);
    let kernel = tape.powf(base, -(alpha + 1.0) / 2.0);
    let total = tape.row_sum(kernel);
    let inv = tape.powf(total, -1.0);
    tape.mul_col(kernel, inv)
}

/// Soft assignment computed directly, without a tape.
pub fn soft_assign_values(h: ArrayView2<'_, f64>, mu: ArrayView2<'_, f64>, alpha: f64) -> Array2<f64> {
    let mut q = Array2::from_shape_fn((h.nrows(), mu.nrows()), |(i, k)| {
        (1.0 + sq_dist(h.row(i), mu.row(k)) / alpha).powf(-(alpha + 1.0) / 2.0)
    });
    for mut row in q.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    q
}

/// `p_ik = (q_ik²/f_k) / Σ_k' (q_ik'²/f_k')` with `f_k = Σ_i q_ik`.
pub fn target_distribution(q: &Array2<f64>) -> Array2<f64> {
    let f = q.sum_axis(ndarray::Axis(0));
    let mut p = Array2::from_shape_fn(q.dim(), |(i, k)| if f[k] > 0.0 { q[[i, k]] * q[[i, k]] / f[k] } else { 0.0 });
    for mut row in p.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    p
}

/// `KL(P ‖ Q) = Σ_i Σ_k p_ik ln(p_ik / q_ik)` with `P` held constant.
pub fn clustering_loss(tape: &mut Tape, p: &Array2<f64>, q: Var) -> Result<Var> {
    if tape.shape(q) != p.dim() {
        return Err(Error::Shape {
            node: q.index(),
            op: "clustering_loss",
            detail: format!("P {:?} vs Q {:?}", p.dim(), tape.shape(q)),
        });
    }
    let entropy_part: f64 = p.iter().map(|&v| v * (v + LOG_EPS).ln()).sum();
    let pv = tape.constant(p.clone());
    let shifted = tape.add_scalar(q, LOG_EPS);
    let logs = tape.log(shifted);
    let cross = tape.elementwise_mul(pv, logs)?;
    let s = tape.sum(cross);
    let neg = tape.scalar_mul(s, -1.0);
    Ok(tape.add_scalar(neg, entropy_part))
}

/// Cross-entropy pushing the head's prediction for center `k` toward label `k`.
pub fn alignment_loss(tape: &mut Tape, mu: Var, mlp: &MlpVars) -> Result<Var> {
    let k = tape.shape(mu).0;
    let pred = mlp_predict(tape, mu, mlp)?;
    let labels: Vec<usize> = (0..k).collect();
    self_training_loss(tape, pred, &labels)
}

/// Row-wise argmax of `q`; the lowest index wins ties.
pub fn pseudo_labels(q: &Array2<f64>) -> Vec<usize> {
    q.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::autodiff::finite_difference_check;
    use crate::encoder::MlpParams;
    use ndarray::array;
    use proptest::prelude::*;

    fn q_of(h: Array2<f64>, mu: Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let hv = tape.constant(h);
        let mv = tape.constant(mu);
        let q = soft_assign(&mut tape, hv, mv, 1.0).unwrap();
        tape.forward().unwrap();
        tape.value(q).unwrap().clone()
    }

    #[test]
    fn soft_assign_examples() {
        let q = q_of(array![[0.0, 0.0]], array![[1.0, 0.0], [-1.0, 0.0]]);
        assert!((q[[0, 0]] - 0.5).abs() < 1e-15);
        let q = q_of(array![[0.0]], array![[0.0], [1.0]]);
        assert!((q[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((q[[0, 1]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn soft_assign_matches_direct_formula() {
        let mut rng = stream_rng(2, Stream::Synthetic, 0, 0);
        let h = Array2::from_shape_simple_fn((7, 3), || rng.random_range(-2.0..2.0));
        let mu = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-2.0..2.0));
        let q = q_of(h.clone(), mu.clone());
        let direct = soft_assign_values(h.view(), mu.view(), 1.0);
        for (a, b) in q.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in q.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn target_distribution_examples() {
        let uniform = Array2::from_elem((5, 4), 0.25);
        assert_eq!(target_distribution(&uniform), uniform);
        let single = array![[0.3, 0.7]];
        let p = target_distribution(&single);
        assert!((p[[0, 0]] - 0.3).abs() < 1e-15 && (p[[0, 1]] - 0.7).abs() < 1e-15);
        // f = [1.4, 0.6]; unnormalized row one = [0.81/1.4, 0.01/0.6].
        let p = target_distribution(&array![[0.9, 0.1], [0.5, 0.5]]);
        let (a, b) = (0.81 / 1.4, 0.01 / 0.6);
        assert!((p[[0, 0]] - a / (a + b)).abs() < 1e-15);
        assert!((p[[0, 0]] - 0.9720).abs() < 1e-4);
        assert!((p[[0, 1]] - 0.0280).abs() < 1e-4);
    }

    fn kl(p: Array2<f64>, q: Array2<f64>) -> f64 {
        let mut tape = Tape::new();
        let qv = tape.constant(q);
        let l = clustering_loss(&mut tape, &p, qv).unwrap();
        tape.forward().unwrap();
        tape.scalar(l).unwrap()
    }

    #[test]
    fn kl_examples() {
        let q = array![[0.2, 0.8], [0.6, 0.4]];
        assert!(kl(q.clone(), q).abs() < 1e-12);
        assert!((kl(array![[1.0, 0.0]], array![[0.5, 0.5]]) - 2f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn alignment_examples() {
        // A head with zero output weights predicts 1/K everywhere.
        let mut mlp = MlpParams::glorot(2, 8, 3, 0);
        mlp.w2.fill(0.0);
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape).unwrap();
        let mu = tape.constant(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let l = alignment_loss(&mut tape, mu, &vars).unwrap();
        tape.forward().unwrap();
        assert!((tape.scalar(l).unwrap() - 3f64.ln()).abs() < 1e-10);

        // Diagonal predictions 1/2, 1/4, 1/8.
        let mut tape = Tape::new();
        let pred = tape.constant(array![[0.5, 0.25, 0.25], [0.5, 0.25, 0.25], [0.5, 0.375, 0.125]]);
        let l = self_training_loss(&mut tape, pred, &[0, 1, 2]).unwrap();
        tape.forward().unwrap();
        let v = tape.scalar(l).unwrap();
        assert!((v - (2f64.ln() + 4f64.ln() + 8f64.ln()) / 3.0).abs() < 1e-10);
        assert!((v - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn pseudo_label_examples() {
        assert_eq!(pseudo_labels(&array![[0.2, 0.8], [0.5, 0.5]]), vec![1, 0]);
        let q = array![[0.1, 0.6, 0.3], [0.5, 0.2, 0.3]];
        let perm = [2, 0, 1];
        let permuted = Array2::from_shape_fn((2, 3), |(i, k)| q[[i, perm[k]]]);
        let inv = |c: usize| perm.iter().position(|&p| p == c).unwrap();
        let base = pseudo_labels(&q);
        let moved = pseudo_labels(&permuted);
        for (a, b) in base.iter().zip(&moved) {
            assert_eq!(inv(*a), *b);
        }
    }

    #[test]
    fn single_center_is_the_mean() {
        let h = array![[1.0, 2.0], [3.0, -2.0], [5.0, 6.0]];
        let c = init_centers(h.view(), 1, 0).unwrap();
        assert!((c[[0, 0]] - 3.0).abs() < 1e-12 && (c[[0, 1]] - 2.0).abs() < 1e-12);
        assert!(init_centers(h.view(), 4, 0).is_err());
        assert_eq!(init_centers(h.view(), 2, 5).unwrap(), init_centers(h.view(), 2, 5).unwrap());
    }

    /// Plain Lloyd from random distinct starting points.
    fn reference_lloyd(h: &Array2<f64>, k: usize, seed: u64) -> (Array2<f64>, f64) {
        let mut rng = stream_rng(seed, Stream::Synthetic, 9, 0);
        let n = h.nrows();
        let picks = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let mut c = h.select(ndarray::Axis(0), &picks);
        let mut cost = 0.0;
        for _ in 0..200 {
            let mut sums = Array2::<f64>::zeros(c.dim());
            let mut counts = vec![0.0; k];
            cost = 0.0;
            for row in h.rows() {
                let (best, d) = (0..k)
                    .map(|j| (j, sq_dist(row, c.row(j))))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                cost += d;
                sums.row_mut(best).scaled_add(1.0, &row);
                counts[best] += 1.0;
            }
            for j in 0..k {
                if counts[j] > 0.0 {
                    c.row_mut(j).assign(&(&sums.row(j) / counts[j]));
                }
            }
        }
        (c, cost)
    }

    #[test]
    fn two_blobs_recovered() {
        let mut rng = stream_rng(11, Stream::Synthetic, 0, 0);
        let h = Array2::from_shape_fn((100, 2), |(i, j)| {
            let center = if i < 50 { [0.0, 0.0] } else { [8.0, 3.0] };
            center[j] + rng.random_range(-0.5..0.5)
        });
        let oracle = (0..10)
            .map(|s| reference_lloyd(&h, 2, s))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        let ours = init_centers(h.view(), 2, 3).unwrap();
        for row in ours.rows() {
            let nearest = oracle
                .rows()
                .into_iter()
                .map(|o| sq_dist(row, o).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 0.1, "{nearest}");
        }
    }

    #[test]
    fn clustering_loss_gradients() {
        let mut rng = stream_rng(6, Stream::Synthetic, 0, 0);
        let h = Array2::from_shape_simple_fn((8, 2), || rng.random_range(-2.0..2.0));
        let mu = Array2::from_shape_simple_fn((3, 2), || rng.random_range(-2.0..2.0));
        let p = target_distribution(&soft_assign_values(h.view(), mu.view(), 1.0));
        let mut tape = Tape::new();
        let hv = tape.param("h", h).unwrap();
        let mv = tape.param("mu", mu).unwrap();
        let q = soft_assign(&mut tape, hv, mv, 1.0).unwrap();
        let l = clustering_loss(&mut tape, &p, q).unwrap();
        let report = finite_difference_check(&mut tape, l, &["h", "mu"], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn detached_centers_give_no_encoder_gradient() {
        let mlp = MlpParams::glorot(2, 4, 2, 1);
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape).unwrap();
        let h = tape.param("h", array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let mu = tape.constant(array![[1.0, 1.0], [-1.0, 0.5]]);
        let l = alignment_loss(&mut tape, mu, &vars).unwrap();
        tape.forward().unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(h).is_none());
        assert!(tape.grad(vars.w1).is_some());
    }

    proptest! {
        #[test]
        fn kl_non_negative(raw_p in prop::collection::vec(0.01f64..1.0, 6), raw_q in prop::collection::vec(0.01f64..1.0, 6)) {
            let norm = |v: &[f64]| {
                let mut m = Array2::from_shape_vec((2, 3), v.to_vec()).unwrap();
                for mut r in m.rows_mut() { let s = r.sum(); r /= s; }
                m
            };
            prop_assert!(kl(norm(&raw_p), norm(&raw_q)) >= -1e-12);
        }

        #[test]
        fn center_permutation_permutes_columns(seed in any::<u64>()) {
            let mut rng = stream_rng(seed, Stream::Synthetic, 0, 0);
            let h = Array2::from_shape_simple_fn((5, 2), || rng.random_range(-2.0..2.0));
            let mu = Array2::from_shape_simple_fn((3, 2), || rng.random_range(-2.0..2.0));
            let perm = [1usize, 2, 0];
            let mu_p = mu.select(ndarray::Axis(0), &perm);
            let q = soft_assign_values(h.view(), mu.view(), 1.0);
            let qp = soft_assign_values(h.view(), mu_p.view(), 1.0);
            for i in 0..5 {
                for k in 0..3 {
                    prop_assert!((qp[[i, k]] - q[[i, perm[k]]]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn uniform_target_is_fixed_point(n in 1usize..10, k in 1usize..6) {
            let q = Array2::from_elem((n, k), 1.0 / k as f64);
            let p = target_distribution(&q);
            let pp = target_distribution(&p);
            for (a, b) in pp.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
