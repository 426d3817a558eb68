//! Rectangular linear assignment (Hungarian method, shortest augmenting path).

use ndarray::Array2;

/// Minimum-cost assignment of rows to columns.
///
/// Returns `row_to_col`, where every row gets a distinct column when
/// `rows ≤ cols`; otherwise only `cols` rows are assigned and the rest map to
/// `None`.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<Option<usize>> {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let flipped = min_cost_assignment(&cost.t().to_owned());
        let mut out = vec![None; rows];
        for (c, r) in flipped.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }
    // Potentials-based O(rows² · cols) algorithm; 1-based with a virtual
    // column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut col_owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        col_owner[0] = r;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=cols {
        if col_owner[j] != 0 {
            out[col_owner[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Maximum-weight assignment, via negated costs.
pub fn max_weight_assignment(weight: &Array2<f64>) -> Vec<Option<usize>> {
    min_cost_assignment(&weight.mapv(|w| -w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn total(cost: &Array2<f64>, a: &[Option<usize>]) -> f64 {
        a.iter().enumerate().filter_map(|(r, c)| c.map(|c| cost[[r, c]])).sum()
    }

    fn brute(cost: &Array2<f64>) -> f64 {
        let (rows, cols) = cost.dim();
        let (small, big, t) = if rows <= cols { (rows, cols, false) } else { (cols, rows, true) };
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..big).collect();
        permute(&mut perm, 0, small, &mut |p| {
            let s: f64 = (0..small).map(|i| if t { cost[[p[i], i]] } else { cost[[i, p[i]]] }).sum();
            best = best.min(s);
        });
        best
    }

    fn permute(p: &mut Vec<usize>, k: usize, depth: usize, f: &mut dyn FnMut(&[usize])) {
        if k == depth {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, depth, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn small_square() {
        let c = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let a = min_cost_assignment(&c);
        assert_eq!(total(&c, &a), 5.0);
    }

    #[test]
    fn rectangular_both_ways() {
        let c = array![[1.0, 9.0, 9.0, 0.5], [9.0, 1.0, 9.0, 9.0]];
        let a = min_cost_assignment(&c);
        assert_eq!(a, vec![Some(3), Some(1)]);
        let a = min_cost_assignment(&c.t().to_owned());
        assert_eq!(a, vec![None, Some(1), None, Some(0)]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(rows in 1usize..6, cols in 1usize..6, vals in prop::collection::vec(-10i32..10, 36)) {
            let c = Array2::from_shape_fn((rows, cols), |(i, j)| vals[i * 6 + j] as f64);
            let a = min_cost_assignment(&c);
            let used: Vec<usize> = a.iter().flatten().copied().collect();
            let mut dedup = used.clone();
            dedup.sort();
            dedup.dedup();
            prop_assert_eq!(used.len(), rows.min(cols));
            prop_assert_eq!(dedup.len(), used.len());
            prop_assert!((total(&c, &a) - brute(&c)).abs() < 1e-9);
        }
    }
}
