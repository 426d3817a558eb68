//! Empirical check that repeated normalized propagation collapses every
//! connected component onto a single degree-rescaled vector.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph_io::{normalized_adjacency_from_edges, NormalizedAdjacency};

/// Component labels numbered by smallest contained node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub labels: Vec<usize>,
    pub count: usize,
}

impl Components {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &c) in self.labels.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

pub fn connected_components(n: usize, edges: &[(usize, usize)]) -> Result<Components> {
    let mut parent: Vec<usize> = (0..n).collect();
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(Error::InvalidArgument(format!("edge ({a}, {b}) outside {n} nodes")));
        }
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            // Smaller root wins so roots are component minima.
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut labels = vec![usize::MAX; n];
    let mut root_label = vec![usize::MAX; n];
    let mut count = 0;
    for i in 0..n {
        let r = find(&mut parent, i);
        if root_label[r] == usize::MAX {
            root_label[r] = count;
            count += 1;
        }
        labels[i] = root_label[r];
    }
    Ok(Components { labels, count })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationTrace {
    /// `dispersion[t]` is measured on `H^{(t)}`; entry 0 is the input.
    pub dispersion: Vec<f64>,
    pub components: Components,
    /// First step with dispersion below tolerance, if reached.
    pub converged_at: Option<usize>,
    pub final_h: Array2<f64>,
    /// Kept only when requested, since it costs `max_t · n · p` floats.
    pub history: Option<Vec<Array2<f64>>>,
}

impl PropagationTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,dispersion\n");
        for (t, d) in self.dispersion.iter().enumerate() {
            let _ = writeln!(out, "{t},{d:e}");
        }
        out
    }

    /// Least-squares slope of `ln(dispersion)` against `t` over strictly
    /// positive entries.
    pub fn log_dispersion_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .dispersion
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0.0)
            .map(|(t, &d)| (t as f64, d.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }
}

/// Maximum over components of the largest pairwise row distance of
/// `D̃^{−1/2} H` within that component.
pub fn within_component_dispersion(h: &Array2<f64>, degrees: &[f64], components: &Components) -> f64 {
    let scaled = scale_rows(h, degrees);
    let mut worst = 0.0f64;
    for members in components.members() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                let d: f64 = scaled
                    .row(i)
                    .iter()
                    .zip(scaled.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                worst = worst.max(d.sqrt());
            }
        }
    }
    worst
}

fn scale_rows(h: &Array2<f64>, degrees: &[f64]) -> Array2<f64> {
    let mut out = h.clone();
    for (mut row, d) in out.rows_mut().into_iter().zip(degrees) {
        row /= d.sqrt();
    }
    out
}

/// `D̃^{−1/2} H`, the matrix whose rows become constant per component.
pub fn degree_rescaled(h: &Array2<f64>, adj: &NormalizedAdjacency) -> Array2<f64> {
    scale_rows(h, adj.degrees())
}

/// `X · R` for a seeded Gaussian `R` with `dim` columns, a cheap starting
/// point for large feature matrices.
pub fn random_projection(x: &Array2<f64>, dim: usize, seed: u64) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Synthetic, 4, 0);
    let r = Array2::from_shape_simple_fn((x.ncols(), dim), || StandardNormal.sample(&mut rng));
    x.dot(&r)
}

/// Iterates `H ← Â H` until within-component dispersion drops below `tol`
/// or `max_t` steps have run.
pub fn propagation_convergence(
    n: usize,
    edges: &[(usize, usize)],
    h0: &Array2<f64>,
    tol: f64,
    max_t: usize,
    keep_history: bool,
) -> Result<PropagationTrace> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    if h0.nrows() != n {
        return Err(Error::InvalidArgument(format!("H0 has {} rows for {n} nodes", h0.nrows())));
    }
    let components = connected_components(n, edges)?;
    let adj = normalized_adjacency_from_edges(n, edges);
    let mut h = h0.clone();
    let mut history = keep_history.then(|| vec![h.clone()]);
    let mut dispersion = vec![within_component_dispersion(&h, adj.degrees(), &components)];
    let mut converged_at = (dispersion[0] < tol).then_some(0);
    let mut t = 0;
    while converged_at.is_none() && t < max_t {
        h = adj.matrix().mul_dense(h.view());
        t += 1;
        let d = within_component_dispersion(&h, adj.degrees(), &components);
        dispersion.push(d);
        if let Some(hist) = history.as_mut() {
            hist.push(h.clone());
        }
        if d < tol {
            converged_at = Some(t);
        }
    }
    Ok(PropagationTrace {
        dispersion,
        components,
        converged_at,
        final_h: h,
        history,
    })
}
