//! Seeded synthetic graphs with planted communities.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph_io::GraphBundle;
use crate::rng::{stream_rng, Stream};

/// Stochastic block model with noisy block-indicator features.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmSpec {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    /// Split evenly across blocks; must be a multiple of the block count.
    pub feature_dim: usize,
    pub signal: f64,
    pub noise_std: f64,
}

impl SbmSpec {
    pub fn balanced(n: usize, blocks: usize, p_in: f64, p_out: f64, feature_dim: usize) -> Self {
        let base = n / blocks;
        let block_sizes = (0..blocks).map(|b| base + usize::from(b < n % blocks)).collect();
        SbmSpec {
            block_sizes,
            p_in,
            p_out,
            feature_dim,
            signal: 1.0,
            noise_std: 1.0,
        }
    }
}

pub fn stochastic_block_model(spec: &SbmSpec, seed: u64) -> Result<GraphBundle> {
    let k = spec.block_sizes.len();
    if k == 0 || spec.feature_dim % k != 0 || spec.feature_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "feature_dim {} must be a positive multiple of {k} blocks",
            spec.feature_dim
        )));
    }
    for p in [spec.p_in, spec.p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("edge probability {p} outside [0, 1]")));
        }
    }
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::InvalidArgument(format!("noise_std {}: {e}", spec.noise_std)))?;
    let labels: Vec<usize> = spec
        .block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    let n = labels.len();

    let mut rng = stream_rng(seed, Stream::Synthetic, 0, 0);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let width = spec.feature_dim / k;
    let mut rng = stream_rng(seed, Stream::Synthetic, 1, 0);
    let features = Array2::from_shape_fn((n, spec.feature_dim), |(i, c)| {
        let indicator = if c / width == labels[i] { spec.signal } else { 0.0 };
        indicator + noise.sample(&mut rng)
    });
    let ids = (0..n).map(|i| format!("n{i}")).collect();
    GraphBundle::new(ids, features, edges, Some(labels), k)
}

/// Random connected graph: a random spanning tree plus independent extra
/// edges with probability `p`.
pub fn random_connected_graph(n: usize, p: f64, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = stream_rng(seed, Stream::Synthetic, 2, 0);
    let mut edges = std::collections::BTreeSet::new();
    for i in 1..n {
        let j = rng.random_range(0..i);
        edges.insert((j, i));
    }
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.insert((i, j));
            }
        }
    }
    edges.into_iter().collect()
}
