//! GCN encoder, MLP prediction head and feature masking.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Weights of a stack of graph convolutions `H' = φ(Â·H·W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub weights: Vec<Array2<f64>>,
    pub activation: Activation,
}

/// Two-layer perceptron `softmax(relu(H·W1 + b1)·W2 + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..=limit))
}

impl GcnParams {
    pub fn glorot(input_dim: usize, hidden: usize, layers: usize, seed: u64) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument("GCN needs at least one layer".into()));
        }
        let mut rng = stream_rng(seed, Stream::Init, 0, 0);
        let weights = (0..layers)
            .map(|l| glorot(if l == 0 { input_dim } else { hidden }, hidden, &mut rng))
            .collect();
        Ok(GcnParams {
            weights,
            activation: Activation::Relu,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.ncols())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<GcnVars> {
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(l, w)| tape.param(&format!("gcn.w{l}"), w.clone()))
            .collect::<Result<_>>()?;
        Ok(GcnVars {
            weights,
            activation: self.activation,
        })
    }
}

impl MlpParams {
    pub fn glorot(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Init, 1, 0);
        MlpParams {
            w1: glorot(input_dim, hidden, &mut rng),
            b1: Array2::zeros((1, hidden)),
            w2: glorot(hidden, classes, &mut rng),
            b2: Array2::zeros((1, classes)),
        }
    }

    pub fn classes(&self) -> usize {
        self.w2.ncols()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<MlpVars> {
        Ok(MlpVars {
            w1: tape.param("mlp.w1", self.w1.clone())?,
            b1: tape.param("mlp.b1", self.b1.clone())?,
            w2: tape.param("mlp.w2", self.w2.clone())?,
            b2: tape.param("mlp.b2", self.b2.clone())?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GcnVars {
    pub weights: Vec<Var>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Records `H = φ(Â · X · W₀)` followed by any further layers.
///
/// `features` is a constant sparse operand, so masked views cost nothing
/// beyond dropping stored entries.
pub fn gcn_forward(tape: &mut Tape, adj: &Arc<CsrMatrix>, features: &Arc<CsrMatrix>, params: &GcnVars) -> Result<Var> {
    if adj.nrows() != features.nrows() {
        return Err(Error::Shape {
            node: tape.len(),
            op: "gcn_forward",
            detail: format!("adjacency {:?} vs features {:?}", adj.shape(), features.shape()),
        });
    }
    let mut h: Option<Var> = None;
    for &w in &params.weights {
        let xw = match h {
            None => tape.sparse_matmul(features.clone(), w)?,
            Some(h) => tape.matmul(h, w)?,
        };
        let z = tape.sparse_matmul(adj.clone(), xw)?;
        h = Some(match params.activation {
            Activation::Relu => tape.relu(z),
            Activation::Identity => z,
        });
    }
    h.ok_or_else(|| Error::InvalidArgument("GCN has no layers".into()))
}

/// Pre-softmax scores of the prediction head.
pub fn mlp_logits(tape: &mut Tape, h: Var, params: &MlpVars) -> Result<Var> {
    let a = tape.matmul(h, params.w1)?;
    let a = tape.add_row(a, params.b1)?;
    let a = tape.relu(a);
    let z = tape.matmul(a, params.w2)?;
    tape.add_row(z, params.b2)
}

/// Row-stochastic predictions `Ŷ` for the rows of `h`.
pub fn mlp_predict(tape: &mut Tape, h: Var, params: &MlpVars) -> Result<Var> {
    if tape.shape(h).0 == 0 {
        return Err(Error::InvalidArgument("mlp_predict needs at least one row".into()));
    }
    let z = mlp_logits(tape, h, params)?;
    Ok(tape.row_softmax(z))
}

/// How feature masking draws its zero pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// One Bernoulli draw per feature column, shared by every node.
    #[default]
    Columns,
    /// An independent draw for every (node, feature) entry.
    Entries,
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("mask rate {rate} outside [0, 1]")));
    }
    Ok(())
}

/// Draws which of `k` columns to zero; each is masked with probability `rate`.
pub fn draw_column_mask<R: Rng>(k: usize, rate: f64, rng: &mut R) -> Result<Vec<bool>> {
    check_rate(rate)?;
    Ok((0..k).map(|_| rng.random::<f64>() < rate).collect())
}

/// Column-masked copy of `x`, deterministic in `seed`.
pub fn mask_features(x: &Array2<f64>, rate: f64, seed: u64) -> Result<Array2<f64>> {
    let mut rng = stream_rng(seed, Stream::Mask, 0, 0);
    let mask = draw_column_mask(x.ncols(), rate, &mut rng)?;
    let mut out = x.clone();
    for (mut col, &m) in out.columns_mut().into_iter().zip(&mask) {
        if m {
            col.fill(0.0);
        }
    }
    Ok(out)
}

/// Masked view of sparse features for one epoch.
pub fn mask_sparse<R: Rng>(x: &CsrMatrix, rate: f64, mode: MaskMode, rng: &mut R) -> Result<CsrMatrix> {
    check_rate(rate)?;
    Ok(match mode {
        MaskMode::Columns => x.without_columns(&draw_column_mask(x.ncols(), rate, rng)?),
        MaskMode::Entries => {
            let kept = x
                .iter()
                .filter(|_| rng.random::<f64>() >= rate)
                .collect::<Vec<_>>();
            CsrMatrix::from_triplets(x.nrows(), x.ncols(), kept)
        }
    })
}
