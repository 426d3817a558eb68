//! Pretraining and the joint optimization loop.

use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::algc::{alignment_loss, clustering_loss, init_centers, pseudo_labels, soft_assign, target_distribution};
use crate::autodiff::{Tape, Var};
use crate::contrastive::{infonce_batch, sample_debiased, sample_uniform, NegativeSampleSet};
use crate::encoder::{gcn_forward, mask_sparse, mlp_predict, GcnParams, GcnVars, MlpParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::graph_io::{build_normalized_adjacency, GraphBundle};
use crate::optim::Adam;
use crate::pest::{incremental_sample, self_training_loss, MedoidTrainingSet, SamplingSchedule};
use crate::rng::{stream_rng, Stream};
use crate::sparse::CsrMatrix;

pub use crate::config::TrainConfig;

const CENTERS: &str = "algc.mu";
/// Pretraining epochs draw negatives and masks from a disjoint epoch range.
const PRETRAIN_EPOCH_BASE: u64 = 1 << 40;

/// `(1/n)Σ L_cl + γ_st·L_st + γ_clus·L_clus + γ_al·L_al`.
pub fn total_loss(l_cl_mean: f64, l_st: f64, l_clus: f64, l_al: f64, gamma_st: f64, gamma_clus: f64, gamma_al: f64) -> Result<f64> {
    for (name, v) in [("l_cl", l_cl_mean), ("l_st", l_st), ("l_clus", l_clus), ("l_al", l_al)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(l_cl_mean + gamma_st * l_st + gamma_clus * l_clus + gamma_al * l_al)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub l_cl: f64,
    pub l_st: f64,
    pub l_clus: f64,
    pub l_al: f64,
    pub total: f64,
}

pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("epoch,l_cl,l_st,l_clus,l_al,total\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.epoch, r.l_cl, r.l_st, r.l_clus, r.l_al, r.total);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Positive pairs plus sampled negatives scored this epoch.
    pub similarity_evaluations: usize,
    pub fallback_anchors: usize,
    pub medoids: usize,
}

/// Everything needed to recompute embeddings and assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub gcn: GcnParams,
    pub mlp: MlpParams,
    pub centers: Array2<f64>,
    pub normalize_similarity: bool,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelState,
    pub optimizer: Adam,
    pub epoch: usize,
    pub schedule: SamplingSchedule,
    pub medoids: MedoidTrainingSet,
    pub history: Vec<LossRecord>,
    pub pretrain_history: Vec<f64>,
    pub epoch_stats: Vec<EpochStats>,
    target: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub embeddings: Array2<f64>,
    pub assignments: Vec<usize>,
    pub soft_assignments: Array2<f64>,
    pub metrics: Option<MetricsReport>,
    pub history: Vec<LossRecord>,
    pub pretrain_history: Vec<f64>,
    pub epoch_stats: Vec<EpochStats>,
    pub medoids: MedoidTrainingSet,
    pub model: ModelState,
}

/// Graph operators shared by every epoch.
pub struct Prepared {
    pub adj: Arc<CsrMatrix>,
    pub features: Arc<CsrMatrix>,
    pub k: usize,
}

impl Prepared {
    pub fn new(bundle: &GraphBundle) -> Self {
        Prepared {
            adj: Arc::new(build_normalized_adjacency(bundle).matrix().clone()),
            features: Arc::new(CsrMatrix::from_dense(bundle.features().view())),
            k: bundle.num_communities(),
        }
    }

    pub fn n(&self) -> usize {
        self.adj.nrows()
    }
}

fn encode(tape: &mut Tape, prep: &Prepared, features: &Arc<CsrMatrix>, vars: &GcnVars, normalize: bool) -> Result<Var> {
    let h = gcn_forward(tape, &prep.adj, features, vars)?;
    Ok(if normalize { tape.row_l2_normalize(h) } else { h })
}

fn contrastive_mean(tape: &mut Tape, z1: Var, z2: Var, negs: &NegativeSampleSet, config: &TrainConfig) -> Result<Var> {
    let per_anchor = infonce_batch(tape, z1, z2, z1, negs, config.tau)?;
    let loss = tape.mean(per_anchor)?;
    if !config.symmetric_contrast {
        return Ok(loss);
    }
    let reverse = infonce_batch(tape, z2, z1, z2, negs, config.tau)?;
    let reverse = tape.mean(reverse)?;
    let both = tape.add(loss, reverse)?;
    Ok(tape.scalar_mul(both, 0.5))
}

fn masked_view(prep: &Prepared, config: &TrainConfig, epoch: u64) -> Result<Arc<CsrMatrix>> {
    let mut rng = stream_rng(config.seed, Stream::Mask, epoch, 0);
    Ok(Arc::new(mask_sparse(&prep.features, config.mask_rate, config.mask_mode, &mut rng)?))
}

/// Detached embeddings for the current encoder weights.
pub fn embed(model: &ModelState, prep: &Prepared) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let vars = model.gcn.bind(&mut tape)?;
    let z = encode(&mut tape, prep, &prep.features, &vars, model.normalize_similarity)?;
    tape.forward()?;
    Ok(tape.value(z)?.clone())
}

fn apply_updates(tape: &Tape, optimizer: &mut Adam, model: &mut ModelState, update_head: bool) -> Result<()> {
    optimizer.begin_step();
    for (l, w) in model.gcn.weights.iter_mut().enumerate() {
        let name = format!("gcn.w{l}");
        let var = tape.var(&name).expect("encoder bound");
        optimizer.update(&name, w, &tape.grad_or_zeros(var))?;
    }
    if !update_head {
        return Ok(());
    }
    let mlp = &mut model.mlp;
    for (name, p) in [
        ("mlp.w1", &mut mlp.w1),
        ("mlp.b1", &mut mlp.b1),
        ("mlp.w2", &mut mlp.w2),
        ("mlp.b2", &mut mlp.b2),
    ] {
        let var = tape.var(name).expect("head bound");
        optimizer.update(name, p, &tape.grad_or_zeros(var))?;
    }
    let var = tape.var(CENTERS).expect("centers bound");
    optimizer.update(CENTERS, &mut model.centers, &tape.grad_or_zeros(var))
}

fn check_inputs(config: &TrainConfig, bundle: &GraphBundle) -> Result<()> {
    config.validate()?;
    if bundle.num_nodes() < bundle.num_communities() {
        return Err(Error::InvalidArgument(format!(
            "{} nodes cannot hold {} communities",
            bundle.num_nodes(),
            bundle.num_communities()
        )));
    }
    Ok(())
}

/// Contrastive-only warm-up with uniform negatives, then K-means centers.
pub fn pretrain(config: &TrainConfig, bundle: &GraphBundle) -> Result<TrainState> {
    check_inputs(config, bundle)?;
    pretrain_prepared(config, &Prepared::new(bundle))
}

pub fn pretrain_prepared(config: &TrainConfig, prep: &Prepared) -> Result<TrainState> {
    let n = prep.n();
    let gcn = GcnParams::glorot(prep.features.ncols(), config.hidden_gcn, config.gcn_layers, config.seed)?;
    let mlp = MlpParams::glorot(gcn.embedding_dim(), config.d, prep.k, config.seed);
    let mut model = ModelState {
        gcn,
        mlp,
        centers: Array2::zeros((prep.k, 0)),
        normalize_similarity: config.normalize_similarity,
    };
    let mut optimizer = Adam::new(config.learning_rate);
    let mut pretrain_history = Vec::with_capacity(config.pretrain_epochs);
    for e in 1..=config.pretrain_epochs {
        let epoch = PRETRAIN_EPOCH_BASE + e as u64;
        let mut tape = Tape::new();
        let vars = model.gcn.bind(&mut tape)?;
        let z1 = encode(&mut tape, prep, &prep.features, &vars, config.normalize_similarity)?;
        let view = masked_view(prep, config, epoch)?;
        let z2 = encode(&mut tape, prep, &view, &vars, config.normalize_similarity)?;
        let negs = sample_uniform(n, config.n_neg, config.seed, epoch);
        let loss = contrastive_mean(&mut tape, z1, z2, &negs, config)?;
        tape.forward()?;
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: e,
                detail: format!("pretraining contrastive loss {value}"),
            });
        }
        tape.backward(loss)?;
        apply_updates(&tape, &mut optimizer, &mut model, false)?;
        pretrain_history.push(value);
    }
    let z = embed(&model, prep)?;
    model.centers = init_centers(z.view(), prep.k, config.seed)?;
    Ok(TrainState {
        model,
        optimizer: Adam::new(config.learning_rate),
        epoch: 0,
        schedule: SamplingSchedule::new(n, config.t),
        medoids: MedoidTrainingSet::default(),
        history: Vec::new(),
        pretrain_history,
        epoch_stats: Vec::new(),
        target: None,
    })
}

impl TrainState {
    /// One joint optimization epoch.
    pub fn step(&mut self, config: &TrainConfig, prep: &Prepared) -> Result<LossRecord> {
        let e = self.epoch + 1;
        let mut tape = Tape::new();
        let gvars = self.model.gcn.bind(&mut tape)?;
        let mvars = self.model.mlp.bind(&mut tape)?;
        let mu = tape.param(CENTERS, self.model.centers.clone())?;
        let z1 = encode(&mut tape, prep, &prep.features, &gvars, config.normalize_similarity)?;

        let q = soft_assign(&mut tape, z1, mu, 1.0)?;
        tape.forward()?;
        let q_now = tape.value(q)?.clone();
        if self.target.is_none() || (e - 1) % config.target_refresh == 0 {
            self.target = Some(target_distribution(&q_now));
        }
        let labels = pseudo_labels(&q_now);
        let negs = sample_debiased(&labels, config.n_neg, config.seed, e as u64);

        if self.schedule.due(e) {
            let z_now = tape.value(z1)?.clone();
            let centers = self.model.centers.view();
            let anchor = if self.medoids.is_empty() { Some(centers) } else { None };
            match incremental_sample(
                &mut self.schedule,
                &mut self.medoids,
                z_now.view(),
                prep.k,
                anchor,
                config.medoid_max_iter,
                config.seed,
            ) {
                Ok(_) => {}
                Err(Error::ScheduleExhausted { remaining, k }) => {
                    log::info!("epoch {e}: medoid schedule exhausted ({remaining} nodes left for {k} communities)");
                }
                Err(err) => return Err(err),
            }
        }

        let view = masked_view(prep, config, e as u64)?;
        let z2 = encode(&mut tape, prep, &view, &gvars, config.normalize_similarity)?;
        let l_cl = contrastive_mean(&mut tape, z1, z2, &negs, config)?;

        let l_st = if self.medoids.is_empty() {
            tape.constant(Array2::zeros((1, 1)))
        } else {
            let rows = tape.gather_rows(z1, self.medoids.nodes())?;
            let pred = mlp_predict(&mut tape, rows, &mvars)?;
            self_training_loss(&mut tape, pred, &self.medoids.labels())?
        };
        let target = self.target.as_ref().expect("target refreshed above");
        let l_clus = clustering_loss(&mut tape, target, q)?;
        let mu_for_head = if config.align_updates_centers {
            mu
        } else {
            tape.constant(self.model.centers.clone())
        };
        let l_al = alignment_loss(&mut tape, mu_for_head, &mvars)?;

        let st = tape.scalar_mul(l_st, config.gamma_st);
        let clus = tape.scalar_mul(l_clus, config.gamma_clus);
        let al = tape.scalar_mul(l_al, config.gamma_al);
        let total = tape.add(l_cl, st)?;
        let total = tape.add(total, clus)?;
        let total = tape.add(total, al)?;
        tape.forward()?;

        let parts = [
            tape.scalar(l_cl)?,
            tape.scalar(l_st)?,
            tape.scalar(l_clus)?,
            tape.scalar(l_al)?,
        ];
        let value = total_loss(parts[0], parts[1], parts[2], parts[3], config.gamma_st, config.gamma_clus, config.gamma_al)
            .map_err(|err| Error::NonFiniteLoss {
                epoch: e,
                detail: err.to_string(),
            })?;
        tape.backward(total)?;
        apply_updates(&tape, &mut self.optimizer, &mut self.model, true)?;

        self.epoch = e;
        let record = LossRecord {
            epoch: e,
            l_cl: parts[0],
            l_st: parts[1],
            l_clus: parts[2],
            l_al: parts[3],
            total: value,
        };
        self.history.push(record);
        self.epoch_stats.push(EpochStats {
            epoch: e,
            similarity_evaluations: negs.similarity_evaluations(),
            fallback_anchors: negs.fallback_anchors,
            medoids: self.medoids.len(),
        });
        Ok(record)
    }

    /// Embeddings, soft assignments and hard labels for the current weights.
    pub fn assign(&self, prep: &Prepared) -> Result<(Array2<f64>, Array2<f64>, Vec<usize>)> {
        let z = embed(&self.model, prep)?;
        let q = crate::algc::soft_assign_values(z.view(), self.model.centers.view(), 1.0);
        let labels = pseudo_labels(&q);
        Ok((z, q, labels))
    }

    pub fn finish(self, prep: &Prepared, bundle: &GraphBundle) -> Result<TrainOutcome> {
        let (embeddings, soft_assignments, assignments) = self.assign(prep)?;
        let metrics = match bundle.labels() {
            Some(truth) => Some(evaluate(&assignments, truth, bundle.edges())?),
            None => None,
        };
        Ok(TrainOutcome {
            embeddings,
            assignments,
            soft_assignments,
            metrics,
            history: self.history,
            pretrain_history: self.pretrain_history,
            epoch_stats: self.epoch_stats,
            medoids: self.medoids,
            model: self.model,
        })
    }
}

/// Pretraining followed by `config.epochs` joint epochs.
pub fn train(config: &TrainConfig, bundle: &GraphBundle) -> Result<TrainOutcome> {
    check_inputs(config, bundle)?;
    let prep = Prepared::new(bundle);
    let mut state = pretrain_prepared(config, &prep)?;
    for _ in 0..config.epochs {
        let r = state.step(config, &prep)?;
        if r.epoch % 50 == 0 {
            log::debug!("epoch {}: total {:.5} (cl {:.5})", r.epoch, r.total, r.l_cl);
        }
    }
    state.finish(&prep, bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{stochastic_block_model, SbmSpec};

    pub(crate) fn small_config() -> TrainConfig {
        TrainConfig::from_toml_str(
            r#"
            epochs = 6
            learning_rate = 0.005
            hidden_gcn = 8
            gcn_layers = 1
            tau = 0.5
            N_neg = 5
            t = 2
            d = 8
            gamma_st = 0.5
            gamma_al = 0.1
            pretrain_epochs = 3
            "#,
            &[],
        )
        .unwrap()
    }

    fn graph(seed: u64) -> GraphBundle {
        stochastic_block_model(&SbmSpec::balanced(40, 2, 0.3, 0.02, 4), seed).unwrap()
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.5, 9.0, 9.0, 9.0, 0.0, 0.0, 0.0).unwrap(), 1.5);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0, 0.5, 0.25, 0.125).unwrap(), 3.25);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn runs_and_records_history() {
        let g = graph(1);
        let cfg = small_config();
        let out = train(&cfg, &g).unwrap();
        assert_eq!(out.history.len(), 6);
        assert_eq!(out.pretrain_history.len(), 3);
        assert_eq!(out.assignments.len(), 40);
        assert!(out.history.iter().all(|r| r.total.is_finite()));
        // Sampling at epochs 2, 4, 6.
        assert_eq!(out.medoids.len(), 6);
        assert!(out.metrics.is_some());
        let csv = loss_history_csv(&out.history);
        assert!(csv.starts_with("epoch,l_cl,l_st,l_clus,l_al,total\n1,"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn deterministic_given_seed() {
        let g = graph(2);
        let cfg = small_config();
        let a = train(&cfg, &g).unwrap();
        let b = train(&cfg, &g).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        let c = train(&TrainConfig { seed: 9, ..cfg }, &g).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn zero_epochs_returns_pretrain_assignments() {
        let g = graph(3);
        let cfg = TrainConfig { epochs: 0, ..small_config() };
        let prep = Prepared::new(&g);
        let state = pretrain_prepared(&cfg, &prep).unwrap();
        let (_, _, labels) = state.assign(&prep).unwrap();
        let out = train(&cfg, &g).unwrap();
        assert_eq!(out.assignments, labels);
        assert!(out.history.is_empty());
    }

    #[test]
    fn zero_pretrain_uses_initial_embeddings() {
        let g = graph(4);
        let cfg = TrainConfig { pretrain_epochs: 0, ..small_config() };
        let prep = Prepared::new(&g);
        let state = pretrain_prepared(&cfg, &prep).unwrap();
        let gcn = GcnParams::glorot(4, 8, 1, cfg.seed).unwrap();
        assert_eq!(state.model.gcn, gcn);
        let z = embed(&state.model, &prep).unwrap();
        assert_eq!(state.model.centers, init_centers(z.view(), 2, cfg.seed).unwrap());
    }

    #[test]
    fn negatives_respect_budget() {
        let g = graph(5);
        let cfg = small_config();
        let out = train(&cfg, &g).unwrap();
        for s in &out.epoch_stats {
            assert!(s.similarity_evaluations <= 40 * (1 + cfg.n_neg));
        }
    }

    #[test]
    fn frozen_weights_keep_head_and_centers_untouched() {
        // With every γ at zero the head and centers see only zero gradients,
        // and Adam leaves parameters with zero gradient where they are.
        let g = graph(6);
        let cfg = TrainConfig {
            gamma_st: 0.0,
            gamma_al: 0.0,
            gamma_clus: 0.0,
            ..small_config()
        };
        let prep = Prepared::new(&g);
        let mut state = pretrain_prepared(&cfg, &prep).unwrap();
        let before = state.model.clone();
        for _ in 0..4 {
            state.step(&cfg, &prep).unwrap();
        }
        assert_eq!(state.model.mlp, before.mlp);
        assert_eq!(state.model.centers, before.centers);
        assert_ne!(state.model.gcn, before.gcn);
        assert!(!state.medoids.is_empty());
    }

    #[test]
    fn rejects_invalid_inputs() {
        let g = graph(7);
        assert!(train(&TrainConfig { tau: 0.0, ..small_config() }, &g).is_err());
        let tiny = stochastic_block_model(&SbmSpec::balanced(2, 2, 0.5, 0.5, 2), 0).unwrap();
        let tiny = GraphBundle::new(
            tiny.node_ids().to_vec(),
            tiny.features().clone(),
            tiny.edges().to_vec(),
            None,
            3,
        )
        .unwrap();
        assert!(train(&small_config(), &tiny).is_err());
    }
}
