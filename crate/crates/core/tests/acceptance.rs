//! Acceptance report: one line per criterion.
//!
//! Criteria that need the citation benchmarks look under `$CEGCL_DATA_DIR`
//! (default `<workspace>/data`) for `cora/`, `citeseer/` and `pubmed/`, each
//! holding raw or canonical files readable by `load_dataset_dir`. Missing
//! data yields BLOCKED; set `CEGCL_REQUIRE_DATA=1` to count that as failure.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cegcl::algc::{alignment_loss, clustering_loss, pseudo_labels, soft_assign, target_distribution};
use cegcl::autodiff::{finite_difference_check, Tape, Var};
use cegcl::contrastive::{infonce_batch, sample_debiased};
use cegcl::encoder::{gcn_forward, mask_sparse, mlp_predict, GcnParams, MaskMode, MlpParams};
use cegcl::eval::{accuracy_hungarian, ari, modularity, MetricsReport};
use cegcl::graph_io::{load_dataset_dir, normalized_adjacency_from_edges};
use cegcl::pest::self_training_loss;
use cegcl::rng::{stream_rng, Stream};
use cegcl::sparse::CsrMatrix;
use cegcl::synthetic::{random_connected_graph, stochastic_block_model, SbmSpec};
use cegcl::theory::{degree_rescaled, propagation_convergence};
use cegcl::trainer::train;
use cegcl::{GraphBundle, TrainConfig};
use ndarray::Array2;
use rand::Rng;

const CORA: &str = include_str!("../../../configs/cora.toml");
const CITESEER: &str = include_str!("../../../configs/citeseer.toml");
const PUBMED: &str = include_str!("../../../configs/pubmed.toml");
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

enum Verdict {
    Pass(String),
    Fail(String),
    Blocked(String),
}

type Outcome = Result<Verdict, String>;
type Check = Box<dyn FnOnce(&mut Benchmarks) -> Outcome>;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- gradients

struct Instance {
    adj: Arc<CsrMatrix>,
    x: Arc<CsrMatrix>,
    x_masked: Arc<CsrMatrix>,
    gcn: GcnParams,
    mlp: MlpParams,
    mu: Array2<f64>,
}

fn instance(seed: u64, layers: usize) -> Result<Instance, String> {
    let n = 10;
    let edges = random_connected_graph(n, 0.3, seed);
    let adj = Arc::new(normalized_adjacency_from_edges(n, &edges).matrix().clone());
    let mut rng = stream_rng(seed, Stream::Synthetic, 100, 0);
    let x = Array2::from_shape_simple_fn((n, 6), || rng.random_range(-1.0..1.0));
    let x = CsrMatrix::from_dense(x.view());
    let x_masked = mask_sparse(&x, 0.3, MaskMode::Columns, &mut rng).map_err(e)?;
    Ok(Instance {
        adj,
        x: Arc::new(x),
        x_masked: Arc::new(x_masked),
        gcn: GcnParams::glorot(6, 5, layers, seed).map_err(e)?,
        mlp: MlpParams::glorot(5, 4, 3, seed),
        mu: Array2::from_shape_simple_fn((3, 5), || rng.random_range(-0.6..0.6)),
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Loss {
    Encoder,
    Contrastive,
    SelfTraining,
    Clustering,
    Alignment,
    Joint,
}

/// Records one loss on a fresh tape; returns the tape and the loss node.
fn build(inst: &Instance, which: Loss, seed: u64) -> Result<(Tape, Var), String> {
    let mut t = Tape::new();
    let g = inst.gcn.bind(&mut t).map_err(e)?;
    let m = inst.mlp.bind(&mut t).map_err(e)?;
    let mu = t.param("mu", inst.mu.clone()).map_err(e)?;
    let h1 = gcn_forward(&mut t, &inst.adj, &inst.x, &g).map_err(e)?;
    if which == Loss::Encoder {
        let mut rng = stream_rng(seed, Stream::Synthetic, 101, 0);
        let (n, d) = t.shape(h1);
        let c = t.constant(Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0)));
        let sq = t.square(h1);
        let prod = t.elementwise_mul(sq, c).map_err(e)?;
        let s = t.sum(prod);
        return Ok((t, s));
    }
    let z1 = t.row_l2_normalize(h1);
    let h2 = gcn_forward(&mut t, &inst.adj, &inst.x_masked, &g).map_err(e)?;
    let z2 = t.row_l2_normalize(h2);
    let q = soft_assign(&mut t, z1, mu, 1.0).map_err(e)?;
    t.forward().map_err(e)?;
    let q_now = t.value(q).map_err(e)?.clone();
    let p = target_distribution(&q_now);
    let negs = sample_debiased(&pseudo_labels(&q_now), 4, seed, 1);

    let per_anchor = infonce_batch(&mut t, z1, z2, z1, &negs, 0.5).map_err(e)?;
    let l_cl = t.mean(per_anchor).map_err(e)?;
    let rows = t.gather_rows(z1, vec![0, 4, 7]).map_err(e)?;
    let pred = mlp_predict(&mut t, rows, &m).map_err(e)?;
    let l_st = self_training_loss(&mut t, pred, &[0, 1, 2]).map_err(e)?;
    let l_clus = clustering_loss(&mut t, &p, q).map_err(e)?;
    let l_al = alignment_loss(&mut t, mu, &m).map_err(e)?;
    let loss = match which {
        Loss::Contrastive => l_cl,
        Loss::SelfTraining => l_st,
        Loss::Clustering => l_clus,
        Loss::Alignment => l_al,
        _ => {
            let st = t.scalar_mul(l_st, 0.5);
            let al = t.scalar_mul(l_al, 0.3);
            let total = t.add(l_cl, st).map_err(e)?;
            let total = t.add(total, l_clus).map_err(e)?;
            t.add(total, al).map_err(e)?
        }
    };
    Ok((t, loss))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let losses = [
        ("encoder", Loss::Encoder),
        ("contrastive", Loss::Contrastive),
        ("self-training", Loss::SelfTraining),
        ("clustering", Loss::Clustering),
        ("alignment", Loss::Alignment),
        ("joint", Loss::Joint),
    ];
    let mut worst = Vec::new();
    let mut all_ok = true;
    for (name, which) in losses {
        let (mut max_err, mut checked, mut skipped) = (0.0f64, 0, 0);
        for seed in SEEDS {
            let layers = if which == Loss::Encoder { 2 } else { 1 };
            let inst = instance(seed, layers)?;
            let (mut tape, loss) = build(&inst, which, seed)?;
            let names = tape.param_names();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let report = finite_difference_check(&mut tape, loss, &names, 1e-6).map_err(e)?;
            max_err = max_err.max(report.max_rel_error);
            checked += report.checked;
            skipped += report.skipped.len();
        }
        all_ok &= max_err < 1e-4 && checked > 0;
        worst.push(format!("{name} {max_err:.1e} ({checked} entries, {skipped} at kinks)"));
    }
    let elapsed = start.elapsed();
    Ok(verdict(
        all_ok && elapsed < Duration::from_secs(60),
        format!("max rel error: {}; {:.1}s", worst.join(", "), elapsed.as_secs_f64()),
    ))
}

// ---------------------------------------------------------------- metrics

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    permutations(k)
        .iter()
        .map(|perm| pred.iter().zip(truth).filter(|(p, t)| perm[**p] == **t).count())
        .max()
        .unwrap_or(0) as f64
        / pred.len() as f64
}

fn pair_counting_ari(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len();
    let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            match (pred[i] == pred[j], truth[i] == truth[j]) {
                (true, true) => a += 1.0,
                (true, false) => b += 1.0,
                (false, true) => c += 1.0,
                (false, false) => d += 1.0,
            }
        }
    }
    let total: f64 = a + b + c + d;
    let expected = (a + b) * (a + c) / total;
    let max = 0.5 * ((a + b) + (a + c));
    if max == expected {
        return 1.0;
    }
    (a - expected) / (max - expected)
}

fn metric_oracles() -> Outcome {
    let mut rng = stream_rng(2024, Stream::Synthetic, 102, 0);
    let (mut acc_bad, mut ari_bad) = (0, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(1..=30);
        let k = rng.random_range(1..=6);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (acc, _) = accuracy_hungarian(&pred, &truth).map_err(e)?;
        if (acc - brute_force_accuracy(&pred, &truth, k)).abs() > 1e-12 {
            acc_bad += 1;
        }
        if n >= 2 {
            ari_bad = ari_bad.max((ari(&pred, &truth).map_err(e)? - pair_counting_ari(&pred, &truth)).abs());
        }
    }
    let triangles = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)];
    let q = modularity(&triangles, &[0, 0, 0, 1, 1, 1]).map_err(e)?;
    Ok(verdict(
        acc_bad == 0 && ari_bad < 1e-9 && q == 0.5,
        format!("accuracy mismatches {acc_bad}/200, max ARI gap {ari_bad:.1e}, two-triangle modularity {q}"),
    ))
}

// ---------------------------------------------------------------- synthetic

const SBM_CONFIG: &str = r#"
epochs = 200
learning_rate = 0.001
hidden_gcn = 32
gcn_layers = 1
tau = 0.5
N_neg = 10
t = 20
d = 32
gamma_st = 0.01
gamma_al = 0.001
pretrain_epochs = 100
"#;

fn synthetic_recovery() -> Outcome {
    let start = Instant::now();
    let mut accs = Vec::new();
    for seed in SEEDS {
        let spec = SbmSpec::balanced(400, 4, 0.1, 0.01, 16);
        let g = stochastic_block_model(&spec, seed).map_err(e)?;
        let config = TrainConfig::from_toml_str(SBM_CONFIG, &[format!("seed={seed}")]).map_err(e)?;
        let out = train(&config, &g).map_err(e)?;
        accs.push(out.metrics.ok_or("no metrics")?.acc);
    }
    let elapsed = start.elapsed();
    let med = median(accs.clone());
    let listed: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    Ok(verdict(
        med >= 0.95 && elapsed < Duration::from_secs(300),
        format!("median ACC {med:.3} [{}]; {:.1}s", listed.join(", "), elapsed.as_secs_f64()),
    ))
}

// ---------------------------------------------------------------- benchmarks

fn data_root() -> PathBuf {
    std::env::var_os("CEGCL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let workspace = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).expect("workspace root");
            workspace.join("data")
        })
}

fn dataset(name: &str) -> Result<Option<GraphBundle>, String> {
    let dir = data_root().join(name);
    if !dir.is_dir() {
        return Ok(None);
    }
    Ok(Some(load_dataset_dir(&dir).map_err(e)?.0))
}

fn blocked(name: &str) -> Verdict {
    Verdict::Blocked(format!("dataset not found at {}", data_root().join(name).display()))
}

fn run_seeds(config: &str, overrides: &[&str], g: &GraphBundle) -> Result<Vec<MetricsReport>, String> {
    SEEDS
        .iter()
        .map(|seed| {
            let mut ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
            ov.push(format!("seed={seed}"));
            let config = TrainConfig::from_toml_str(config, &ov).map_err(e)?;
            let out = train(&config, g).map_err(e)?;
            out.metrics.ok_or_else(|| "dataset has no labels".to_string())
        })
        .collect()
}

/// Runs shared between criteria, computed on first use.
#[derive(Default)]
struct Benchmarks {
    cora: Option<Option<GraphBundle>>,
    citeseer: Option<Option<GraphBundle>>,
    cora_full: Option<Vec<MetricsReport>>,
    citeseer_full: Option<Vec<MetricsReport>>,
}

impl Benchmarks {
    fn cora(&mut self) -> Result<Option<&GraphBundle>, String> {
        if self.cora.is_none() {
            self.cora = Some(dataset("cora")?);
        }
        Ok(self.cora.as_ref().unwrap().as_ref())
    }

    fn citeseer(&mut self) -> Result<Option<&GraphBundle>, String> {
        if self.citeseer.is_none() {
            self.citeseer = Some(dataset("citeseer")?);
        }
        Ok(self.citeseer.as_ref().unwrap().as_ref())
    }

    fn cora_full(&mut self) -> Result<Option<Vec<MetricsReport>>, String> {
        if self.cora_full.is_none() {
            let Some(g) = self.cora()?.cloned() else { return Ok(None) };
            self.cora_full = Some(run_seeds(CORA, &[], &g)?);
        }
        Ok(self.cora_full.clone())
    }

    fn citeseer_full(&mut self) -> Result<Option<Vec<MetricsReport>>, String> {
        if self.citeseer_full.is_none() {
            let Some(g) = self.citeseer()?.cloned() else { return Ok(None) };
            self.citeseer_full = Some(run_seeds(CITESEER, &[], &g)?);
        }
        Ok(self.citeseer_full.clone())
    }
}

fn pick(runs: &[MetricsReport], f: impl Fn(&MetricsReport) -> f64) -> Vec<f64> {
    runs.iter().map(f).collect()
}

fn cora_reproduction(b: &mut Benchmarks) -> Outcome {
    let Some(runs) = b.cora_full()? else { return Ok(blocked("cora")) };
    let (acc, nmi, ari) = (
        median(pick(&runs, |m| m.acc)),
        median(pick(&runs, |m| m.nmi)),
        median(pick(&runs, |m| m.ari)),
    );
    Ok(verdict(
        acc >= 0.70 && nmi >= 0.50 && ari >= 0.45,
        format!("median ACC {acc:.3}, NMI {nmi:.3}, ARI {ari:.3}"),
    ))
}

fn citeseer_reproduction(b: &mut Benchmarks) -> Outcome {
    let Some(runs) = b.citeseer_full()? else { return Ok(blocked("citeseer")) };
    let (acc, nmi) = (median(pick(&runs, |m| m.acc)), median(pick(&runs, |m| m.nmi)));
    Ok(verdict(acc >= 0.62 && nmi >= 0.38, format!("median ACC {acc:.3}, NMI {nmi:.3}")))
}

fn ablation_ordering(b: &mut Benchmarks) -> Outcome {
    let Some(full) = b.cora_full()? else { return Ok(blocked("cora")) };
    let g = b.cora()?.cloned().expect("loaded with the full runs");
    let mean_acc = |runs: &[MetricsReport]| mean(&pick(runs, |m| m.acc));
    let full = mean_acc(&full);
    let no_al = mean_acc(&run_seeds(CORA, &["gamma_al=0.0"], &g)?);
    let no_st = mean_acc(&run_seeds(CORA, &["gamma_st=0.0"], &g)?);
    let no_both = mean_acc(&run_seeds(CORA, &["gamma_al=0.0", "gamma_st=0.0"], &g)?);
    let tie = 0.005;
    let ok = full >= no_al - tie && full >= no_st - tie && no_al >= no_both - tie && no_st >= no_both - tie;
    Ok(verdict(
        ok,
        format!("mean ACC full {full:.3}, w/o align {no_al:.3}, w/o self-training {no_st:.3}, w/o both {no_both:.3}"),
    ))
}

fn medoid_compactness(b: &mut Benchmarks) -> Outcome {
    let Some(with_st) = b.citeseer_full()? else { return Ok(blocked("citeseer")) };
    let g = b.citeseer()?.cloned().expect("loaded with the full runs");
    let without = run_seeds(CITESEER, &["gamma_st=0.0"], &g)?;
    let (a, z) = (median(pick(&with_st, |m| m.modularity)), median(pick(&without, |m| m.modularity)));
    Ok(verdict(a >= z, format!("median modularity with self-training {a:.4}, without {z:.4}")))
}

fn smallest_class_retained(m: &MetricsReport) -> f64 {
    let (c, &size) = m
        .true_counts
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0)
        .min_by_key(|(_, &s)| s)
        .expect("non-empty truth");
    m.per_community_counts[c] as f64 / size as f64
}

fn negative_budget_robustness(b: &mut Benchmarks) -> Outcome {
    let Some(g) = b.citeseer()?.cloned() else { return Ok(blocked("citeseer")) };
    let few = run_seeds(CITESEER, &["N_neg=50"], &g)?;
    let many = run_seeds(CITESEER, &["N_neg=1500"], &g)?;
    let (f1_few, f1_many) = (median(pick(&few, |m| m.micro_f1)), median(pick(&many, |m| m.micro_f1)));
    let (keep_few, keep_many) = (
        median(pick(&few, smallest_class_retained)),
        median(pick(&many, smallest_class_retained)),
    );
    Ok(verdict(
        f1_few - f1_many <= 0.05 && keep_few >= 0.2 && keep_many >= 0.2,
        format!(
            "micro-F1 {f1_few:.3} -> {f1_many:.3}; smallest class retained {keep_few:.2} / {keep_many:.2}"
        ),
    ))
}

// ---------------------------------------------------------------- scaling

fn similarity_scaling() -> Outcome {
    let sizes = [500usize, 1000, 2000];
    let config = TrainConfig::from_toml_str(
        SBM_CONFIG,
        &["epochs=3".into(), "pretrain_epochs=0".into(), "hidden_gcn=16".into(), "d=16".into()],
    )
    .map_err(e)?;
    let mut points = Vec::new();
    for &n in &sizes {
        let g = stochastic_block_model(&SbmSpec::balanced(n, 4, 0.02, 0.002, 16), 0).map_err(e)?;
        let out = train(&config, &g).map_err(e)?;
        let evals: Vec<f64> = out.epoch_stats.iter().map(|s| s.similarity_evaluations as f64).collect();
        points.push(((n as f64).ln(), mean(&evals).ln(), mean(&evals)));
    }
    let mx = mean(&points.iter().map(|p| p.0).collect::<Vec<_>>());
    let my = mean(&points.iter().map(|p| p.1).collect::<Vec<_>>());
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let counts: Vec<String> = sizes.iter().zip(&points).map(|(n, p)| format!("n={n}: {:.0}", p.2)).collect();
    Ok(verdict(
        (0.8..=1.2).contains(&slope),
        format!("log-log slope {slope:.3} ({})", counts.join(", ")),
    ))
}

// ---------------------------------------------------------------- propagation

fn propagation_theory() -> Outcome {
    let n = 20;
    let edges = random_connected_graph(n, 0.15, 7);
    let mut rng = stream_rng(7, Stream::Synthetic, 103, 0);
    let h0 = Array2::from_shape_simple_fn((n, 4), || rng.random_range(-1.0..1.0));
    let trace = propagation_convergence(n, &edges, &h0, 1e-6, 500, false).map_err(e)?;
    let slope = trace.log_dispersion_slope().unwrap_or(f64::NAN);
    let connected_ok = trace.components.count == 1 && trace.converged_at.is_some() && slope < 0.0;

    // Two separate components: each flattens, but they stay distinct.
    let mut split: Vec<(usize, usize)> = random_connected_graph(10, 0.3, 8);
    split.extend(random_connected_graph(10, 0.3, 9).into_iter().map(|(a, b)| (a + 10, b + 10)));
    let control = propagation_convergence(n, &split, &h0, 1e-6, 500, false).map_err(e)?;
    let scaled = degree_rescaled(&control.final_h, &normalized_adjacency_from_edges(n, &split));
    let gap: f64 = scaled
        .row(0)
        .iter()
        .zip(scaled.row(10))
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let control_ok = control.components.count == 2 && control.converged_at.is_some() && gap > 1e-3;
    Ok(verdict(
        connected_ok && control_ok,
        format!(
            "connected: dispersion < 1e-6 at t={:?}, slope {slope:.3}; two components: converged at t={:?}, gap {gap:.3}",
            trace.converged_at, control.converged_at
        ),
    ))
}

fn pubmed_smoke() -> Outcome {
    let Some(g) = dataset("pubmed")? else { return Ok(blocked("pubmed")) };
    let sub = g.sample_nodes(2000.min(g.num_nodes()), 0).map_err(e)?;
    let config = TrainConfig::from_toml_str(PUBMED, &[]).map_err(e)?;
    let out = train(&config, &sub).map_err(e)?;
    let finite = out.history.iter().all(|r| r.total.is_finite()) && out.pretrain_history.iter().all(|l| l.is_finite());
    let m = out.metrics.ok_or("no metrics")?;
    Ok(verdict(
        finite && m.acc.is_finite() && m.nmi.is_finite(),
        format!("{} nodes, final loss {:?}, ACC {:.3}", sub.num_nodes(), out.history.last().map(|r| r.total), m.acc),
    ))
}

fn main() {
    let require_data = std::env::var("CEGCL_REQUIRE_DATA").is_ok_and(|v| v == "1");
    let mut bench = Benchmarks::default();
    let criteria: Vec<(&str, Check)> = vec![
        ("1 gradient suite", Box::new(|_| gradient_suite())),
        ("2 metric oracles", Box::new(|_| metric_oracles())),
        ("3 synthetic recovery", Box::new(|_| synthetic_recovery())),
        ("4 cora reproduction", Box::new(cora_reproduction)),
        ("5 citeseer reproduction", Box::new(citeseer_reproduction)),
        ("6 ablation ordering", Box::new(ablation_ordering)),
        ("7 medoid compactness", Box::new(medoid_compactness)),
        ("8 negative budget robustness", Box::new(negative_budget_robustness)),
        ("9 similarity evaluation scaling", Box::new(|_| similarity_scaling())),
        ("10 propagation convergence", Box::new(|_| propagation_theory())),
        ("pubmed subsample smoke run", Box::new(|_| pubmed_smoke())),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let line = match check(&mut bench) {
            Ok(Verdict::Pass(d)) => format!("PASS    {name}: {d}"),
            Ok(Verdict::Fail(d)) => {
                failed += 1;
                format!("FAIL    {name}: {d}")
            }
            Ok(Verdict::Blocked(d)) => {
                if require_data {
                    failed += 1;
                }
                format!("BLOCKED {name}: {d}")
            }
            Err(err) => {
                failed += 1;
                format!("FAIL    {name}: error: {err}")
            }
        };
        println!("{line}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
