//! `cegcl` command-line driver.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use cegcl::eval::{evaluate, format_assignments, parse_assignments, MetricsReport};
use cegcl::graph_io::{load_dataset_dir, GraphBundle, LoadReport};
use cegcl::theory::{propagation_convergence, random_projection};
use cegcl::trainer::{embed, loss_history_csv, train, ModelState, Prepared, TrainConfig, TrainOutcome};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

mod manifest;

pub use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "cegcl", version, about = "Community detection with contrastive graph clustering")]
struct Cli {
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "out")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a dataset and write assignments, metrics, losses and embeddings.
    Train(TrainArgs),
    /// Score an assignments file against the dataset labels.
    Eval(EvalArgs),
    /// Retrain with loss terms removed, one run per non-empty subset.
    Ablate(AblateArgs),
    /// Retrain once per value of one config field.
    Sweep(SweepArgs),
    /// Check that propagation collapses each connected component.
    TheoryCheck(TheoryArgs),
    /// Recompute embeddings from a saved model.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset directory (LINQS, PubMed tab files, or a canonical bundle).
    #[arg(long)]
    data: PathBuf,
    /// Work on a seeded random subset of this many nodes.
    #[arg(long)]
    subsample: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML or JSON config.
    #[arg(long)]
    config: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seeds to run; defaults to the config's seed.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `node_id<TAB>community` file.
    #[arg(long)]
    assignments: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Loss terms to remove: any of st, al, clus.
    #[arg(long, value_delimiter = ',', required = true)]
    drop: Vec<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Config field to vary.
    #[arg(long)]
    param: String,
    /// Comma-separated values, each parsed like a `--set` value.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
}

#[derive(Args, Debug)]
struct TheoryArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_t: usize,
    /// Columns of the random projection used as the starting matrix.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `model.json` written by `train`.
    #[arg(long)]
    model: PathBuf,
}

/// Raised for bad flag values that clap cannot check.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<cegcl::Error>(), Some(cegcl::Error::Config(_)));
            if is_usage {
                1
            } else {
                2
            }
        }
    }
}

fn execute(cli: Cli, argv: Vec<String>) -> anyhow::Result<()> {
    let root = cli.out_root;
    match cli.command {
        Command::Train(a) => cmd_train(&root, argv, a),
        Command::Eval(a) => cmd_eval(&root, argv, a),
        Command::Ablate(a) => cmd_ablate(&root, argv, a),
        Command::Sweep(a) => cmd_sweep(&root, argv, a),
        Command::TheoryCheck(a) => cmd_theory(&root, argv, a),
        Command::ExportEmbeddings(a) => cmd_export(&root, argv, a),
    }
}

struct Dataset {
    bundle: GraphBundle,
    report: LoadReport,
    files: Vec<PathBuf>,
}

fn load_data(args: &DataArgs) -> anyhow::Result<Dataset> {
    if !args.data.is_dir() {
        bail!("dataset directory {} not found", args.data.display());
    }
    let (mut bundle, report) =
        load_dataset_dir(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    if let Some(count) = args.subsample {
        bundle = bundle.sample_nodes(count, 0)?;
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&args.data)
        .with_context(|| format!("listing {}", args.data.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(Dataset { bundle, report, files })
}

fn load_config(args: &ConfigArgs, extra: &[String]) -> anyhow::Result<TrainConfig> {
    if !args.config.is_file() {
        bail!("config file {} not found", args.config.display());
    }
    let mut overrides = args.set.clone();
    overrides.extend_from_slice(extra);
    Ok(TrainConfig::load(&args.config, &overrides)?)
}

fn seeds_for(args: &ConfigArgs, config: &TrainConfig) -> Vec<u64> {
    if args.seed.is_empty() {
        vec![config.seed]
    } else {
        args.seed.clone()
    }
}

/// SHA-256 over the command, the argument list and every input file.
fn input_hash(command: &str, argv: &[String], files: &[PathBuf], config: Option<&TrainConfig>) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    for a in argv {
        h.update(b"\0");
        h.update(a.as_bytes());
    }
    if let Some(c) = config {
        h.update(c.to_toml().as_bytes());
    }
    for f in files {
        h.update(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        h.update(fs::read(f).with_context(|| format!("reading {}", f.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

struct Run {
    dir: PathBuf,
}

impl Run {
    fn create(root: &Path, manifest: &mut RunManifest) -> anyhow::Result<Run> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{}-{stamp}-{}", manifest.command, &manifest.input_hash[..8]);
        let mut dir = root.join(&base);
        let mut bump = 1;
        while dir.exists() {
            dir = root.join(format!("{base}-{bump}"));
            bump += 1;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        manifest.output_dir = dir.display().to_string();
        let run = Run { dir };
        run.write("manifest.json", &serde_json::to_string_pretty(manifest)?)?;
        println!("{}", run.dir.display());
        Ok(run)
    }

    fn sub(&self, name: &str) -> anyhow::Result<Run> {
        let dir = self.dir.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Run { dir })
    }

    fn write(&self, name: &str, contents: &str) -> anyhow::Result<()> {
        let p = self.dir.join(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }
}

fn start(
    root: &Path,
    command: &str,
    argv: Vec<String>,
    data: &Dataset,
    config: Option<&TrainConfig>,
    seeds: Vec<u64>,
) -> anyhow::Result<Run> {
    let hash = input_hash(command, &argv, &data.files, config)?;
    let mut manifest = RunManifest {
        command: command.to_string(),
        argv,
        config: config.cloned(),
        dataset_paths: data.files.iter().map(|p| p.display().to_string()).collect(),
        seeds,
        output_dir: String::new(),
        input_hash: hash,
    };
    let run = Run::create(root, &mut manifest)?;
    run.write("load_report.json", &serde_json::to_string_pretty(&data.report)?)?;
    Ok(run)
}

#[derive(Serialize)]
struct FlatMetrics {
    acc: Option<f64>,
    nmi: Option<f64>,
    ari: Option<f64>,
    micro_f1: Option<f64>,
    macro_f1: Option<f64>,
    modularity: f64,
    seed: Option<u64>,
    epochs: Option<usize>,
    wall_seconds: Option<f64>,
}

fn flat_metrics(
    m: Option<&MetricsReport>,
    bundle: &GraphBundle,
    labels: &[usize],
    seed: Option<u64>,
    epochs: Option<usize>,
    wall: Option<f64>,
) -> anyhow::Result<FlatMetrics> {
    let modularity = match m {
        Some(m) => m.modularity,
        None if bundle.edges().is_empty() => 0.0,
        None => cegcl::eval::modularity(bundle.edges(), labels)?,
    };
    Ok(FlatMetrics {
        acc: m.map(|m| m.acc),
        nmi: m.map(|m| m.nmi),
        ari: m.map(|m| m.ari),
        micro_f1: m.map(|m| m.micro_f1),
        macro_f1: m.map(|m| m.macro_f1),
        modularity,
        seed,
        epochs,
        wall_seconds: wall,
    })
}

struct SeedResult {
    seed: u64,
    outcome: TrainOutcome,
}

fn write_training(run: &Run, data: &Dataset, config: &TrainConfig, seed: u64) -> anyhow::Result<SeedResult> {
    let config = TrainConfig { seed, ..config.clone() };
    let started = Instant::now();
    let outcome = train(&config, &data.bundle).with_context(|| format!("training with seed {seed}"))?;
    let wall = started.elapsed().as_secs_f64();
    let ids = data.bundle.node_ids();
    run.write("assignments.tsv", &format_assignments(ids, &outcome.assignments))?;
    let flat = flat_metrics(
        outcome.metrics.as_ref(),
        &data.bundle,
        &outcome.assignments,
        Some(seed),
        Some(config.epochs),
        Some(wall),
    )?;
    run.write("metrics.json", &serde_json::to_string_pretty(&flat)?)?;
    if let Some(m) = &outcome.metrics {
        run.write("community_counts.tsv", &m.counts_tsv())?;
    }
    run.write("loss.csv", &loss_history_csv(&outcome.history))?;
    let mut pre = String::from("epoch,l_cl\n");
    for (e, v) in outcome.pretrain_history.iter().enumerate() {
        let _ = writeln!(pre, "{},{v}", e + 1);
    }
    run.write("pretrain_loss.csv", &pre)?;
    run.write("embeddings.tsv", &matrix_tsv(ids, &outcome.embeddings))?;
    run.write("model.json", &serde_json::to_string(&outcome.model)?)?;
    run.write("medoids.tsv", &outcome.medoids.to_tsv(ids))?;
    run.write("config.toml", &config.to_toml())?;
    Ok(SeedResult { seed, outcome })
}

fn matrix_tsv(ids: &[String], z: &ndarray::Array2<f64>) -> String {
    let mut out = String::new();
    for (id, row) in ids.iter().zip(z.rows()) {
        out.push_str(id);
        for v in row {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

const METRIC_HEADER: &str = "acc\tnmi\tari\tmicro_f1\tmacro_f1\tmodularity\tsmallest_class_retained";

fn metric_cells(m: Option<&MetricsReport>) -> String {
    match m {
        Some(m) => format!(
            "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            m.acc,
            m.nmi,
            m.ari,
            m.micro_f1,
            m.macro_f1,
            m.modularity,
            smallest_class_retained(m)
        ),
        None => "NA\tNA\tNA\tNA\tNA\tNA\tNA".into(),
    }
}

/// Predicted size of the smallest true community over its true size.
pub fn smallest_class_retained(m: &MetricsReport) -> f64 {
    m.true_counts
        .iter()
        .zip(&m.per_community_counts)
        .filter(|(t, _)| **t > 0)
        .min_by_key(|(t, _)| **t)
        .map_or(0.0, |(t, p)| *p as f64 / *t as f64)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_cells(results: &[SeedResult]) -> String {
    let ms: Vec<&MetricsReport> = results.iter().filter_map(|r| r.outcome.metrics.as_ref()).collect();
    if ms.is_empty() {
        return metric_cells(None);
    }
    let col = |f: &dyn Fn(&MetricsReport) -> f64| median(ms.iter().map(|m| f(m)).collect());
    format!(
        "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
        col(&|m| m.acc),
        col(&|m| m.nmi),
        col(&|m| m.ari),
        col(&|m| m.micro_f1),
        col(&|m| m.macro_f1),
        col(&|m| m.modularity),
        col(&smallest_class_retained)
    )
}

/// Runs every seed, in the run directory itself when there is only one.
fn train_seeds(run: &Run, data: &Dataset, config: &TrainConfig, seeds: &[u64]) -> anyhow::Result<Vec<SeedResult>> {
    let mut results = Vec::new();
    for &seed in seeds {
        let target = if seeds.len() == 1 { Run { dir: run.dir.clone() } } else { run.sub(&format!("seed-{seed}"))? };
        results.push(write_training(&target, data, config, seed)?);
    }
    if seeds.len() > 1 {
        let mut table = format!("seed\t{METRIC_HEADER}\n");
        for r in &results {
            let _ = writeln!(table, "{}\t{}", r.seed, metric_cells(r.outcome.metrics.as_ref()));
        }
        let _ = writeln!(table, "median\t{}", median_cells(&results));
        run.write("seeds.tsv", &table)?;
    }
    Ok(results)
}

fn cmd_train(root: &Path, argv: Vec<String>, a: TrainArgs) -> anyhow::Result<()> {
    let config = load_config(&a.config, &[])?;
    let data = load_data(&a.data)?;
    let seeds = seeds_for(&a.config, &config);
    let run = start(root, "train", argv, &data, Some(&config), seeds.clone())?;
    let results = train_seeds(&run, &data, &config, &seeds)?;
    println!("{METRIC_HEADER}");
    println!("{}", median_cells(&results));
    Ok(())
}

fn cmd_eval(root: &Path, argv: Vec<String>, a: EvalArgs) -> anyhow::Result<()> {
    let data = load_data(&a.data)?;
    let truth = data
        .bundle
        .labels()
        .context("dataset has no ground-truth labels")?
        .to_vec();
    let text = fs::read_to_string(&a.assignments).with_context(|| format!("reading {}", a.assignments.display()))?;
    let pred = parse_assignments(&text, data.bundle.node_ids())?;
    let report = evaluate(&pred, &truth, data.bundle.edges())?;
    let mut files = data.files.clone();
    files.push(a.assignments.clone());
    let inputs = Dataset {
        bundle: data.bundle.clone(),
        report: data.report.clone(),
        files,
    };
    let run = start(root, "eval", argv, &inputs, None, Vec::new())?;
    let flat = flat_metrics(Some(&report), &data.bundle, &pred, None, None, None)?;
    let json = serde_json::to_string_pretty(&flat)?;
    run.write("metrics.json", &json)?;
    run.write("community_counts.tsv", &report.counts_tsv())?;
    println!("{json}");
    Ok(())
}

const DROPPABLE: [&str; 3] = ["st", "al", "clus"];

/// Non-empty subsets of `items`, smallest first, each in input order.
fn subsets(items: &[String]) -> Vec<Vec<String>> {
    let n = items.len();
    let mut out: Vec<Vec<String>> = (1u32..(1 << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).map(|i| items[i].clone()).collect())
        .collect();
    out.sort_by_key(|s: &Vec<String>| s.len());
    out
}

fn cmd_ablate(root: &Path, argv: Vec<String>, a: AblateArgs) -> anyhow::Result<()> {
    let mut drops: Vec<String> = Vec::new();
    for d in &a.drop {
        let d = d.trim().to_lowercase();
        if !DROPPABLE.contains(&d.as_str()) {
            return Err(usage(format!("cannot drop {d:?}; choose from st, al, clus")));
        }
        if !drops.contains(&d) {
            drops.push(d);
        }
    }
    let config = load_config(&a.config, &[])?;
    let data = load_data(&a.data)?;
    let seeds = seeds_for(&a.config, &config);
    let run = start(root, "ablate", argv, &data, Some(&config), seeds.clone())?;
    let mut table = format!("variant\t{METRIC_HEADER}\n");
    for subset in subsets(&drops) {
        let mut variant = config.clone();
        for d in &subset {
            match d.as_str() {
                "st" => variant.gamma_st = 0.0,
                "al" => variant.gamma_al = 0.0,
                _ => variant.gamma_clus = 0.0,
            }
        }
        let name = format!("drop-{}", subset.join("-"));
        let results = train_seeds(&run.sub(&name)?, &data, &variant, &seeds)?;
        let _ = writeln!(table, "{name}\t{}", median_cells(&results));
    }
    run.write("ablation.tsv", &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_sweep(root: &Path, argv: Vec<String>, a: SweepArgs) -> anyhow::Result<()> {
    let base = load_config(&a.config, &[])?;
    let mut configs = Vec::new();
    for v in &a.values {
        configs.push((v.clone(), load_config(&a.config, &[format!("{}={v}", a.param)])?));
    }
    let data = load_data(&a.data)?;
    let seeds = seeds_for(&a.config, &base);
    let run = start(root, "sweep", argv, &data, Some(&base), seeds.clone())?;
    let mut table = format!("{}\t{METRIC_HEADER}\n", a.param);
    for (value, config) in configs {
        let results = train_seeds(&run.sub(&format!("{}-{value}", a.param))?, &data, &config, &seeds)?;
        let _ = writeln!(table, "{value}\t{}", median_cells(&results));
    }
    run.write("sweep.tsv", &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct TheorySummary {
    nodes: usize,
    components: usize,
    converged_at: Option<usize>,
    initial_dispersion: f64,
    final_dispersion: f64,
    log_dispersion_slope: Option<f64>,
}

fn cmd_theory(root: &Path, argv: Vec<String>, a: TheoryArgs) -> anyhow::Result<()> {
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(usage("--tol must be positive"));
    }
    if a.dim == 0 {
        return Err(usage("--dim must be at least 1"));
    }
    let data = load_data(&a.data)?;
    let run = start(root, "theory-check", argv, &data, None, vec![a.seed])?;
    let g = &data.bundle;
    let h0 = random_projection(g.features(), a.dim, a.seed);
    let trace = propagation_convergence(g.num_nodes(), g.edges(), &h0, a.tol, a.max_t, false)?;
    run.write("trace.csv", &trace.to_csv())?;
    let summary = TheorySummary {
        nodes: g.num_nodes(),
        components: trace.components.count,
        converged_at: trace.converged_at,
        initial_dispersion: trace.dispersion[0],
        final_dispersion: *trace.dispersion.last().expect("trace starts at t = 0"),
        log_dispersion_slope: trace.log_dispersion_slope(),
    };
    let json = serde_json::to_string_pretty(&summary)?;
    run.write("theory.json", &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_export(root: &Path, argv: Vec<String>, a: ExportArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let model: ModelState = serde_json::from_str(&text).context("model file is not a saved model")?;
    let data = load_data(&a.data)?;
    if model.gcn.input_dim() != data.bundle.num_features() {
        bail!(
            "model expects {} features, dataset has {}",
            model.gcn.input_dim(),
            data.bundle.num_features()
        );
    }
    let mut files = data.files.clone();
    files.push(a.model.clone());
    let inputs = Dataset {
        bundle: data.bundle.clone(),
        report: data.report.clone(),
        files,
    };
    let run = start(root, "export-embeddings", argv, &inputs, None, Vec::new())?;
    let z = embed(&model, &Prepared::new(&data.bundle))?;
    run.write("embeddings.tsv", &matrix_tsv(data.bundle.node_ids(), &z))?;
    Ok(())
}
