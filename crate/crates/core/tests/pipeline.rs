use cegcl::eval::{format_assignments, parse_assignments};
use cegcl::graph_io::{load_dataset_dir, write_canonical_dir};
use cegcl::synthetic::{stochastic_block_model, SbmSpec};
use cegcl::trainer::{embed, pretrain, train, ModelState, Prepared};
use cegcl::TrainConfig;

fn config(extra: &[&str]) -> TrainConfig {
    let base = r#"
epochs = 40
learning_rate = 0.005
hidden_gcn = 16
gcn_layers = 1
tau = 0.5
N_neg = 5
t = 10
d = 16
gamma_st = 0.05
gamma_al = 0.01
pretrain_epochs = 30
"#;
    let ov: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    TrainConfig::from_toml_str(base, &ov).unwrap()
}

fn easy_sbm(n: usize, seed: u64) -> cegcl::GraphBundle {
    stochastic_block_model(&SbmSpec::balanced(n, 2, 0.15, 0.01, 8), seed).unwrap()
}

#[test]
fn pretraining_lowers_the_contrastive_loss() {
    let g = stochastic_block_model(&SbmSpec::balanced(200, 4, 0.1, 0.01, 16), 3).unwrap();
    let state = pretrain(&config(&["pretrain_epochs=60"]), &g).unwrap();
    let h = &state.pretrain_history;
    assert_eq!(h.len(), 60);
    let head: f64 = h[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = h[h.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
    assert_eq!(state.model.centers.dim(), (4, 16));
}

#[test]
fn easy_blocks_are_recovered() {
    let g = easy_sbm(120, 0);
    let out = train(&config(&[]), &g).unwrap();
    let m = out.metrics.unwrap();
    assert!(m.acc > 0.9, "acc {}", m.acc);
    assert!(m.modularity > 0.3, "modularity {}", m.modularity);
    assert_eq!(out.history.len(), 40);
    assert!(out.history.iter().all(|r| r.total.is_finite()));
    // Rounds at epochs 10, 20, 30 and 40, two medoids each.
    assert_eq!(out.medoids.len(), 8);
}

#[test]
fn stepwise_training_matches_train() {
    let g = easy_sbm(60, 1);
    let cfg = config(&["epochs=12"]);
    let whole = train(&cfg, &g).unwrap();

    let prep = Prepared::new(&g);
    let mut state = pretrain(&cfg, &g).unwrap();
    for _ in 0..cfg.epochs {
        state.step(&cfg, &prep).unwrap();
    }
    let stepped = state.finish(&prep, &g).unwrap();
    assert_eq!(stepped.assignments, whole.assignments);
    assert_eq!(stepped.model, whole.model);
    assert_eq!(stepped.history, whole.history);
}

#[test]
fn training_from_disk_matches_training_in_memory() {
    let g = easy_sbm(50, 2);
    let dir = tempfile::tempdir().unwrap();
    write_canonical_dir(&g, dir.path()).unwrap();
    let (loaded, _) = load_dataset_dir(dir.path()).unwrap();
    assert_eq!(loaded, g);
    let cfg = config(&["epochs=5", "pretrain_epochs=5"]);
    assert_eq!(train(&cfg, &loaded).unwrap().assignments, train(&cfg, &g).unwrap().assignments);
}

#[test]
fn saved_model_reproduces_embeddings_and_assignments() {
    let g = easy_sbm(50, 4);
    let out = train(&config(&["epochs=5", "pretrain_epochs=5"]), &g).unwrap();
    let json = serde_json::to_string(&out.model).unwrap();
    let model: ModelState = serde_json::from_str(&json).unwrap();
    assert_eq!(embed(&model, &Prepared::new(&g)).unwrap(), out.embeddings);

    let text = format_assignments(g.node_ids(), &out.assignments);
    assert_eq!(parse_assignments(&text, g.node_ids()).unwrap(), out.assignments);
}

#[test]
fn disabled_terms_do_not_change_the_contrastive_warm_up() {
    let g = easy_sbm(60, 5);
    let full = train(&config(&["epochs=3"]), &g).unwrap();
    let ablated = train(&config(&["epochs=3", "gamma_st=0.0", "gamma_al=0.0"]), &g).unwrap();
    assert_eq!(full.pretrain_history, ablated.pretrain_history);
    assert!(ablated.history.iter().all(|r| r.total.is_finite()));
    assert_ne!(full.model, ablated.model);
}

#[test]
fn seeds_change_the_run_but_not_its_shape() {
    let g = easy_sbm(60, 6);
    let a = train(&config(&["epochs=4", "seed=1"]), &g).unwrap();
    let b = train(&config(&["epochs=4", "seed=2"]), &g).unwrap();
    assert_ne!(a.pretrain_history, b.pretrain_history);
    assert_eq!(a.embeddings.dim(), b.embeddings.dim());
    assert_eq!(a.soft_assignments.dim(), (60, 2));
    for row in a.soft_assignments.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
}
