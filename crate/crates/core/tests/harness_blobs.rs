//! End-to-end harness runs on synthetic blobs; no external data needed.

use std::path::Path;

use orthohead::harness::{self, RunConfig, MANIFEST_FILE, MODEL_FILE};

const BLOBS: &str = r#"
seed = 3

[data]
source = "blobs"
classes = 4
dim = 6
per_class = 30
test_per_class = 10
spread = 0.05
seed = 1

[encoder]
hidden = [12]
activation = "prelu"
feature_dim = 8

[head]
kind = "dense"
scale = 2.0
classes = 4

[loss]
mode = "center-worst-case"
alpha = 0.5
epsilon = 0.05

[optimizer]
lr = 0.01
momentum = 0.9
epochs = 4
batch_size = 16

[eval]
batch = 16
per_sample = true

[[attacks]]
method = "pgd"
epsilon = 0.05

[[attacks]]
method = "deep-fool"
epsilon = 0.05

[[attacks]]
method = "slide"
epsilon = 0.5

[sweep]
scales = [1.0, 2.0]
alphas = [0.5, 1.0]
"#;

fn config() -> RunConfig {
    RunConfig::from_toml_str(BLOBS).unwrap()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn train_attack_and_stats_write_csv_and_manifests() {
    let cfg = config();
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("train");
    let metrics = harness::run_experiment(&cfg, &train_dir).unwrap();

    assert_eq!(metrics.epochs.len(), 4);
    assert_eq!(metrics.config_hash, cfg.hash());
    assert!((0.0..=1.0).contains(&metrics.clean_accuracy));
    assert_eq!(metrics.attacks.len(), 3);
    for a in &metrics.attacks {
        assert!(a.robust_accuracy <= a.clean_accuracy);
    }
    assert!(train_dir.join(MODEL_FILE).exists());
    assert!(header(&train_dir.join("train_metrics.csv")).starts_with("epoch,lr,loss"));
    assert!(header(&train_dir.join("attack/attacks.csv")).starts_with("attack,norm,epsilon"));
    assert_eq!(
        header(&train_dir.join("attack/samples_0_pgd-linf-20.csv")),
        "sample_id,label,clean_pred,adv_pred,perturbation_norm,success"
    );

    let m = manifest(&train_dir);
    assert_eq!(m["command"], "train");
    assert_eq!(m["config_hash"], cfg.hash());
    assert_eq!(m["seed"], 3);
    assert!(m["outputs"]["train_metrics.csv"].as_str().unwrap().len() == 64);

    let stats_dir = tmp.path().join("stats");
    let stats = harness::cmd_feature_stats(&cfg, &train_dir, &stats_dir).unwrap();
    assert!((stats.min_inter - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(
        header(&stats_dir.join("feature_stats.csv")),
        "class,count,mean_distance,max_distance"
    );
}

#[test]
fn attacking_with_a_different_head_is_rejected() {
    let cfg = config();
    let tmp = tempfile::tempdir().unwrap();
    harness::cmd_train(&cfg, tmp.path()).unwrap();
    let mut other = cfg.clone();
    other.head.scale = 3.0;
    std::fs::write(
        tmp.path().join(harness::HEAD_FILE),
        orthohead::build_hadamard(3, 4, 3.0).unwrap().to_bytes(),
    )
    .unwrap();
    assert!(harness::cmd_attack(&other, tmp.path(), &tmp.path().join("attack")).is_err());
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    harness::run_experiment(&cfg, a.path()).unwrap();
    harness::run_experiment(&cfg, b.path()).unwrap();
    for name in ["train_metrics.csv", "summary.csv", MODEL_FILE, "attack/attacks.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn component_rerun_matches_full_run() {
    let cfg = config();
    let tmp = tempfile::tempdir().unwrap();
    harness::run_experiment(&cfg, tmp.path()).unwrap();
    let again = tmp.path().join("again");
    harness::cmd_attack(&cfg, tmp.path(), &again).unwrap();
    assert_eq!(
        std::fs::read(tmp.path().join("attack/attacks.csv")).unwrap(),
        std::fs::read(again.join("attacks.csv")).unwrap()
    );
}

#[test]
fn sweep_covers_the_grid() {
    let mut cfg = config();
    cfg.attacks.truncate(1);
    cfg.optimizer.epochs = 1;
    let tmp = tempfile::tempdir().unwrap();
    let rows = harness::cmd_sweep(&cfg, tmp.path()).unwrap();
    let cells: Vec<(f64, f64)> = rows.iter().map(|r| (r.scale, r.alpha)).collect();
    assert_eq!(cells, vec![(1.0, 0.5), (1.0, 1.0), (2.0, 0.5), (2.0, 1.0)]);
    for i in 0..4 {
        assert!(tmp.path().join(format!("cell_{i}/{MODEL_FILE}")).exists());
    }
    assert!(header(&tmp.path().join("sweep.csv")).starts_with("scale,alpha,clean_accuracy"));
}

#[test]
fn weights_command_exports_and_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    let req = harness::WeightsRequest {
        kind: harness::HeadKind::MaxMahalanobis,
        features: 12,
        classes: 5,
        scale: 10.0,
    };
    let (w, report) = harness::cmd_weights(&req, tmp.path()).unwrap();
    assert!(report.passed());
    let back = orthohead::ClassifierWeights::load(&tmp.path().join(harness::HEAD_FILE)).unwrap();
    assert_eq!(back, w);
    let csv = std::fs::read_to_string(tmp.path().join("weights.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let bad = BLOBS.replace("[optimizer]", "[optimizer]\nnesterov = true");
    assert!(RunConfig::from_toml_str(&bad).is_err());
}

#[test]
fn shipped_configs_load_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        cfg.attack_configs().unwrap();
        n += 1;
    }
    assert_eq!(n, 6);
}
