//! The toy configuration on real MNIST. Needs the IDX files (`MNIST_DIR` or
//! the default directory).

use std::path::Path;
use std::time::{Duration, Instant};

use orthohead::harness::{self, RunConfig};

#[test]
fn toy_config_trains_and_attacks_within_a_minute() {
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let m = harness::run_experiment(&cfg, tmp.path()).unwrap();
    assert!(started.elapsed() < Duration::from_secs(60));
    assert_eq!(m.epochs.len(), 10);
    assert!(m.epochs.iter().all(|e| e.inner_attack_runs == 0));
    // A linear model on 4×4 images is far above chance but far from solved.
    assert!(m.clean_accuracy > 0.4 && m.clean_accuracy < 0.9, "{}", m.clean_accuracy);
    assert!(m.attacks[0].robust_accuracy < m.clean_accuracy);
}
