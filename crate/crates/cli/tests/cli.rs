use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 0

[data]
source = "blobs"
classes = 3
dim = 4
per_class = 20
test_per_class = 5
spread = 0.05

[encoder]
hidden = [8]
activation = "prelu"
feature_dim = 4

[head]
kind = "dense"
scale = 2.0
classes = 3

[loss]
mode = "center-clean"

[optimizer]
lr = 0.01
momentum = 0.9
epochs = 2
batch_size = 8

[[attacks]]
method = "fgsm"
epsilon = 0.05
"#;

fn orthohead(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orthohead"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn weights_prints_verification_and_writes_files() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orthohead(&["weights", "--depth", "4", "--classes", "10", "--out", arg(tmp.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("gram") && text.contains("PASS") && !text.contains("FAIL"));
    for f in [
        "head.ortw",
        "weights.csv",
        "verification.csv",
        "geometry.csv",
        "manifest.json",
    ] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
}

#[test]
fn train_then_attack_then_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let run = tmp.path().join("run");
    let o = orthohead(&["train", "--config", arg(&cfg), "--out", arg(&run), "--threads", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("clean test accuracy"));

    let att = tmp.path().join("att");
    let o = orthohead(&[
        "attack",
        "--config",
        arg(&cfg),
        "--checkpoint",
        arg(&run),
        "--out",
        arg(&att),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("fgsm"));
    let csv = std::fs::read_to_string(att.join("attacks.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let stats = tmp.path().join("stats");
    let o = orthohead(&[
        "feature-stats",
        "--config",
        arg(&cfg),
        "--checkpoint",
        arg(&run),
        "--out",
        arg(&stats),
    ]);
    assert!(o.status.success());
    assert!(stats.join("feature_stats.csv").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(orthohead(&["train", "--config", arg(&cfg), "--out", arg(&a)])
        .status
        .success());
    assert!(
        orthohead(&["train", "--config", arg(&cfg), "--seed", "9", "--out", arg(&b)])
            .status
            .success()
    );
    let read = |d: &Path| std::fs::read(d.join("model.ortm")).unwrap();
    assert_ne!(read(&a), read(&b));
    let manifest = std::fs::read_to_string(b.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 9"));
}

#[test]
fn errors_exit_nonzero() {
    let o = orthohead(&["train"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, CONFIG.replace("[optimizer]", "[optimizer]\nwarmup = 3")).unwrap();
    let o = orthohead(&["train", "--config", arg(&cfg), "--out", arg(tmp.path())]);
    assert!(!o.status.success());

    let o = orthohead(&["weights", "--features", "24", "--out", arg(tmp.path())]);
    assert!(!o.status.success());
}
