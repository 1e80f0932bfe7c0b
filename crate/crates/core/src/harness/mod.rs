//! Experiment drivers behind the command-line tool.
//!
//! Every command writes CSV files with a header row and a `manifest.json`
//! holding the config echo, its hash, input provenance and output hashes.
//! Wall time appears only in the manifest so the CSVs stay byte-identical
//! across reruns with the same seed.

mod config;
mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{
    load_data, AttackSpec, DataConfig, EncoderConfig, EvalConfig, HeadConfig, HeadKind, LossSpec, OptimizerConfig,
    RedundancyConfig, RunConfig, SweepConfig,
};
pub use train::{
    accuracy, build_head, build_network, feature_stats, train_network, ClassStats, EpochRecord, FeatureStats,
};

use crate::attacks::{robust_accuracy, AttackConfig, Norm};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::models::{EncoderSpec, Network};
use crate::orthoweights::{self, ClassifierWeights, VerificationReport};

pub const MODEL_FILE: &str = "model.ortm";
pub const HEAD_FILE: &str = "head.ortw";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `rows` as CSV with a header row.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// JSON run manifest.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub format_versions: BTreeMap<String, u32>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    pub inputs: BTreeMap<String, String>,
    /// File name to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
    pub threads: usize,
    pub wall_time_seconds: f64,
}

impl Manifest {
    fn new(command: &str, seed: u64, cfg: Option<&RunConfig>) -> Self {
        let format_versions = [("ORTW", 1), ("ORTM", 1), ("ORTD", 1)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            format_versions,
            seed,
            config_hash: cfg.map(RunConfig::hash),
            config: cfg.cloned(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            threads: rayon::current_num_threads(),
            wall_time_seconds: 0.0,
        }
    }

    fn output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.into(), file_sha256(&dir.join(name))?);
        Ok(())
    }

    fn finish(mut self, dir: &Path, started: Instant) -> Result<Self> {
        self.wall_time_seconds = started.elapsed().as_secs_f64();
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&self)?)?;
        Ok(self)
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Arguments of the `weights` command.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightsRequest {
    pub kind: HeadKind,
    /// Feature dimension `P`; a power of two for the dense head.
    pub features: usize,
    pub classes: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct CheckRow {
    check: String,
    passed: bool,
    residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct GeometryRow {
    kind: String,
    features: usize,
    classes: usize,
    scale: f64,
    min_pairwise_sqdist: f64,
    optimal_sqdist: f64,
    ratio: f64,
}

/// Builds and verifies a head, writing `head.ortw`, `weights.csv`,
/// `verification.csv` and `geometry.csv`.
pub fn cmd_weights(req: &WeightsRequest, out: &Path) -> Result<(ClassifierWeights, VerificationReport)> {
    let started = Instant::now();
    prepare_dir(out)?;
    let head = HeadConfig {
        kind: req.kind,
        scale: req.scale,
        classes: req.classes,
    };
    let w =
        build_head(&head, req.features)?.ok_or_else(|| Error::Config("a learned head has no fixed weights".into()))?;
    let report = orthoweights::verify(&w, 1e-10);
    w.save(&out.join(HEAD_FILE))?;
    let mut csv_out = std::fs::File::create(out.join("weights.csv"))?;
    w.write_csv(&mut csv_out)?;
    let rows: Vec<CheckRow> = report
        .checks
        .iter()
        .map(|c| CheckRow {
            check: c.name.to_string(),
            passed: c.passed,
            residual: c.residual,
        })
        .collect();
    write_csv(&out.join("verification.csv"), &rows)?;
    let min = orthoweights::min_pairwise_sqdist(&w)?;
    let opt = orthoweights::optimal_sqdist(w.classes(), w.scale())?;
    write_csv(
        &out.join("geometry.csv"),
        &[GeometryRow {
            kind: format!("{:?}", w.kind()),
            features: w.features(),
            classes: w.classes(),
            scale: w.scale(),
            min_pairwise_sqdist: min,
            optimal_sqdist: opt,
            ratio: min / opt,
        }],
    )?;
    let mut m = Manifest::new("weights", 0, None);
    m.inputs.insert("kind".into(), format!("{:?}", req.kind));
    for f in [HEAD_FILE, "weights.csv", "verification.csv", "geometry.csv"] {
        m.output(out, f)?;
    }
    m.finish(out, started)?;
    Ok((w, report))
}

/// Outcome of training plus any evaluation run on the result.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub clean_accuracy: f64,
    pub attacks: Vec<AttackRow>,
    pub mean_intra: Option<f64>,
    pub min_inter: Option<f64>,
    pub wall_time_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct SummaryRow {
    config_hash: String,
    train_samples: usize,
    test_samples: usize,
    final_train_loss: f64,
    final_train_accuracy: f64,
    clean_accuracy: f64,
    mean_intra_distance: Option<f64>,
    min_inter_distance: Option<f64>,
}

/// Network described by `cfg` for inputs of width `input_dim`.
pub fn network_for(cfg: &RunConfig, input_dim: usize) -> Result<Network> {
    let enc = cfg
        .encoder
        .as_ref()
        .ok_or_else(|| Error::Config("training needs an [encoder] section".into()))?;
    build_network(cfg.encoder_spec(enc, input_dim)?, &cfg.head, cfg.seed)
}

/// Trains the configured network and writes the checkpoint, frozen head,
/// `train_metrics.csv` and `summary.csv`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(Network, RunMetrics)> {
    let started = Instant::now();
    cfg.validate()?;
    prepare_dir(out)?;
    let (train, test) = load_data(&cfg.data)?;
    let mut net = network_for(cfg, train.dim())?;
    let head_before = net.head().map(ClassifierWeights::content_hash);
    let epochs = train_network(&mut net, &train, &cfg.loss.resolve(), &cfg.optimizer, cfg.seed)?;
    let head_after = net.head().map(ClassifierWeights::content_hash);
    if head_before != head_after {
        return Err(Error::HashMismatch {
            what: "frozen head".into(),
            expected: head_before.unwrap_or_default(),
            found: head_after.unwrap_or_default(),
        });
    }
    let clean_accuracy = accuracy(&net, &test, cfg.eval.batch)?;
    let stats = net
        .head()
        .map(|_| feature_stats(&net, &test, cfg.eval.batch))
        .transpose()?;

    let mut m = Manifest::new("train", cfg.seed, Some(cfg));
    m.inputs.insert("train_data".into(), train.provenance.clone());
    m.inputs.insert("test_data".into(), test.provenance.clone());
    if let Some(h) = net.head() {
        h.save(&out.join(HEAD_FILE))?;
        m.output(out, HEAD_FILE)?;
        m.inputs
            .insert("head_hash_before".into(), head_before.clone().unwrap_or_default());
        m.inputs
            .insert("head_hash_after".into(), head_after.clone().unwrap_or_default());
    }
    net.save_checkpoint(&out.join(MODEL_FILE))?;
    write_csv(&out.join("train_metrics.csv"), &epochs)?;
    let last = epochs.last().expect("at least one epoch");
    let metrics = RunMetrics {
        config_hash: cfg.hash(),
        epochs: epochs.clone(),
        clean_accuracy,
        attacks: Vec::new(),
        mean_intra: stats.as_ref().map(|s| s.mean_intra),
        min_inter: stats.as_ref().map(|s| s.min_inter),
        wall_time_seconds: 0.0,
    };
    write_csv(
        &out.join("summary.csv"),
        &[SummaryRow {
            config_hash: metrics.config_hash.clone(),
            train_samples: train.len(),
            test_samples: test.len(),
            final_train_loss: last.loss,
            final_train_accuracy: last.train_accuracy,
            clean_accuracy,
            mean_intra_distance: metrics.mean_intra,
            min_inter_distance: metrics.min_inter,
        }],
    )?;
    for f in [MODEL_FILE, "train_metrics.csv", "summary.csv"] {
        m.output(out, f)?;
    }
    let m = m.finish(out, started)?;
    Ok((
        net,
        RunMetrics {
            wall_time_seconds: m.wall_time_seconds,
            ..metrics
        },
    ))
}

/// Reads `model.ortm` (and `head.ortw` when present) from a training
/// output directory.
pub fn load_checkpoint(dir: &Path) -> Result<Network> {
    let bytes = std::fs::read(dir.join(MODEL_FILE))?;
    let head = match Network::checkpoint_head_hash(&bytes)? {
        Some(_) => Some(ClassifierWeights::load(&dir.join(HEAD_FILE))?),
        None => None,
    };
    Network::from_checkpoint(&bytes, head)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackRow {
    pub attack: String,
    pub norm: Norm,
    pub epsilon: f64,
    pub iters: usize,
    pub samples: usize,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub success_rate: f64,
    pub mean_perturbation: f64,
}

fn attack_subset(cfg: &RunConfig, test: &Dataset) -> Dataset {
    match cfg.eval.attack_limit {
        Some(n) if n < test.len() => test.select(&(0..n).collect::<Vec<_>>()),
        _ => test.clone(),
    }
}

/// Runs every attack on `data`; sample `i` uses attack stream index `i`.
pub fn evaluate_attacks(
    net: &Network,
    data: &Dataset,
    attacks: &[AttackConfig],
    seed: u64,
    batch: usize,
    per_sample_dir: Option<&Path>,
) -> Result<Vec<AttackRow>> {
    let mut rows = Vec::with_capacity(attacks.len());
    for (i, a) in attacks.iter().enumerate() {
        let eval = robust_accuracy(net, &data.inputs, &data.labels, a, seed, batch)?;
        if let Some(dir) = per_sample_dir {
            let f = std::fs::File::create(dir.join(format!("samples_{i}_{}.csv", a.label())))?;
            eval.write_csv(f)?;
        }
        let n = eval.records.len() as f64;
        rows.push(AttackRow {
            attack: a.label(),
            norm: a.norm,
            epsilon: a.epsilon,
            iters: a.iters,
            samples: eval.records.len(),
            clean_accuracy: eval.clean_accuracy,
            robust_accuracy: eval.robust_accuracy,
            success_rate: eval.records.iter().filter(|r| r.success).count() as f64 / n,
            mean_perturbation: eval.records.iter().map(|r| r.perturbation_norm).sum::<f64>() / n,
        });
    }
    Ok(rows)
}

/// Attacks a trained checkpoint with every configured attack and writes
/// `attacks.csv`.
pub fn cmd_attack(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<AttackRow>> {
    let started = Instant::now();
    cfg.validate()?;
    prepare_dir(out)?;
    let attacks = cfg.attack_configs()?;
    if attacks.is_empty() {
        return Err(Error::Config("no [[attacks]] configured".into()));
    }
    let net = load_checkpoint(checkpoint)?;
    let (_, test) = load_data(&cfg.data)?;
    let data = attack_subset(cfg, &test);
    let per_sample = cfg.eval.per_sample.then_some(out);
    let rows = evaluate_attacks(&net, &data, &attacks, cfg.seed, cfg.eval.batch, per_sample)?;
    write_csv(&out.join("attacks.csv"), &rows)?;
    let mut m = Manifest::new("attack", cfg.seed, Some(cfg));
    m.inputs
        .insert("checkpoint".into(), file_sha256(&checkpoint.join(MODEL_FILE))?);
    m.inputs.insert("test_data".into(), data.provenance.clone());
    m.output(out, "attacks.csv")?;
    if per_sample.is_some() {
        for (i, a) in attacks.iter().enumerate() {
            m.output(out, &format!("samples_{i}_{}.csv", a.label()))?;
        }
    }
    m.finish(out, started)?;
    Ok(rows)
}

/// `cmd_train` followed by `cmd_attack` on the same directory.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<RunMetrics> {
    let (_, metrics) = cmd_train(cfg, out)?;
    let attacks = if cfg.attacks.is_empty() {
        Vec::new()
    } else {
        let dir = out.join("attack");
        cmd_attack(cfg, out, &dir)?
    };
    Ok(RunMetrics { attacks, ..metrics })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RedundancyRun {
    pub depth: u32,
    pub head: HeadKind,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RedundancyRow {
    pub depth: u32,
    pub features: usize,
    pub head: HeadKind,
    pub seeds: usize,
    pub train_mean: f64,
    pub train_sd: f64,
    pub test_mean: f64,
    pub test_sd: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Single-layer encoders of width `2^T` under both frozen heads, trained
/// with cross-entropy for every `(T, head, seed)` cell. Writes
/// `redundancy_runs.csv` and the seed-averaged `redundancy.csv`.
pub fn cmd_redundancy(cfg: &RunConfig, out: &Path) -> Result<Vec<RedundancyRow>> {
    let started = Instant::now();
    cfg.validate()?;
    let red = cfg
        .redundancy
        .as_ref()
        .ok_or_else(|| Error::Config("no [redundancy] section".into()))?;
    if cfg.loss.mode != LossMode::SoftmaxCe {
        return Err(Error::Config("the redundancy experiment trains with softmax-ce".into()));
    }
    prepare_dir(out)?;
    let (train, test) = load_data(&cfg.data)?;
    let heads = [HeadKind::MaxMahalanobis, HeadKind::Dense];
    let cells: Vec<(u32, HeadKind, u64)> = red
        .depths
        .iter()
        .flat_map(|&t| {
            heads
                .iter()
                .flat_map(move |&h| red.seeds.iter().map(move |&s| (t, h, s)))
        })
        .collect();
    let loss = cfg.loss.resolve();
    let runs: Vec<RedundancyRun> = cells
        .par_iter()
        .map(|&(depth, head, seed)| {
            let spec = EncoderSpec {
                input_dim: train.dim(),
                hidden: Vec::new(),
                activation: red.activation,
                feature_dim: 1usize << depth,
                readout: None,
            };
            let head_cfg = HeadConfig {
                kind: head,
                ..cfg.head.clone()
            };
            let mut net = build_network(spec, &head_cfg, seed)?;
            train_network(&mut net, &train, &loss, &cfg.optimizer, seed)?;
            Ok(RedundancyRun {
                depth,
                head,
                seed,
                train_accuracy: accuracy(&net, &train, cfg.eval.batch)?,
                test_accuracy: accuracy(&net, &test, cfg.eval.batch)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &depth in &red.depths {
        for head in heads {
            let sel: Vec<&RedundancyRun> = runs.iter().filter(|r| r.depth == depth && r.head == head).collect();
            let (train_mean, train_sd) = mean_sd(&sel.iter().map(|r| r.train_accuracy).collect::<Vec<_>>());
            let (test_mean, test_sd) = mean_sd(&sel.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
            rows.push(RedundancyRow {
                depth,
                features: 1 << depth,
                head,
                seeds: sel.len(),
                train_mean,
                train_sd,
                test_mean,
                test_sd,
            });
        }
    }
    write_csv(&out.join("redundancy_runs.csv"), &runs)?;
    write_csv(&out.join("redundancy.csv"), &rows)?;
    let mut m = Manifest::new("redundancy", cfg.seed, Some(cfg));
    m.inputs.insert("train_data".into(), train.provenance.clone());
    m.inputs.insert("test_data".into(), test.provenance.clone());
    m.output(out, "redundancy_runs.csv")?;
    m.output(out, "redundancy.csv")?;
    m.finish(out, started)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub scale: f64,
    pub alpha: f64,
    pub clean_accuracy: f64,
    pub attack: String,
    pub epsilon: f64,
    pub robust_accuracy: f64,
}

/// One train-and-attack run per `(s, α)` grid cell using the worst-case
/// loss with the configured budget. Writes `sweep.csv`; each cell's
/// artifacts go to `cell_<i>/`.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let started = Instant::now();
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("no [sweep] section".into()))?;
    if cfg.head.kind == HeadKind::Learned {
        return Err(Error::Config("the sweep needs a frozen head".into()));
    }
    prepare_dir(out)?;
    let mut rows = Vec::new();
    let mut m = Manifest::new("sweep", cfg.seed, Some(cfg));
    let mut cell = 0;
    for &scale in &sweep.scales {
        for &alpha in &sweep.alphas {
            let mut c = cfg.clone();
            c.head.scale = scale;
            c.loss.mode = LossMode::CenterWorstCase;
            c.loss.alpha = alpha;
            c.sweep = None;
            let dir = out.join(format!("cell_{cell}"));
            let metrics = run_experiment(&c, &dir)?;
            m.inputs.insert(
                format!("cell_{cell}"),
                format!("scale={scale},alpha={alpha},config={}", c.hash()),
            );
            for a in &metrics.attacks {
                rows.push(SweepRow {
                    scale,
                    alpha,
                    clean_accuracy: metrics.clean_accuracy,
                    attack: a.attack.clone(),
                    epsilon: a.epsilon,
                    robust_accuracy: a.robust_accuracy,
                });
            }
            if metrics.attacks.is_empty() {
                rows.push(SweepRow {
                    scale,
                    alpha,
                    clean_accuracy: metrics.clean_accuracy,
                    attack: "none".into(),
                    epsilon: 0.0,
                    robust_accuracy: metrics.clean_accuracy,
                });
            }
            cell += 1;
        }
    }
    write_csv(&out.join("sweep.csv"), &rows)?;
    m.output(out, "sweep.csv")?;
    m.finish(out, started)?;
    Ok(rows)
}

/// Per-class feature-to-center distances on the test split, written to
/// `feature_stats.csv`, plus the center distance matrix in
/// `center_distances.csv`.
pub fn cmd_feature_stats(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<FeatureStats> {
    let started = Instant::now();
    cfg.validate()?;
    prepare_dir(out)?;
    let net = load_checkpoint(checkpoint)?;
    let (_, test) = load_data(&cfg.data)?;
    let stats = feature_stats(&net, &test, cfg.eval.batch)?;
    write_csv(&out.join("feature_stats.csv"), &stats.per_class)?;
    let k = stats.center_distances.rows();
    let mut w = csv::Writer::from_path(out.join("center_distances.csv"))?;
    let mut header = vec!["class".to_string()];
    header.extend((0..k).map(|j| format!("class_{j}")));
    w.write_record(&header)?;
    for i in 0..k {
        let mut rec = vec![i.to_string()];
        rec.extend(stats.center_distances.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut m = Manifest::new("feature-stats", cfg.seed, Some(cfg));
    m.inputs
        .insert("checkpoint".into(), file_sha256(&checkpoint.join(MODEL_FILE))?);
    m.inputs.insert("test_data".into(), test.provenance.clone());
    m.output(out, "feature_stats.csv")?;
    m.output(out, "center_distances.csv")?;
    m.finish(out, started)?;
    Ok(stats)
}

/// Sizes the global worker pool; call once before any command.
pub fn configure_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Resolves the output directory: explicit flag, else `./runs/<command>`.
pub fn output_dir(flag: Option<PathBuf>, command: &str) -> PathBuf {
    flag.unwrap_or_else(|| PathBuf::from("runs").join(command))
}
