use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, AttackMethod, Norm};
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossMode};
use crate::models::{Activation, EncoderSpec};

/// Complete description of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub loss: LossSpec,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attacks: Vec<AttackSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redundancy: Option<RedundancyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    Mnist {
        /// Defaults to [`data::default_mnist_dir`].
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
        /// Area-pool images to `resize × resize`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        resize: Option<usize>,
    },
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        test_per_class: usize,
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub feature_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Dense,
    MaxMahalanobis,
    /// Trainable linear readout (standard softmax training).
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_scale() -> f64 {
    10.0
}

fn default_classes() -> usize {
    10
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Dense,
            scale: default_scale(),
            classes: default_classes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub mode: LossMode,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_iters: Option<usize>,
    /// Defaults to `0.25·epsilon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_step: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            mode: LossMode::CenterClean,
            alpha: 1.0,
            epsilon: 0.0,
            inner_iters: None,
            inner_step: None,
        }
    }
}

impl LossSpec {
    pub fn resolve(&self) -> LossConfig {
        LossConfig {
            mode: self.mode,
            alpha: self.alpha,
            epsilon: self.epsilon,
            inner_iters: self.inner_iters.unwrap_or(10),
            inner_step: self.inner_step.unwrap_or(0.25 * self.epsilon),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    /// Epochs (0-based) at which the rate is divided by 10.
    #[serde(default)]
    pub milestones: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_batch")]
    pub batch: usize,
    /// Attack only the first this many test samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_limit: Option<usize>,
    /// Write one CSV row per attacked sample.
    #[serde(default)]
    pub per_sample: bool,
}

fn default_eval_batch() -> usize {
    100
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch: default_eval_batch(),
            attack_limit: None,
            per_sample: false,
        }
    }
}

/// Attack entry; unset fields take the per-method defaults of
/// [`AttackConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub method: AttackMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<Norm>,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overshoot: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_start: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity_q: Option<f64>,
}

impl AttackSpec {
    pub fn resolve(&self) -> Result<AttackConfig> {
        let eps = self.epsilon;
        let mut cfg = match (self.method, self.norm) {
            (AttackMethod::Fgsm, None | Some(Norm::Linf)) => AttackConfig::fgsm(eps),
            (AttackMethod::Pgd, None | Some(Norm::Linf)) => AttackConfig::pgd_linf(eps),
            (AttackMethod::Pgd, Some(Norm::L2)) => AttackConfig::pgd_l2(eps),
            (AttackMethod::Pgd, Some(Norm::L1)) => AttackConfig::pgd_l1(eps),
            (AttackMethod::DeepFool, None | Some(Norm::Linf)) => AttackConfig::deepfool(eps),
            (AttackMethod::Slide, None | Some(Norm::L1)) => AttackConfig::slide(eps),
            (m, Some(n)) => {
                return Err(Error::Config(format!("{m:?} does not support the {n:?} norm")));
            }
        };
        if let Some(v) = self.iters {
            cfg.iters = v;
        }
        if let Some(v) = self.rel_step {
            cfg.rel_step = v;
        }
        if let Some(v) = self.overshoot {
            cfg.overshoot = v;
        }
        if let Some(v) = self.random_start {
            cfg.random_start = v;
        }
        if let Some(v) = self.sparsity_q {
            cfg.sparsity_q = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RedundancyConfig {
    pub depths: Vec<u32>,
    pub seeds: Vec<u64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub scales: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Checks the fields that every command relies on.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.head.scale > 0.0 && self.head.scale.is_finite()) {
            return bad(format!("head scale must be positive, got {}", self.head.scale));
        }
        if self.head.classes < 2 {
            return bad("head needs at least two classes".into());
        }
        if self.optimizer.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.optimizer.batch_size == 0 || self.eval.batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.optimizer.lr > 0.0) || !(0.0..1.0).contains(&self.optimizer.momentum) {
            return bad("learning rate must be positive and momentum in [0, 1)".into());
        }
        self.loss.resolve().validate()?;
        if self.loss.mode != LossMode::SoftmaxCe && self.head.kind == HeadKind::Learned {
            return bad("center losses need a frozen head".into());
        }
        for a in &self.attacks {
            a.resolve()?;
        }
        match &self.data {
            DataConfig::Mnist { dir, resize, .. } => {
                let dir = dir.clone().unwrap_or_else(data::default_mnist_dir);
                for f in [
                    "train-images-idx3-ubyte",
                    "train-labels-idx1-ubyte",
                    "t10k-images-idx3-ubyte",
                    "t10k-labels-idx1-ubyte",
                ] {
                    if !dir.join(f).is_file() {
                        return bad(format!("missing MNIST file {}", dir.join(f).display()));
                    }
                }
                if matches!(resize, Some(0)) {
                    return bad("resize must be positive".into());
                }
                if self.head.classes != 10 {
                    return bad("MNIST has 10 classes".into());
                }
            }
            DataConfig::Blobs { classes, .. } => {
                if *classes != self.head.classes {
                    return bad(format!("{classes} blob classes but a {}-class head", self.head.classes));
                }
            }
        }
        if let Some(e) = &self.encoder {
            self.encoder_spec(e, 1)?.validate()?;
        }
        if let Some(r) = &self.redundancy {
            if r.depths.is_empty() || r.seeds.is_empty() {
                return bad("redundancy needs depths and seeds".into());
            }
        }
        if let Some(s) = &self.sweep {
            if s.scales.iter().any(|v| !(*v > 0.0)) || s.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
                return bad("sweep scales must be positive and alphas in (0, 1]".into());
            }
        }
        Ok(())
    }

    /// Encoder spec for inputs of width `input_dim`.
    pub fn encoder_spec(&self, e: &EncoderConfig, input_dim: usize) -> Result<EncoderSpec> {
        Ok(EncoderSpec {
            input_dim,
            hidden: e.hidden.clone(),
            activation: e.activation,
            feature_dim: e.feature_dim,
            readout: (self.head.kind == HeadKind::Learned).then_some(self.head.classes),
        })
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn attack_configs(&self) -> Result<Vec<AttackConfig>> {
        self.attacks.iter().map(AttackSpec::resolve).collect()
    }
}

/// Train and test splits described by a [`DataConfig`].
pub fn load_data(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    match cfg {
        DataConfig::Mnist {
            dir,
            train_limit,
            test_limit,
            resize,
        } => {
            let dir = dir.clone().unwrap_or_else(data::default_mnist_dir);
            let prep = |split: Split, limit: Option<usize>| -> Result<Dataset> {
                let mut ds = data::load_mnist(&dir, split)?;
                if let Some(n) = limit {
                    ds = data::take_first(&ds, n)?;
                }
                if let Some(side) = resize {
                    ds = data::resize_avgpool(&ds, *side)?;
                }
                Ok(ds)
            };
            Ok((prep(Split::Train, *train_limit)?, prep(Split::Test, *test_limit)?))
        }
        DataConfig::Blobs {
            classes,
            dim,
            per_class,
            test_per_class,
            spread,
            seed,
        } => {
            let all = data::synth_blobs(*classes, *dim, per_class + test_per_class, *spread, *seed)?;
            let cut = per_class * classes;
            let mut train = all.select(&(0..cut).collect::<Vec<_>>());
            let mut test = all.select(&(cut..all.len()).collect::<Vec<_>>());
            train.provenance = format!("{}|train", all.provenance);
            test.provenance = format!("{}|test", all.provenance);
            test.split = Split::Test;
            Ok((train, test))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BLOBS: &str = r#"
seed = 3

[data]
source = "blobs"
classes = 4
dim = 6
per_class = 10
test_per_class = 5
spread = 0.05

[encoder]
hidden = [8]
activation = "prelu"
feature_dim = 8

[head]
kind = "dense"
scale = 5.0
classes = 4

[loss]
mode = "center-worst-case"
alpha = 0.5
epsilon = 0.1

[optimizer]
lr = 0.01
momentum = 0.9
epochs = 2
batch_size = 8

[[attacks]]
method = "pgd"
epsilon = 0.1
iters = 5
"#;

    #[test]
    fn parses_and_resolves_defaults() {
        let cfg = RunConfig::from_toml_str(BLOBS).unwrap();
        cfg.validate().unwrap();
        let loss = cfg.loss.resolve();
        assert_eq!(loss.inner_iters, 10);
        assert!((loss.inner_step - 0.025).abs() < 1e-15);
        let a = &cfg.attack_configs().unwrap()[0];
        assert_eq!((a.iters, a.rel_step, a.random_start), (5, 0.1, true));
        assert_eq!(cfg.eval.batch, 100);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = BLOBS.replace("seed = 3", "seed = 3\nsede = 4");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Toml(_))));
        let text = BLOBS.replace("spread = 0.05", "spread = 0.05\nnoise = 1");
        assert!(RunConfig::from_toml_str(&text).is_err());
        let text = BLOBS.replace("iters = 5", "iters = 5\nsteps = 2");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for (from, to) in [
            ("scale = 5.0", "scale = 0.0"),
            ("epochs = 2", "epochs = 0"),
            ("batch_size = 8", "batch_size = 0"),
            ("alpha = 0.5", "alpha = 1.5"),
            ("classes = 4\n\n[loss]", "classes = 5\n\n[loss]"),
        ] {
            let cfg = RunConfig::from_toml_str(&BLOBS.replace(from, to)).unwrap();
            assert!(cfg.validate().is_err(), "{to}");
        }
        let text = BLOBS.replace(
            "source = \"blobs\"\nclasses = 4\ndim = 6\nper_class = 10\ntest_per_class = 5\nspread = 0.05",
            "source = \"mnist\"\ndir = \"/nonexistent\"",
        );
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::from_toml_str(BLOBS).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn blob_splits_are_disjoint_and_sized() {
        let cfg = RunConfig::from_toml_str(BLOBS).unwrap();
        let (train, test) = load_data(&cfg.data).unwrap();
        assert_eq!((train.len(), test.len()), (40, 20));
        assert_eq!(test.split, Split::Test);
        assert_ne!(train.inputs.row(0), test.inputs.row(0));
    }
}
