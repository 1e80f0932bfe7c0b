//! Training objectives.
//!
//! * center loss: batch mean of `‖f(x) − w_y‖²`;
//! * worst-case loss: `α·L(clean) + (1−α)·L(x′)`, where `x′` maximizes the
//!   same distance inside an ℓ∞ ball found by an inner PGD;
//! * softmax cross-entropy over the classifier scores.

use serde::{Deserialize, Serialize};

use crate::attacks::{self, Norm, Objective, PgdPlan, Selection};
use crate::error::{Error, Result};
use crate::gradcore::{argmax, DenseTensor, Tape};
use crate::models::{head_logits, Network};
use crate::orthoweights::ClassifierWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    CenterClean,
    CenterWorstCase,
    SoftmaxCe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    pub alpha: f64,
    /// ℓ∞ budget of the inner maximization, in pixel units.
    pub epsilon: f64,
    pub inner_iters: usize,
    /// Absolute inner step size.
    pub inner_step: f64,
}

impl LossConfig {
    pub fn center() -> Self {
        Self {
            mode: LossMode::CenterClean,
            alpha: 1.0,
            epsilon: 0.0,
            inner_iters: 10,
            inner_step: 0.0,
        }
    }

    /// Worst-case loss with 10 inner steps of `0.25·ε`.
    pub fn worst_case(alpha: f64, epsilon: f64) -> Self {
        Self {
            mode: LossMode::CenterWorstCase,
            alpha,
            epsilon,
            inner_iters: 10,
            inner_step: 0.25 * epsilon,
        }
    }

    pub fn softmax() -> Self {
        Self {
            mode: LossMode::SoftmaxCe,
            ..Self::center()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidLossConfig(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidLossConfig(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if self.mode == LossMode::CenterWorstCase && self.alpha < 1.0 && self.epsilon > 0.0 {
            if !(self.inner_step > 0.0) {
                return Err(Error::InvalidLossConfig("inner step must be positive".into()));
            }
            if self.inner_iters == 0 {
                return Err(Error::InvalidLossConfig("inner iterations must be positive".into()));
            }
        }
        Ok(())
    }

    /// Whether the inner maximization runs at all.
    pub fn needs_inner_attack(&self) -> bool {
        self.mode == LossMode::CenterWorstCase && self.alpha < 1.0 && self.epsilon > 0.0
    }
}

/// Row `i` is the center `w_{y_i}`.
pub fn center_targets(head: &ClassifierWeights, labels: &[usize]) -> Result<DenseTensor> {
    let p = head.features();
    let mut data = Vec::with_capacity(labels.len() * p);
    for &y in labels {
        if y >= head.classes() {
            return Err(Error::InvalidParameter(format!("label {y} out of range")));
        }
        data.extend_from_slice(head.column(y));
    }
    Ok(DenseTensor::from_parts(vec![labels.len(), p], data))
}

fn check_batch(f: &DenseTensor, labels: &[usize]) -> Result<()> {
    if labels.is_empty() || f.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if f.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows for {} labels",
            f.rows(),
            labels.len()
        )));
    }
    Ok(())
}

/// Batch mean of `‖f_i − w_{y_i}‖²`.
pub fn center_loss(head: &ClassifierWeights, features: &DenseTensor, labels: &[usize]) -> Result<f64> {
    check_batch(features, labels)?;
    let targets = center_targets(head, labels)?;
    if features.cols() != head.features() {
        return Err(Error::ShapeMismatch("feature width differs from head".into()));
    }
    let total: f64 = (0..labels.len())
        .map(|i| crate::gradcore::sq_dist(features.row(i), targets.row(i)))
        .sum();
    Ok(total / labels.len() as f64)
}

/// Batch mean softmax cross-entropy of `Wᵀf`.
pub fn ce_loss(head: &ClassifierWeights, features: &DenseTensor, labels: &[usize]) -> Result<f64> {
    check_batch(features, labels)?;
    let z = head_logits(head, features)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= head.classes() {
            return Err(Error::InvalidParameter(format!("label {y} out of range")));
        }
        total += crate::gradcore::softmax_ce(z.row(i), y);
    }
    Ok(total / labels.len() as f64)
}

/// Inner maximizer of `‖f(x′) − w_y‖²` over the ℓ∞ ball, started at the
/// clean input. Each sample keeps its best iterate, so the returned objective
/// never falls below the clean one.
pub fn worst_case_inputs(net: &Network, x: &DenseTensor, labels: &[usize], cfg: &LossConfig) -> Result<DenseTensor> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 || cfg.inner_iters == 0 {
        return Ok(x.clone());
    }
    let plan = PgdPlan {
        norm: Norm::Linf,
        epsilon: cfg.epsilon,
        step: cfg.inner_step,
        iters: cfg.inner_iters,
        random_start: false,
        selection: Selection::Steepest,
        keep_best: true,
    };
    attacks::run_pgd(net, x, labels, &plan, Objective::CenterDistance, 0, 0)
}

/// Loss value, parameter gradients and bookkeeping for one batch.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub clean: f64,
    pub adversarial: Option<f64>,
    /// Gradients in [`crate::models::ModelParams::tensors`] order.
    pub grads: Vec<DenseTensor>,
    /// Clean-input predictions.
    pub predictions: Vec<usize>,
    pub inner_attack_runs: usize,
}

/// Evaluates the configured objective and its gradient with respect to all
/// trainable parameters. Adversarial inputs are treated as constants.
pub fn loss_and_grad(net: &Network, x: &DenseTensor, labels: &[usize], cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    if labels.is_empty() || x.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if x.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs for {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let adversarial_x = if cfg.needs_inner_attack() {
        Some(worst_case_inputs(net, x, labels, cfg)?)
    } else {
        None
    };
    let mut out = loss_and_grad_at(net, x, adversarial_x.as_ref(), labels, cfg)?;
    out.inner_attack_runs = usize::from(adversarial_x.is_some());
    Ok(out)
}

/// [`loss_and_grad`] with the worst-case inputs supplied by the caller. The
/// worst-case term is included exactly when `worst_case` is `Some`.
pub fn loss_and_grad_at(
    net: &Network,
    x: &DenseTensor,
    worst_case: Option<&DenseTensor>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    if labels.is_empty() || x.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if x.rows() != labels.len() || worst_case.is_some_and(|a| a.shape() != x.shape()) {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs for {} labels",
            x.rows(),
            labels.len()
        )));
    }
    if worst_case.is_some() && cfg.mode != LossMode::CenterWorstCase {
        return Err(Error::InvalidLossConfig(
            "worst-case inputs need the worst-case mode".into(),
        ));
    }
    let center_head = || {
        net.head()
            .ok_or_else(|| Error::InvalidLossConfig("center losses need a frozen head".into()))
    };

    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true)?;
    let xv = tape.constant(x.clone())?;
    let clean_fwd = net.forward(&mut tape, xv, &bound)?;
    let clean_per_sample = match cfg.mode {
        LossMode::SoftmaxCe => tape.softmax_ce(clean_fwd.logits, labels)?,
        LossMode::CenterClean | LossMode::CenterWorstCase => {
            tape.sq_dist_rows(clean_fwd.features, center_targets(center_head()?, labels)?)?
        }
    };
    let clean = tape.mean(clean_per_sample)?;
    let clean_value = tape.value(clean).item();

    let (total, adversarial) = match worst_case {
        Some(adv) => {
            let av = tape.constant(adv.clone())?;
            let adv_fwd = net.forward(&mut tape, av, &bound)?;
            let per = tape.sq_dist_rows(adv_fwd.features, center_targets(center_head()?, labels)?)?;
            let adv_loss = tape.mean(per)?;
            let adv_value = tape.value(adv_loss).item();
            let a = tape.scale(clean, cfg.alpha)?;
            let b = tape.scale(adv_loss, 1.0 - cfg.alpha)?;
            (tape.add(a, b)?, Some(adv_value))
        }
        None => (clean, None),
    };

    let logits = tape.value(clean_fwd.logits);
    let predictions = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
    let value = tape.value(total).item();
    let mut grads = tape.backward(total)?;
    let grads = bound
        .iter()
        .zip(net.params().tensors())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| DenseTensor::zeros(p.shape().to_vec())))
        .collect();

    Ok(LossOutput {
        value,
        clean: clean_value,
        adversarial,
        grads,
        predictions,
        inner_attack_runs: 0,
    })
}

/// `α·L(clean) + (1−α)·L(worst case)` for a worst-case config. With `α = 1`
/// no inner attack runs and the result is the clean center loss.
pub fn combined_loss(net: &Network, x: &DenseTensor, labels: &[usize], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.mode != LossMode::CenterWorstCase {
        return Err(Error::InvalidLossConfig(
            "combined loss needs the worst-case mode".into(),
        ));
    }
    let head = net
        .head()
        .ok_or_else(|| Error::InvalidLossConfig("center losses need a frozen head".into()))?;
    let clean = center_loss(head, &net.features(x)?, labels)?;
    if !cfg.needs_inner_attack() {
        return Ok(clean);
    }
    let adv = worst_case_inputs(net, x, labels, cfg)?;
    let adversarial = center_loss(head, &net.features(&adv)?, labels)?;
    Ok(cfg.alpha * clean + (1.0 - cfg.alpha) * adversarial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, EncoderSpec};
    use crate::orthoweights::build_hadamard;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> Network {
        let spec = EncoderSpec {
            input_dim: 20,
            hidden: vec![12],
            activation: Activation::Prelu,
            feature_dim: 16,
            readout: None,
        };
        Network::init(spec, Some(build_hadamard(4, 5, 10.0).unwrap()), seed).unwrap()
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize) -> (DenseTensor, Vec<usize>) {
        let x = DenseTensor::new(vec![n, 20], (0..n * 20).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let y = (0..n).map(|_| rng.random_range(0..5)).collect();
        (x, y)
    }

    #[test]
    fn center_loss_reference_points() {
        let head = build_hadamard(3, 4, 3.0).unwrap();
        let labels = [0, 2, 3];
        let at_centers = center_targets(&head, &labels).unwrap();
        assert_eq!(center_loss(&head, &at_centers, &labels).unwrap(), 0.0);
        let zeros = DenseTensor::zeros(vec![3, 8]);
        assert!((center_loss(&head, &zeros, &labels).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn center_loss_matches_loop() {
        let head = build_hadamard(3, 4, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = DenseTensor::new(vec![5, 8], (0..40).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels = [1, 0, 3, 3, 2];
        let mut oracle = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            for p in 0..8 {
                let d = f.row(i)[p] - head.entry(p, y);
                oracle += d * d;
            }
        }
        oracle /= 5.0;
        assert!((center_loss(&head, &f, &labels).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_reference_points() {
        let head = build_hadamard(3, 4, 3.0).unwrap();
        let zeros = DenseTensor::zeros(vec![2, 8]);
        assert!((ce_loss(&head, &zeros, &[1, 2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let far = DenseTensor::new(vec![1, 8], head.column(2).iter().map(|v| v * 100.0).collect()).unwrap();
        assert!(ce_loss(&head, &far, &[2]).unwrap() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = DenseTensor::new(vec![3, 8], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels = [3, 0, 1];
        let mut oracle = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z: Vec<f64> = (0..4)
                .map(|c| (0..8).map(|p| head.entry(p, c) * f.row(i)[p]).sum())
                .collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            oracle -= (z[y].exp() / denom).ln();
        }
        assert!((ce_loss(&head, &f, &labels).unwrap() - oracle / 3.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_is_clean_center_loss_bitwise() {
        let net = small_net(0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = batch(&mut rng, 6);
        let cfg = LossConfig::worst_case(1.0, 0.3);
        let combined = combined_loss(&net, &x, &y, &cfg).unwrap();
        let clean = center_loss(net.head().unwrap(), &net.features(&x).unwrap(), &y).unwrap();
        assert_eq!(combined.to_bits(), clean.to_bits());
        let out = loss_and_grad(&net, &x, &y, &cfg).unwrap();
        assert_eq!(out.inner_attack_runs, 0);
        assert!(out.adversarial.is_none());
    }

    #[test]
    fn zero_budget_makes_terms_equal() {
        let net = small_net(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = batch(&mut rng, 6);
        let mut cfg = LossConfig::worst_case(0.4, 0.0);
        cfg.inner_step = 0.01;
        let clean = center_loss(net.head().unwrap(), &net.features(&x).unwrap(), &y).unwrap();
        let combined = combined_loss(&net, &x, &y, &cfg).unwrap();
        assert!((combined - clean).abs() < 1e-12);
    }

    #[test]
    fn adversarial_term_dominates_clean_term() {
        let net = small_net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = LossConfig::worst_case(0.15, 0.1);
        let head = net.head().unwrap();
        for _ in 0..100 {
            let (x, y) = batch(&mut rng, 4);
            let clean = center_loss(head, &net.features(&x).unwrap(), &y).unwrap();
            let adv_x = worst_case_inputs(&net, &x, &y, &cfg).unwrap();
            for i in 0..4 {
                let d = (0..20)
                    .map(|j| (adv_x.row(i)[j] - x.row(i)[j]).abs())
                    .fold(0.0, f64::max);
                assert!(d <= 0.1 + 1e-12);
            }
            let adv = center_loss(head, &net.features(&adv_x).unwrap(), &y).unwrap();
            assert!(adv >= clean, "{adv} < {clean}");
            let total = combined_loss(&net, &x, &y, &cfg).unwrap();
            assert!((total - (0.15 * clean + 0.85 * adv)).abs() < 1e-9 * total.max(1.0));
        }
    }

    #[test]
    fn combined_loss_is_linear_in_alpha() {
        let net = small_net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, y) = batch(&mut rng, 5);
        let head = net.head().unwrap();
        let adv_x = worst_case_inputs(&net, &x, &y, &LossConfig::worst_case(0.5, 0.2)).unwrap();
        let clean = center_loss(head, &net.features(&x).unwrap(), &y).unwrap();
        let adv = center_loss(head, &net.features(&adv_x).unwrap(), &y).unwrap();
        let f = |a: f64| a * clean + (1.0 - a) * adv;
        let slope = f(0.9) - f(0.8);
        assert!(((f(0.3) - f(0.2)) - slope).abs() < 1e-9);
        assert!(clean - adv <= 0.0);
    }

    #[test]
    fn invalid_configs() {
        let net = small_net(0);
        let x = DenseTensor::zeros(vec![1, 20]);
        for cfg in [
            LossConfig::worst_case(0.0, 0.1),
            LossConfig::worst_case(1.5, 0.1),
            LossConfig::worst_case(0.5, -0.1),
        ] {
            assert!(matches!(
                combined_loss(&net, &x, &[0], &cfg),
                Err(Error::InvalidLossConfig(_))
            ));
        }
        assert!(matches!(
            combined_loss(&net, &x, &[0], &LossConfig::center()),
            Err(Error::InvalidLossConfig(_))
        ));
    }

    #[test]
    fn losses_are_nonnegative() {
        let net = small_net(4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for cfg in [
            LossConfig::center(),
            LossConfig::softmax(),
            LossConfig::worst_case(0.3, 0.1),
        ] {
            let (x, y) = batch(&mut rng, 3);
            let out = loss_and_grad(&net, &x, &y, &cfg).unwrap();
            assert!(out.value >= 0.0);
            assert_eq!(out.grads.len(), net.params().tensors().len());
        }
    }
}
