//! Norm-bounded evasion attacks in pixel space `[0, 1]`.
//!
//! All gradient attacks ascend the logit margin `max_{j≠y} z_j − z_y`. The
//! inner maximizer used during training shares the same PGD core with the
//! intra-class distance as objective.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{argmax, DenseTensor, Tape};
use crate::losses::center_targets;
use crate::models::Network;
use crate::rng::{stream_rng, Stream};

/// Tolerance used by ball-containment checks.
pub const BALL_TOL: f64 = 1e-9;

/// Added to the DeepFool step length so each step lands past the boundary.
const DEEPFOOL_NUDGE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    Linf,
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    DeepFool,
    Slide,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub norm: Norm,
    pub epsilon: f64,
    pub iters: usize,
    /// Step size as a fraction of `epsilon` (PGD, SLIDE).
    pub rel_step: f64,
    pub overshoot: f64,
    pub random_start: bool,
    /// Fraction of coordinates SLIDE moves per step.
    pub sparsity_q: f64,
}

impl AttackConfig {
    fn base(method: AttackMethod, norm: Norm, epsilon: f64, iters: usize, rel_step: f64) -> Self {
        Self {
            method,
            norm,
            epsilon,
            iters,
            rel_step,
            overshoot: 0.0,
            random_start: false,
            sparsity_q: 0.05,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self::base(AttackMethod::Fgsm, Norm::Linf, epsilon, 1, 1.0)
    }

    /// 20 iterations, step `0.1·ε`, random start.
    pub fn pgd_linf(epsilon: f64) -> Self {
        Self {
            random_start: true,
            ..Self::base(AttackMethod::Pgd, Norm::Linf, epsilon, 20, 0.1)
        }
    }

    /// 50 iterations, step `0.1·ε`, random start.
    pub fn pgd_l2(epsilon: f64) -> Self {
        Self {
            random_start: true,
            ..Self::base(AttackMethod::Pgd, Norm::L2, epsilon, 50, 0.1)
        }
    }

    /// 50 iterations, step `0.05·ε`, random start.
    pub fn pgd_l1(epsilon: f64) -> Self {
        Self {
            random_start: true,
            ..Self::base(AttackMethod::Pgd, Norm::L1, epsilon, 50, 0.05)
        }
    }

    /// 50 iterations, overshoot 0.02.
    pub fn deepfool(epsilon: f64) -> Self {
        Self {
            overshoot: 0.02,
            ..Self::base(AttackMethod::DeepFool, Norm::Linf, epsilon, 50, 0.0)
        }
    }

    /// 50 iterations, step `0.05·ε`, 5% of coordinates per step.
    pub fn slide(epsilon: f64) -> Self {
        Self {
            random_start: true,
            ..Self::base(AttackMethod::Slide, Norm::L1, epsilon, 50, 0.05)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAttackConfig(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be a non-negative number, got {}", self.epsilon));
        }
        if self.iters == 0 {
            return bad("iterations must be at least 1".into());
        }
        if matches!(self.method, AttackMethod::Pgd | AttackMethod::Slide) && !(self.rel_step > 0.0) {
            return bad(format!("relative step must be positive, got {}", self.rel_step));
        }
        if !(self.overshoot >= 0.0) {
            return bad(format!("overshoot must be non-negative, got {}", self.overshoot));
        }
        if !(self.sparsity_q > 0.0 && self.sparsity_q <= 1.0) {
            return bad(format!("sparsity must lie in (0, 1], got {}", self.sparsity_q));
        }
        match (self.method, self.norm) {
            (AttackMethod::Fgsm | AttackMethod::DeepFool, Norm::Linf) => Ok(()),
            (AttackMethod::Slide, Norm::L1) => Ok(()),
            (AttackMethod::Pgd, _) => Ok(()),
            (m, n) => bad(format!("{m:?} does not support the {n:?} norm")),
        }
    }

    /// Short identifier such as `pgd-linf-20`.
    pub fn label(&self) -> String {
        let norm = match self.norm {
            Norm::Linf => "linf",
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        };
        match self.method {
            AttackMethod::Fgsm => "fgsm".into(),
            AttackMethod::Pgd => format!("pgd-{norm}-{}", self.iters),
            AttackMethod::DeepFool => format!("deepfool-{}", self.iters),
            AttackMethod::Slide => format!("slide-{}", self.iters),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub adversarial: DenseTensor,
    /// Prediction on the adversarial input differs from the label.
    pub success: Vec<bool>,
    /// `‖x′ − x‖` in the attack norm.
    pub norms: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// `‖v‖` in the given norm.
pub fn norm_of(v: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Linf => v.iter().fold(0.0, |m, x| f64::max(m, x.abs())),
        Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Euclidean projection of `delta` onto the `ε`-ball of `norm`, in place.
pub fn project(delta: &mut [f64], norm: Norm, epsilon: f64) {
    match norm {
        Norm::Linf => {
            for d in delta.iter_mut() {
                *d = d.clamp(-epsilon, epsilon);
            }
        }
        Norm::L2 => {
            let n = norm_of(delta, Norm::L2);
            if n > epsilon {
                let scale = if n > 0.0 { epsilon / n } else { 0.0 };
                for d in delta.iter_mut() {
                    *d *= scale;
                }
            }
        }
        Norm::L1 => {
            if norm_of(delta, Norm::L1) <= epsilon {
                return;
            }
            if epsilon <= 0.0 {
                delta.fill(0.0);
                return;
            }
            let theta = l1_threshold(delta, epsilon);
            for d in delta.iter_mut() {
                *d = d.signum() * (d.abs() - theta).max(0.0);
            }
        }
    }
}

/// Soft threshold `θ` with `Σ max(|d_i| − θ, 0) = ε`, by sorting.
fn l1_threshold(delta: &[f64], epsilon: f64) -> f64 {
    let mut mags: Vec<f64> = delta.iter().map(|d| d.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &m) in mags.iter().enumerate() {
        cumsum += m;
        let t = (cumsum - epsilon) / (i + 1) as f64;
        if m > t {
            theta = t;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Objective ascended by the PGD core.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `max_{j≠y} z_j − z_y`.
    LogitMargin,
    /// `‖f(x) − w_y‖²`; needs a frozen head.
    CenterDistance,
}

/// Which coordinates a step moves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    /// Steepest ascent for the norm: sign step (ℓ∞), normalized gradient
    /// (ℓ2), single largest coordinate (ℓ1).
    Steepest,
    /// Sign step on the top `q` fraction of movable coordinates by `|g|`.
    Sparse(f64),
}

/// Fully resolved PGD loop.
#[derive(Clone, Debug, PartialEq)]
pub struct PgdPlan {
    pub norm: Norm,
    pub epsilon: f64,
    /// Absolute step size.
    pub step: f64,
    pub iters: usize,
    pub random_start: bool,
    pub selection: Selection,
    /// Return each sample's best iterate (start point included) instead of
    /// the last one.
    pub keep_best: bool,
}

/// Per-sample objective values and input gradients for a batch.
pub fn objective_grad(
    net: &Network,
    x: &DenseTensor,
    labels: &[usize],
    objective: Objective,
) -> Result<(Vec<f64>, DenseTensor)> {
    match objective {
        Objective::LogitMargin => net.input_gradient(x, |t, fwd| t.logit_margin(fwd.logits, labels)),
        Objective::CenterDistance => {
            let head = net
                .head()
                .ok_or_else(|| Error::InvalidAttackConfig("distance objective needs a frozen head".into()))?;
            let targets = center_targets(head, labels)?;
            net.input_gradient(x, move |t, fwd| t.sq_dist_rows(fwd.features, targets))
        }
    }
}

/// Gradient of the logit margin with respect to the inputs.
pub fn attack_loss_grad(net: &Network, x: &DenseTensor, labels: &[usize]) -> Result<DenseTensor> {
    Ok(objective_grad(net, x, labels, Objective::LogitMargin)?.1)
}

fn random_start<R: Rng>(rng: &mut R, norm: Norm, epsilon: f64, d: usize) -> Vec<f64> {
    match norm {
        Norm::Linf => (0..d).map(|_| rng.random_range(-1.0..=1.0) * epsilon).collect(),
        Norm::L2 => {
            let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = norm_of(&g, Norm::L2);
            let r = epsilon * rng.random::<f64>().powf(1.0 / d as f64);
            g.into_iter().map(|v| if n > 0.0 { v / n * r } else { 0.0 }).collect()
        }
        Norm::L1 => {
            // First d of d+1 normalized exponentials are uniform on the simplex interior.
            let e: Vec<f64> = (0..=d).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = e.iter().sum();
            e[..d]
                .iter()
                .map(|v| {
                    let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    s * epsilon * v / total
                })
                .collect()
        }
    }
}

fn movable(x: f64, g: f64) -> bool {
    (g > 0.0 && x < 1.0) || (g < 0.0 && x > 0.0)
}

/// Adds one ascent step to `delta` for a single sample.
fn step_into(delta: &mut [f64], x_adv: &[f64], g: &[f64], plan: &PgdPlan) {
    match (plan.selection, plan.norm) {
        (Selection::Steepest, Norm::Linf) => {
            for (d, gi) in delta.iter_mut().zip(g) {
                *d += plan.step * sign(*gi);
            }
        }
        (Selection::Steepest, Norm::L2) => {
            let n = norm_of(g, Norm::L2);
            if n > 0.0 {
                for (d, gi) in delta.iter_mut().zip(g) {
                    *d += plan.step * gi / n;
                }
            }
        }
        (Selection::Steepest, Norm::L1) => {
            let mut best: Option<usize> = None;
            for i in 0..g.len() {
                if movable(x_adv[i], g[i]) && best.is_none_or(|b| g[i].abs() > g[b].abs()) {
                    best = Some(i);
                }
            }
            if let Some(i) = best {
                delta[i] += plan.step * sign(g[i]);
            }
        }
        (Selection::Sparse(q), _) => {
            let mut idx: Vec<usize> = (0..g.len()).filter(|&i| movable(x_adv[i], g[i])).collect();
            if idx.is_empty() {
                return;
            }
            let keep = ((q * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
            // Stable ordering: larger |g| first, then lower index.
            idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
            for &i in &idx[..keep] {
                delta[i] += plan.step * sign(g[i]);
            }
        }
    }
}

/// Runs the PGD core on a batch. Sample `i` draws its random start from the
/// attack stream at index `offset + i`.
pub fn run_pgd(
    net: &Network,
    x: &DenseTensor,
    labels: &[usize],
    plan: &PgdPlan,
    objective: Objective,
    seed: u64,
    offset: u64,
) -> Result<DenseTensor> {
    if !(plan.epsilon >= 0.0) || plan.iters == 0 {
        return Err(Error::InvalidAttackConfig(
            "PGD needs ε ≥ 0 and at least one iteration".into(),
        ));
    }
    if x.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs for {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let (n, d) = (x.rows(), x.cols());
    let mut delta = DenseTensor::zeros(vec![n, d]);
    if plan.random_start && plan.epsilon > 0.0 {
        for i in 0..n {
            let mut rng = stream_rng(seed, Stream::Attack, offset + i as u64);
            delta
                .row_mut(i)
                .copy_from_slice(&random_start(&mut rng, plan.norm, plan.epsilon, d));
        }
    }
    let mut adv = x.clone();
    apply(&mut adv, &mut delta, x);

    let mut best = plan.keep_best.then(|| (adv.clone(), vec![f64::NEG_INFINITY; n]));
    let record = |best: &mut Option<(DenseTensor, Vec<f64>)>, adv: &DenseTensor, values: &[f64]| {
        if let Some((b, scores)) = best {
            for i in 0..n {
                if values[i] > scores[i] {
                    scores[i] = values[i];
                    b.row_mut(i).copy_from_slice(adv.row(i));
                }
            }
        }
    };

    for _ in 0..plan.iters {
        let (values, g) = objective_grad(net, &adv, labels, objective)?;
        record(&mut best, &adv, &values);
        for i in 0..n {
            let row = delta.row_mut(i);
            step_into(row, adv.row(i), g.row(i), plan);
            project(row, plan.norm, plan.epsilon);
        }
        apply(&mut adv, &mut delta, x);
    }

    if best.is_some() {
        let (values, _) = objective_grad(net, &adv, labels, objective)?;
        record(&mut best, &adv, &values);
    }
    Ok(best.map_or(adv, |b| b.0))
}

/// `adv = clamp(x + δ)`, then `δ = adv − x` so clamping is reflected in δ.
fn apply(adv: &mut DenseTensor, delta: &mut DenseTensor, x: &DenseTensor) {
    for ((a, d), xi) in adv.data_mut().iter_mut().zip(delta.data_mut()).zip(x.data()) {
        *a = (xi + *d).clamp(0.0, 1.0);
        *d = *a - xi;
    }
}

fn finish(
    net: &Network,
    x: &DenseTensor,
    labels: &[usize],
    adversarial: DenseTensor,
    norm: Norm,
) -> Result<AttackResult> {
    let predictions = net.predict_batch(&adversarial)?;
    let norms = (0..x.rows())
        .map(|i| {
            let diff: Vec<f64> = adversarial.row(i).iter().zip(x.row(i)).map(|(a, b)| a - b).collect();
            norm_of(&diff, norm)
        })
        .collect();
    let success = predictions.iter().zip(labels).map(|(p, y)| p != y).collect();
    Ok(AttackResult {
        adversarial,
        success,
        norms,
        predictions,
    })
}

/// `x′ = clamp(x + ε·sign(∇ₓ margin))`.
pub fn fgsm(net: &Network, x: &DenseTensor, labels: &[usize], epsilon: f64) -> Result<AttackResult> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidAttackConfig(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    let g = attack_loss_grad(net, x, labels)?;
    let mut adv = x.clone();
    for (a, gi) in adv.data_mut().iter_mut().zip(g.data()) {
        *a = (*a + epsilon * sign(*gi)).clamp(0.0, 1.0);
    }
    finish(net, x, labels, adv, Norm::Linf)
}

/// Evaluation PGD with the configured norm; returns the last iterate.
pub fn pgd(
    net: &Network,
    x: &DenseTensor,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
    offset: u64,
) -> Result<AttackResult> {
    cfg.validate()?;
    let plan = PgdPlan {
        norm: cfg.norm,
        epsilon: cfg.epsilon,
        step: cfg.rel_step * cfg.epsilon,
        iters: cfg.iters,
        random_start: cfg.random_start,
        selection: Selection::Steepest,
        keep_best: false,
    };
    let adv = run_pgd(net, x, labels, &plan, Objective::LogitMargin, seed, offset)?;
    finish(net, x, labels, adv, cfg.norm)
}

/// ℓ1 attack moving the top `sparsity_q` fraction of coordinates per step.
pub fn slide(
    net: &Network,
    x: &DenseTensor,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
    offset: u64,
) -> Result<AttackResult> {
    cfg.validate()?;
    let plan = PgdPlan {
        norm: Norm::L1,
        epsilon: cfg.epsilon,
        step: cfg.rel_step * cfg.epsilon,
        iters: cfg.iters,
        random_start: cfg.random_start,
        selection: Selection::Sparse(cfg.sparsity_q),
        keep_best: false,
    };
    let adv = run_pgd(net, x, labels, &plan, Objective::LogitMargin, seed, offset)?;
    finish(net, x, labels, adv, Norm::L1)
}

/// Unconstrained DeepFool outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepFoolTrace {
    pub adversarial: DenseTensor,
    pub flipped: Vec<bool>,
    /// ℓ∞ norm of the final perturbation.
    pub norms: Vec<f64>,
    pub iterations: Vec<usize>,
}

/// DeepFool in ℓ∞ geometry without a budget. Each iteration linearizes all
/// logit differences and steps to the nearest linearized boundary; the
/// accumulated step is scaled by `1 + overshoot`.
pub fn deepfool_unbounded(
    net: &Network,
    x: &DenseTensor,
    labels: &[usize],
    iters: usize,
    overshoot: f64,
) -> Result<DeepFoolTrace> {
    let (n, d) = (x.rows(), x.cols());
    let k = net.classes();
    let mut adv = x.clone();
    let mut total = vec![vec![0.0; d]; n];
    let mut iterations = vec![0; n];
    let mut active: Vec<usize> = {
        let preds = net.predict_batch(x)?;
        (0..n).filter(|&i| preds[i] == labels[i]).collect()
    };
    let mut flipped = vec![false; n];
    for i in 0..n {
        flipped[i] = !active.contains(&i);
    }

    for _ in 0..iters {
        if active.is_empty() {
            break;
        }
        let xa = adv.select_rows(&active);
        let m = active.len();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false)?;
        let xv = tape.leaf(xa, true)?;
        let fwd = net.forward(&mut tape, xv, &bound)?;
        let z = tape.value(fwd.logits).clone();
        let mut grads = Vec::with_capacity(k);
        for c in 0..k {
            let mut seed = DenseTensor::zeros(vec![m, k]);
            for r in 0..m {
                seed.row_mut(r)[c] = 1.0;
            }
            let mut g = tape.backward_with_seed(fwd.logits, seed)?;
            grads.push(g.take(xv).unwrap_or_else(|| DenseTensor::zeros(vec![m, d])));
        }
        let mut still = Vec::with_capacity(m);
        for (r, &i) in active.iter().enumerate() {
            let y = labels[i];
            if argmax(z.row(r)) != y {
                flipped[i] = true;
                continue;
            }
            let mut best: Option<(f64, f64, Vec<f64>)> = None;
            for c in (0..k).filter(|&c| c != y) {
                let f = z.row(r)[c] - z.row(r)[y];
                let w: Vec<f64> = grads[c]
                    .row(r)
                    .iter()
                    .zip(grads[y].row(r))
                    .map(|(a, b)| a - b)
                    .collect();
                let wn = norm_of(&w, Norm::L1);
                if wn == 0.0 {
                    continue;
                }
                let dist = f.abs() / wn;
                if best.as_ref().is_none_or(|b| dist < b.0) {
                    best = Some((dist, (f.abs() + DEEPFOOL_NUDGE) / wn, w));
                }
            }
            let Some((_, len, w)) = best else { continue };
            for (t, wi) in total[i].iter_mut().zip(&w) {
                *t += len * sign(*wi);
            }
            iterations[i] += 1;
            let row = adv.row_mut(i);
            for j in 0..d {
                row[j] = (x.row(i)[j] + (1.0 + overshoot) * total[i][j]).clamp(0.0, 1.0);
            }
            still.push(i);
        }
        active = still;
    }
    if !active.is_empty() {
        let preds = net.predict_batch(&adv.select_rows(&active))?;
        for (p, &i) in preds.iter().zip(&active) {
            flipped[i] = *p != labels[i];
        }
    }
    let norms = (0..n)
        .map(|i| {
            adv.row(i)
                .iter()
                .zip(x.row(i))
                .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
        })
        .collect();
    Ok(DeepFoolTrace {
        adversarial: adv,
        flipped,
        norms,
        iterations,
    })
}

/// Budgeted DeepFool: the unconstrained perturbation is projected onto the
/// ℓ∞ `ε`-ball, so success means a flip within `ε`.
pub fn deepfool(net: &Network, x: &DenseTensor, labels: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let trace = deepfool_unbounded(net, x, labels, cfg.iters, cfg.overshoot)?;
    let mut adv = trace.adversarial;
    for (a, xi) in adv.data_mut().iter_mut().zip(x.data()) {
        *a = (xi + (*a - xi).clamp(-cfg.epsilon, cfg.epsilon)).clamp(0.0, 1.0);
    }
    finish(net, x, labels, adv, Norm::Linf)
}

/// Dispatches on `cfg.method`.
pub fn run_attack(
    net: &Network,
    x: &DenseTensor,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
    offset: u64,
) -> Result<AttackResult> {
    cfg.validate()?;
    match cfg.method {
        AttackMethod::Fgsm => fgsm(net, x, labels, cfg.epsilon),
        AttackMethod::Pgd => pgd(net, x, labels, cfg, seed, offset),
        AttackMethod::DeepFool => deepfool(net, x, labels, cfg),
        AttackMethod::Slide => slide(net, x, labels, cfg, seed, offset),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub label: usize,
    pub clean_pred: usize,
    pub adv_pred: usize,
    pub perturbation_norm: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustEval {
    pub clean_accuracy: f64,
    /// Fraction correct both before and after the attack.
    pub robust_accuracy: f64,
    pub records: Vec<SampleRecord>,
}

impl RobustEval {
    /// Writes one CSV row per sample.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Attacks `x` in batches of `batch` rows (in parallel when a rayon pool is
/// active) and reports clean and robust accuracy.
pub fn robust_accuracy(
    net: &Network,
    x: &DenseTensor,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
    batch: usize,
) -> Result<RobustEval> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if x.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs for {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let batch = batch.max(1);
    let starts: Vec<usize> = (0..x.rows()).step_by(batch).collect();
    let chunks: Vec<Vec<SampleRecord>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + batch).min(x.rows());
            let idx: Vec<usize> = (start..end).collect();
            let xb = x.select_rows(&idx);
            let yb = &labels[start..end];
            let clean = net.predict_batch(&xb)?;
            let res = run_attack(net, &xb, yb, cfg, seed, start as u64)?;
            Ok((0..idx.len())
                .map(|r| SampleRecord {
                    sample_id: start + r,
                    label: yb[r],
                    clean_pred: clean[r],
                    adv_pred: res.predictions[r],
                    perturbation_norm: res.norms[r],
                    success: res.success[r],
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let records: Vec<SampleRecord> = chunks.into_iter().flatten().collect();
    let n = records.len() as f64;
    let clean = records.iter().filter(|r| r.clean_pred == r.label).count() as f64;
    let robust = records
        .iter()
        .filter(|r| r.clean_pred == r.label && r.adv_pred == r.label)
        .count() as f64;
    Ok(RobustEval {
        clean_accuracy: clean / n,
        robust_accuracy: robust / n,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, EncoderSpec, Layer, ModelParams};
    use crate::orthoweights::build_hadamard;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Projection onto the ℓ1 ball by bisection on the soft threshold.
    fn l1_bisection(v: &[f64], eps: f64) -> Vec<f64> {
        if norm_of(v, Norm::L1) <= eps {
            return v.to_vec();
        }
        let mass = |t: f64| v.iter().map(|x| (x.abs() - t).max(0.0)).sum::<f64>();
        let (mut lo, mut hi) = (0.0, norm_of(v, Norm::Linf));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mass(mid) > eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        v.iter().map(|x| x.signum() * (x.abs() - t).max(0.0)).collect()
    }

    fn mlp(seed: u64) -> Network {
        let spec = EncoderSpec {
            input_dim: 12,
            hidden: vec![10],
            activation: Activation::Prelu,
            feature_dim: 8,
            readout: None,
        };
        Network::init(spec, Some(build_hadamard(3, 4, 3.0).unwrap()), seed).unwrap()
    }

    fn inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DenseTensor {
        DenseTensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap()
    }

    /// Two-class linear readout `z = xᵀA + b` over an identity encoder.
    fn linear_binary(a: &[f64; 2], b: [f64; 2], d: usize) -> Network {
        let mut spec = EncoderSpec::linear(d, d);
        spec.readout = Some(2);
        let mut eye = DenseTensor::zeros(vec![d, d]);
        for i in 0..d {
            eye.row_mut(i)[i] = 1.0;
        }
        let mut w = DenseTensor::zeros(vec![d, 2]);
        for i in 0..d {
            let sgn = if i % 2 == 0 { 1.0 } else { -1.0 };
            w.row_mut(i)[0] = a[0] * sgn * (1.0 + i as f64 * 0.1);
            w.row_mut(i)[1] = a[1] * sgn * (1.0 + i as f64 * 0.05);
        }
        let params = ModelParams {
            layers: vec![Layer {
                weight: eye,
                bias: DenseTensor::zeros(vec![d]),
            }],
            slopes: vec![],
            readout: Some(Layer {
                weight: w,
                bias: DenseTensor::new(vec![2], b.to_vec()).unwrap(),
            }),
            seed: 0,
        };
        Network::new(spec, params, None).unwrap()
    }

    #[test]
    fn l1_projection_matches_bisection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let d = rng.random_range(5..=50);
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eps = rng.random_range(0.01..2.0);
            let mut p = v.clone();
            project(&mut p, Norm::L1, eps);
            for (a, b) in p.iter().zip(l1_bisection(&v, eps)) {
                assert!((a - b).abs() < 1e-9);
            }
            assert!(norm_of(&p, Norm::L1) <= eps + 1e-9);
        }
    }

    #[test]
    fn closed_form_projections() {
        let mut v = vec![3.0, -4.0];
        project(&mut v, Norm::L2, 2.5);
        assert!((v[0] - 1.5).abs() < 1e-15 && (v[1] + 2.0).abs() < 1e-15);
        let mut v = vec![0.3, -0.05, -0.9];
        project(&mut v, Norm::Linf, 0.1);
        assert_eq!(v, vec![0.1, -0.05, -0.1]);
        let inside = vec![0.01, -0.02, 0.03];
        for norm in [Norm::Linf, Norm::L1, Norm::L2] {
            let mut p = inside.clone();
            project(&mut p, norm, 1.0);
            assert_eq!(p, inside);
        }
        let mut z = vec![1.0, -1.0];
        project(&mut z, Norm::L1, 0.0);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for norm in [Norm::Linf, Norm::L1, Norm::L2] {
            for _ in 0..500 {
                let v: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut once = v.clone();
                project(&mut once, norm, 0.5);
                let mut twice = once.clone();
                project(&mut twice, norm, 0.5);
                for (a, b) in once.iter().zip(&twice) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn random_starts_lie_in_the_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for norm in [Norm::Linf, Norm::L1, Norm::L2] {
            for _ in 0..200 {
                let v = random_start(&mut rng, norm, 0.3, 25);
                assert!(norm_of(&v, norm) <= 0.3 + BALL_TOL);
            }
        }
    }

    #[test]
    fn zero_budget_fgsm_is_identity() {
        let net = mlp(0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = inputs(&mut rng, 6, 12);
        let y = vec![0, 1, 2, 3, 0, 1];
        let r = fgsm(&net, &x, &y, 0.0).unwrap();
        assert_eq!(r.adversarial, x);
        let clean = net.predict_batch(&x).unwrap();
        for i in 0..6 {
            assert_eq!(r.success[i], clean[i] != y[i]);
        }
    }

    #[test]
    fn single_step_pgd_equals_fgsm_bitwise() {
        let net = mlp(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = inputs(&mut rng, 8, 12);
        let y: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let mut cfg = AttackConfig::pgd_linf(0.2);
        cfg.iters = 1;
        cfg.random_start = false;
        let p = pgd(&net, &x, &y, &cfg, 0, 0).unwrap();
        let f = fgsm(&net, &x, &y, cfg.rel_step * cfg.epsilon).unwrap();
        let bits = |t: &DenseTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.adversarial), bits(&f.adversarial));
    }

    #[test]
    fn fgsm_flips_linear_model() {
        let net = linear_binary(&[1.0, -1.0], [0.05, 0.0], 4);
        let x = DenseTensor::new(vec![1, 4], vec![0.5; 4]).unwrap();
        let y = net.predict_batch(&x).unwrap()[0];
        let z = net.logits(&x).unwrap();
        let margin = (z.row(0)[0] - z.row(0)[1]).abs();
        let w = &net.params().readout.as_ref().unwrap().weight;
        let dual: f64 = (0..4).map(|i| (w.row(i)[0] - w.row(i)[1]).abs()).sum();
        let needed = margin / dual;
        assert!(fgsm(&net, &x, &[y], needed * 1.5).unwrap().success[0]);
        assert!(!fgsm(&net, &x, &[y], needed * 0.5).unwrap().success[0]);
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let net = linear_binary(&[0.0, 0.0], [1.0, 0.0], 3);
        let x = DenseTensor::new(vec![1, 3], vec![0.2, 0.4, 0.6]).unwrap();
        let r = fgsm(&net, &x, &[0], 0.3).unwrap();
        assert_eq!(r.adversarial, x);
    }

    #[test]
    fn attacks_stay_in_ball_and_range() {
        let net = mlp(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = inputs(&mut rng, 10, 12);
        let y: Vec<usize> = (0..10).map(|i| i % 4).collect();
        let configs = [
            AttackConfig::fgsm(0.1),
            AttackConfig::pgd_linf(0.1),
            AttackConfig::pgd_l2(0.5),
            AttackConfig::pgd_l1(2.0),
            AttackConfig::deepfool(0.1),
            AttackConfig::slide(2.0),
        ];
        for cfg in configs {
            let r = run_attack(&net, &x, &y, &cfg, 9, 0).unwrap();
            for i in 0..10 {
                let diff: Vec<f64> = r.adversarial.row(i).iter().zip(x.row(i)).map(|(a, b)| a - b).collect();
                assert!(norm_of(&diff, cfg.norm) <= cfg.epsilon + BALL_TOL, "{}", cfg.label());
                assert!(r.adversarial.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn zero_budget_pgd_has_zero_norms() {
        let net = mlp(3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = inputs(&mut rng, 4, 12);
        let y = vec![0, 1, 2, 3];
        for cfg in [
            AttackConfig::pgd_linf(0.0),
            AttackConfig::slide(0.0),
            AttackConfig::pgd_l2(0.0),
        ] {
            let r = run_attack(&net, &x, &y, &cfg, 0, 0).unwrap();
            assert!(r.norms.iter().all(|&n| n == 0.0));
            assert_eq!(r.adversarial, x);
        }
    }

    #[test]
    fn dense_slide_matches_dense_sign_l1_pgd() {
        let net = mlp(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = inputs(&mut rng, 5, 12);
        let y = vec![0, 1, 2, 3, 0];
        let mut cfg = AttackConfig::slide(1.5);
        cfg.sparsity_q = 1.0;
        let s = slide(&net, &x, &y, &cfg, 3, 0).unwrap();
        let plan = PgdPlan {
            norm: Norm::L1,
            epsilon: 1.5,
            step: cfg.rel_step * 1.5,
            iters: cfg.iters,
            random_start: true,
            selection: Selection::Sparse(1.0),
            keep_best: false,
        };
        let p = run_pgd(&net, &x, &y, &plan, Objective::LogitMargin, 3, 0).unwrap();
        assert_eq!(s.adversarial, p);
    }

    #[test]
    fn deepfool_matches_linear_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let a = [rng.random_range(0.5..1.5), rng.random_range(-1.5..-0.5)];
            let net = linear_binary(&a, [0.0, 0.0], 6);
            let x = DenseTensor::new(vec![1, 6], (0..6).map(|_| rng.random_range(0.4..0.6)).collect()).unwrap();
            let label = net.predict_batch(&x).unwrap()[0];
            let z = net.logits(&x).unwrap();
            let margin = (z.row(0)[0] - z.row(0)[1]).abs();
            let w = net.params().readout.as_ref().unwrap().weight.clone();
            let wdiff: f64 = (0..6).map(|i| (w.row(i)[0] - w.row(i)[1]).abs()).sum();
            let analytic = margin / wdiff;
            if analytic > 0.35 {
                continue;
            }
            let t = deepfool_unbounded(&net, &x, &[label], 50, 0.0).unwrap();
            assert!(t.flipped[0]);
            assert_eq!(t.iterations[0], 1);
            assert!((t.norms[0] - analytic).abs() <= 0.01 * analytic + 1e-3 / wdiff);

            let t2 = deepfool_unbounded(&net, &x, &[label], 50, 0.02).unwrap();
            assert!((t2.norms[0] - 1.02 * t.norms[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn deepfool_skips_misclassified_and_respects_cap() {
        let net = linear_binary(&[1.0, -1.0], [0.0, 0.0], 4);
        let x = DenseTensor::new(vec![1, 4], vec![0.5; 4]).unwrap();
        let pred = net.predict_batch(&x).unwrap()[0];
        let wrong = 1 - pred;
        let t = deepfool_unbounded(&net, &x, &[wrong], 50, 0.02).unwrap();
        assert_eq!(t.iterations[0], 0);
        assert_eq!(t.norms[0], 0.0);

        // A model whose margin cannot be reversed inside [0,1] never flips.
        let far = linear_binary(&[1.0, -1.0], [100.0, 0.0], 4);
        let t = deepfool_unbounded(&far, &x, &[0], 5, 0.02).unwrap();
        assert!(!t.flipped[0]);
        let r = deepfool(&far, &x, &[0], &AttackConfig::deepfool(0.1)).unwrap();
        assert!(!r.success[0]);
    }

    #[test]
    fn robust_accuracy_is_deterministic_and_ordered() {
        let net = mlp(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = inputs(&mut rng, 23, 12);
        let y: Vec<usize> = (0..23).map(|i| i % 4).collect();
        let cfg = AttackConfig::pgd_linf(0.1);
        let a = robust_accuracy(&net, &x, &y, &cfg, 4, 5).unwrap();
        let b = robust_accuracy(&net, &x, &y, &cfg, 4, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.records.iter().enumerate().all(|(i, r)| r.sample_id == i));
        assert!(a.robust_accuracy <= a.clean_accuracy);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_id,label,clean_pred,adv_pred,perturbation_norm,success\n"));
        assert_eq!(text.lines().count(), 24);
    }

    #[test]
    fn random_start_depends_on_global_index_only() {
        let net = mlp(6);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = inputs(&mut rng, 12, 12);
        let y: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let cfg = AttackConfig::pgd_linf(0.1);
        let a = robust_accuracy(&net, &x, &y, &cfg, 7, 12).unwrap();
        let b = robust_accuracy(&net, &x, &y, &cfg, 7, 5).unwrap();
        let c = robust_accuracy(&net, &x, &y, &cfg, 7, 1).unwrap();
        for ((ra, rb), rc) in a.records.iter().zip(&b.records).zip(&c.records) {
            assert_eq!(ra.adv_pred, rb.adv_pred);
            assert_eq!(ra.adv_pred, rc.adv_pred);
            assert!((ra.perturbation_norm - rb.perturbation_norm).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_attack_configs() {
        let mut c = AttackConfig::pgd_linf(-0.1);
        assert!(c.validate().is_err());
        c.epsilon = 0.1;
        c.iters = 0;
        assert!(c.validate().is_err());
        let mut c = AttackConfig::slide(1.0);
        c.sparsity_q = 0.0;
        assert!(c.validate().is_err());
        let mut c = AttackConfig::deepfool(0.1);
        c.norm = Norm::L2;
        assert!(c.validate().is_err());
    }
}
