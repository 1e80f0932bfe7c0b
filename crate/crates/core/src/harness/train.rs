use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradcore::{DenseTensor, Sgd, StepDecay};
use crate::losses::{loss_and_grad, LossConfig};
use crate::models::{EncoderSpec, Network};
use crate::orthoweights::{build_hadamard, build_max_mahalanobis, ClassifierWeights};
use crate::rng::{stream_rng, Stream};

use super::config::{HeadConfig, HeadKind, OptimizerConfig};

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the batch losses.
    pub loss: f64,
    /// Clean accuracy on the batches as they were seen.
    pub train_accuracy: f64,
    pub inner_attack_runs: usize,
}

/// Frozen head for `feature_dim` features, or `None` for a learned readout.
pub fn build_head(head: &HeadConfig, feature_dim: usize) -> Result<Option<ClassifierWeights>> {
    match head.kind {
        HeadKind::Dense => {
            if !feature_dim.is_power_of_two() || feature_dim < 2 {
                return Err(Error::Config(format!(
                    "dense head needs a power-of-two feature dimension, got {feature_dim}"
                )));
            }
            Ok(Some(build_hadamard(
                feature_dim.trailing_zeros(),
                head.classes,
                head.scale,
            )?))
        }
        HeadKind::MaxMahalanobis => Ok(Some(build_max_mahalanobis(feature_dim, head.classes, head.scale)?)),
        HeadKind::Learned => Ok(None),
    }
}

/// Fresh network for `spec` with the configured head.
pub fn build_network(spec: EncoderSpec, head: &HeadConfig, seed: u64) -> Result<Network> {
    let weights = build_head(head, spec.feature_dim)?;
    Network::init(spec, weights, seed)
}

/// Minibatch SGD on the encoder (and readout); a frozen head never changes.
/// Epoch `e` visits the samples in the permutation drawn from the shuffle
/// stream at index `e`.
pub fn train_network(
    net: &mut Network,
    data: &Dataset,
    loss: &LossConfig,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    loss.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let schedule = StepDecay::new(opt.lr, opt.milestones.clone());
    let mut sgd = Sgd::new(opt.momentum);
    let mut log = Vec::with_capacity(opt.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..opt.epochs {
        let lr = schedule.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch as u64));
        let (mut loss_sum, mut correct, mut runs) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(opt.batch_size) {
            let x = data.inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let out = loss_and_grad(net, &x, &y, loss)?;
            loss_sum += out.value * chunk.len() as f64;
            correct += out.predictions.iter().zip(&y).filter(|(p, t)| p == t).count();
            runs += out.inner_attack_runs;
            let mut params = net.params_mut().tensors_mut();
            sgd.step(&mut params, &out.grads, lr)?;
        }
        log.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            inner_attack_runs: runs,
        });
    }
    Ok(log)
}

/// Clean accuracy, evaluated in batches.
pub fn accuracy(net: &Network, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0;
    for start in (0..data.len()).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(data.len())).collect();
        let preds = net.predict_batch(&data.inputs.select_rows(&idx))?;
        correct += preds.iter().zip(&idx).filter(|(p, &i)| **p == data.labels[i]).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassStats {
    pub class: usize,
    pub count: usize,
    pub mean_distance: f64,
    pub max_distance: f64,
}

/// Distances of features to their assigned centers.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub per_class: Vec<ClassStats>,
    /// `K × K` Euclidean distances between centers.
    pub center_distances: DenseTensor,
    /// Mean over samples of `‖f(x) − w_y‖`.
    pub mean_intra: f64,
    pub min_inter: f64,
}

pub fn feature_stats(net: &Network, data: &Dataset, batch: usize) -> Result<FeatureStats> {
    let head = net
        .head()
        .ok_or_else(|| Error::InvalidParameter("feature statistics need a frozen head".into()))?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = head.classes();
    let mut sums = vec![0.0; k];
    let mut maxes = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for start in (0..data.len()).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(data.len())).collect();
        let f = net.features(&data.inputs.select_rows(&idx))?;
        for (r, &i) in idx.iter().enumerate() {
            let y = data.labels[i];
            let d = crate::gradcore::sq_dist(f.row(r), head.column(y)).sqrt();
            sums[y] += d;
            maxes[y] = maxes[y].max(d);
            counts[y] += 1;
        }
    }
    let per_class = (0..k)
        .map(|c| ClassStats {
            class: c,
            count: counts[c],
            mean_distance: if counts[c] > 0 { sums[c] / counts[c] as f64 } else { 0.0 },
            max_distance: maxes[c],
        })
        .collect();
    let mut dist = vec![0.0; k * k];
    let mut min_inter = f64::INFINITY;
    for i in 0..k {
        for j in 0..k {
            let d = crate::gradcore::sq_dist(head.column(i), head.column(j)).sqrt();
            dist[i * k + j] = d;
            if i != j {
                min_inter = min_inter.min(d);
            }
        }
    }
    Ok(FeatureStats {
        per_class,
        center_distances: DenseTensor::new(vec![k, k], dist)?,
        mean_intra: sums.iter().sum::<f64>() / data.len() as f64,
        min_inter,
    })
}
