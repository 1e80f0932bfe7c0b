//! Fully connected encoders and the classifiers built on top of them.
//!
//! A [`Network`] is an encoder `f` followed either by a frozen
//! [`ClassifierWeights`] head (`scores = Wᵀf`, no bias) or, for the
//! standard-training baseline, a trainable linear readout.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{argmax, DenseTensor, Tape, Var};
use crate::losses::LossMode;
use crate::orthoweights::ClassifierWeights;
use crate::rng::{stream_rng, Stream};

/// Initial PReLU slope for every channel.
pub const PRELU_INIT: f64 = 0.25;

const CHECKPOINT_MAGIC: &[u8; 4] = b"ORTM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Prelu,
    Identity,
}

/// Architecture of an MLP encoder. The activation follows every affine
/// layer, including the one producing the features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub feature_dim: usize,
    /// Trainable linear readout to this many classes instead of a frozen head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readout: Option<usize>,
}

impl EncoderSpec {
    /// `784 → 512 → 256` PReLU encoder used for the MNIST robustness runs.
    pub fn mnist_default() -> Self {
        Self {
            input_dim: 784,
            hidden: vec![512],
            activation: Activation::Prelu,
            feature_dim: 256,
            readout: None,
        }
    }

    /// Single affine layer without activation.
    pub fn linear(input_dim: usize, feature_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: Vec::new(),
            activation: Activation::Identity,
            feature_dim,
            readout: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidSpec(format!("zero-width layer in {self:?}")));
        }
        if self.activation == Activation::Identity && !self.hidden.is_empty() {
            return Err(Error::InvalidSpec(
                "identity activation is only allowed for a single-layer encoder".into(),
            ));
        }
        if matches!(self.readout, Some(k) if k < 2) {
            return Err(Error::InvalidSpec("readout needs at least two classes".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every encoder layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.feature_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weight: DenseTensor,
    pub bias: DenseTensor,
}

impl Layer {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: DenseTensor::from_parts(vec![fan_in, fan_out], weight),
            bias: DenseTensor::zeros(vec![fan_out]),
        }
    }
}

/// Trainable parameters of an encoder (and optional readout).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
    /// One slope vector per layer when the activation is PReLU.
    pub slopes: Vec<DenseTensor>,
    pub readout: Option<Layer>,
    pub seed: u64,
}

impl ModelParams {
    /// Parameters in canonical order: per layer weight, bias, slope; then
    /// readout weight and bias.
    pub fn tensors(&self) -> Vec<&DenseTensor> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(&layer.weight);
            out.push(&layer.bias);
            if let Some(s) = self.slopes.get(i) {
                out.push(s);
            }
        }
        if let Some(r) = &self.readout {
            out.push(&r.weight);
            out.push(&r.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseTensor> {
        let mut out = Vec::new();
        let mut slopes = self.slopes.iter_mut();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(s) = slopes.next() {
                out.push(s);
            }
        }
        if let Some(r) = &mut self.readout {
            out.push(&mut r.weight);
            out.push(&mut r.bias);
        }
        out
    }

    /// Confirms every tensor matches the shapes implied by `spec`.
    pub fn check_against(&self, spec: &EncoderSpec) -> Result<()> {
        let dims = spec.layer_dims();
        let mismatch = |what: String| Err(Error::ShapeMismatch(what));
        if self.layers.len() != dims.len() {
            return mismatch(format!("{} layers for a {}-layer spec", self.layers.len(), dims.len()));
        }
        for (i, (layer, &(fan_in, fan_out))) in self.layers.iter().zip(&dims).enumerate() {
            if layer.weight.shape() != [fan_in, fan_out] || layer.bias.shape() != [fan_out] {
                return mismatch(format!("layer {i} shapes do not match {fan_in}→{fan_out}"));
            }
        }
        let want_slopes = spec.activation == Activation::Prelu;
        if want_slopes {
            if self.slopes.len() != dims.len() || self.slopes.iter().zip(&dims).any(|(s, &(_, out))| s.shape() != [out])
            {
                return mismatch("PReLU slope shapes".into());
            }
        } else if !self.slopes.is_empty() {
            return mismatch("slopes present for an identity encoder".into());
        }
        match (&self.readout, spec.readout) {
            (None, None) => {}
            (Some(r), Some(k)) if r.weight.shape() == [spec.feature_dim, k] && r.bias.shape() == [k] => {}
            _ => return mismatch("readout does not match spec".into()),
        }
        if self.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }
}

/// Uniform `±1/√fan_in` weights, zero biases, PReLU slopes at 0.25.
pub fn init_params(spec: &EncoderSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let layers: Vec<Layer> = spec
        .layer_dims()
        .into_iter()
        .map(|(i, o)| Layer::init(i, o, &mut rng))
        .collect();
    let slopes = match spec.activation {
        Activation::Prelu => layers
            .iter()
            .map(|l| DenseTensor::from_parts(vec![l.bias.len()], vec![PRELU_INIT; l.bias.len()]))
            .collect(),
        Activation::Identity => Vec::new(),
    };
    let readout = spec.readout.map(|k| Layer::init(spec.feature_dim, k, &mut rng));
    Ok(ModelParams {
        layers,
        slopes,
        readout,
        seed,
    })
}

/// Encoder forward pass without gradient recording.
pub fn encode(spec: &EncoderSpec, params: &ModelParams, x: &DenseTensor) -> Result<DenseTensor> {
    let mut tape = Tape::new();
    let bound = bind(params, &mut tape, false)?;
    let xv = tape.constant(x.clone())?;
    let f = encode_on_tape(spec, &mut tape, xv, &bound)?;
    Ok(tape.value(f).clone())
}

fn bind(params: &ModelParams, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>> {
    params
        .tensors()
        .into_iter()
        .map(|t| tape.leaf(t.clone(), requires_grad))
        .collect()
}

fn encode_on_tape(spec: &EncoderSpec, tape: &mut Tape, x: Var, bound: &[Var]) -> Result<Var> {
    let per_layer = if spec.activation == Activation::Prelu { 3 } else { 2 };
    let mut h = x;
    for l in 0..spec.layer_dims().len() {
        let base = l * per_layer;
        h = tape.matmul(h, bound[base])?;
        h = tape.add_row(h, bound[base + 1])?;
        if spec.activation == Activation::Prelu {
            h = tape.prelu(h, bound[base + 2])?;
        }
    }
    Ok(h)
}

/// `Wᵀf` for every row of a feature batch.
pub fn head_logits(head: &ClassifierWeights, features: &DenseTensor) -> Result<DenseTensor> {
    if features.cols() != head.features() {
        return Err(Error::ShapeMismatch(format!(
            "{}-dim features for a {}-dim head",
            features.cols(),
            head.features()
        )));
    }
    let f = DenseTensor::from_parts(vec![features.rows(), features.cols()], features.data().to_vec());
    f.matmul(&head.to_tensor())
}

fn scores(head: &ClassifierWeights, f: &[f64]) -> Vec<f64> {
    (0..head.classes())
        .map(|c| head.column(c).iter().zip(f).map(|(w, v)| w * v).sum())
        .collect()
}

/// `argmax_i w_iᵀf`; ties go to the lowest class index.
pub fn predict(head: &ClassifierWeights, f: &[f64]) -> usize {
    argmax(&scores(head, f))
}

/// Whether `f` lies in the classification domain of `class`:
/// `(w_i − w_j)ᵀf ≥ 0` for every `j ≠ i`.
pub fn region_check(head: &ClassifierWeights, f: &[f64], class: usize) -> bool {
    let wi = head.column(class);
    (0..head.classes()).filter(|&j| j != class).all(|j| {
        let wj = head.column(j);
        let d: f64 = wi.iter().zip(wj).zip(f).map(|((a, b), v)| (a - b) * v).sum();
        d >= 0.0
    })
}

/// Handles to one forward pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub features: Var,
    pub logits: Var,
}

/// Encoder plus classifier.
#[derive(Clone, Debug)]
pub struct Network {
    spec: EncoderSpec,
    params: ModelParams,
    head: Option<ClassifierWeights>,
    head_tensor: Option<DenseTensor>,
}

impl Network {
    pub fn new(spec: EncoderSpec, params: ModelParams, head: Option<ClassifierWeights>) -> Result<Self> {
        spec.validate()?;
        params.check_against(&spec)?;
        match (&head, spec.readout) {
            (Some(w), None) => {
                if w.features() != spec.feature_dim {
                    return Err(Error::InvalidSpec(format!(
                        "head expects {} features, encoder produces {}",
                        w.features(),
                        spec.feature_dim
                    )));
                }
            }
            (None, Some(_)) => {}
            (Some(_), Some(_)) => return Err(Error::InvalidSpec("both a frozen head and a readout".into())),
            (None, None) => return Err(Error::InvalidSpec("no classifier: need a head or a readout".into())),
        }
        let head_tensor = head.as_ref().map(ClassifierWeights::to_tensor);
        Ok(Self {
            spec,
            params,
            head,
            head_tensor,
        })
    }

    /// Fresh network with parameters drawn from `seed`.
    pub fn init(spec: EncoderSpec, head: Option<ClassifierWeights>, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed)?;
        Self::new(spec, params, head)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn head(&self) -> Option<&ClassifierWeights> {
        self.head.as_ref()
    }

    pub fn classes(&self) -> usize {
        match (&self.head, self.spec.readout) {
            (Some(w), _) => w.classes(),
            (None, Some(k)) => k,
            (None, None) => unreachable!("validated at construction"),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Registers the parameters on `tape` in canonical order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>> {
        bind(&self.params, tape, requires_grad)
    }

    /// Records encoder and classifier on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: Var, bound: &[Var]) -> Result<Forward> {
        let features = encode_on_tape(&self.spec, tape, x, bound)?;
        let logits = match &self.head_tensor {
            Some(w) => {
                let w = tape.constant(w.clone())?;
                tape.matmul(features, w)?
            }
            None => {
                let n = bound.len();
                let z = tape.matmul(features, bound[n - 2])?;
                tape.add_row(z, bound[n - 1])?
            }
        };
        Ok(Forward { features, logits })
    }

    pub fn features(&self, x: &DenseTensor) -> Result<DenseTensor> {
        encode(&self.spec, &self.params, x)
    }

    pub fn logits(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let fwd = self.forward(&mut tape, xv, &bound)?;
        Ok(tape.value(fwd.logits).clone())
    }

    pub fn predict_batch(&self, x: &DenseTensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
    }

    /// Evaluates a per-sample objective and its gradient with respect to the
    /// inputs. Parameters are treated as constants. Because the objective is
    /// summed before differentiation, each input row receives the gradient of
    /// its own sample's objective.
    pub fn input_gradient<F>(&self, x: &DenseTensor, objective: F) -> Result<(Vec<f64>, DenseTensor)>
    where
        F: FnOnce(&mut Tape, Forward) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let xv = tape.leaf(x.clone(), true)?;
        let fwd = self.forward(&mut tape, xv, &bound)?;
        let per_sample = objective(&mut tape, fwd)?;
        let values = tape.value(per_sample).data().to_vec();
        let total = tape.sum(per_sample)?;
        let mut grads = tape.backward(total)?;
        let g = grads.take(xv).unwrap_or_else(|| DenseTensor::zeros(x.shape().to_vec()));
        Ok((values, g))
    }

    /// Writes an `ORTM` checkpoint. A frozen head is referenced by the
    /// SHA-256 of its weight file, not embedded.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let spec = serde_json::to_vec(&self.spec)?;
        out.write_all(&(spec.len() as u64).to_le_bytes())?;
        out.write_all(&spec)?;
        out.write_all(&self.params.seed.to_le_bytes())?;
        match &self.head {
            Some(w) => {
                out.write_all(&[1])?;
                out.write_all(&hex::decode(w.content_hash()).expect("hex digest"))?;
            }
            None => out.write_all(&[0])?,
        }
        let tensors = self.params.tensors();
        out.write_all(&(tensors.len() as u64).to_le_bytes())?;
        for t in tensors {
            out.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &e in t.shape() {
                out.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes())?;
        Ok(())
    }

    /// Head hash recorded in a checkpoint, if it references one.
    pub fn checkpoint_head_hash(bytes: &[u8]) -> Result<Option<String>> {
        Ok(Reader::parse_header(bytes)?.head_hash)
    }

    /// Parses a checkpoint; `head` must be the weight file it references.
    pub fn from_checkpoint(bytes: &[u8], head: Option<ClassifierWeights>) -> Result<Self> {
        let header = Reader::parse_header(bytes)?;
        match (&header.head_hash, &head) {
            (Some(expected), Some(w)) => {
                let found = w.content_hash();
                if &found != expected {
                    return Err(Error::HashMismatch {
                        what: "classifier head".into(),
                        expected: expected.clone(),
                        found,
                    });
                }
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::InvalidParameter("checkpoint needs its classifier head".into())),
            (None, Some(_)) => {
                return Err(Error::InvalidParameter(
                    "checkpoint has a readout, not a frozen head".into(),
                ))
            }
        }
        let mut reader = Reader {
            bytes,
            pos: header.body_start,
        };
        let count = reader.u64()? as usize;
        let template = init_params(&header.spec, header.seed)?;
        let expected = template.tensors().len();
        if count != expected {
            return Err(Error::Corrupt {
                path: "checkpoint".into(),
                reason: format!("{count} tensors, spec needs {expected}"),
            });
        }
        let mut params = template;
        for slot in params.tensors_mut() {
            let ndim = reader.u64()? as usize;
            let shape = (0..ndim)
                .map(|_| reader.u64().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| reader.f64()).collect::<Result<Vec<_>>>()?;
            *slot = DenseTensor::new(shape, data)?;
        }
        if reader.pos != bytes.len() {
            return Err(Error::Corrupt {
                path: "checkpoint".into(),
                reason: "trailing bytes".into(),
            });
        }
        Self::new(header.spec, params, head)
    }
}

struct Header {
    spec: EncoderSpec,
    seed: u64,
    head_hash: Option<String>,
    body_start: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated("checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn parse_header(bytes: &'a [u8]) -> Result<Header> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                what: "checkpoint".into(),
                expected: "ORTM".into(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let spec_len = r.u64()? as usize;
        let spec: EncoderSpec = serde_json::from_slice(r.take(spec_len)?)?;
        let seed = r.u64()?;
        let head_hash = match r.take(1)?[0] {
            0 => None,
            1 => Some(hex::encode(r.take(32)?)),
            other => {
                return Err(Error::Corrupt {
                    path: "checkpoint".into(),
                    reason: format!("head flag {other}"),
                })
            }
        };
        Ok(Header {
            spec,
            seed,
            head_hash,
            body_start: r.pos,
        })
    }
}

/// Per-coordinate magnitude `‖∂L/∂f_p‖₂` over the batch, where `L` is the
/// batch-mean training loss of `mode` evaluated on clean inputs.
pub fn dead_feature_gradient(net: &Network, x: &DenseTensor, labels: &[usize], mode: LossMode) -> Result<Vec<f64>> {
    if x.rows() == 0 || labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false)?;
    let xv = tape.constant(x.clone())?;
    let encoded = encode_on_tape(&net.spec, &mut tape, xv, &bound)?;
    // Re-root the feature batch as a leaf so its gradient is retained.
    let f = tape.leaf(tape.value(encoded).clone(), true)?;
    let logits = match &net.head_tensor {
        Some(w) => {
            let w = tape.constant(w.clone())?;
            tape.matmul(f, w)?
        }
        None => {
            let n = bound.len();
            let z = tape.matmul(f, bound[n - 2])?;
            tape.add_row(z, bound[n - 1])?
        }
    };
    let per_sample = match mode {
        LossMode::SoftmaxCe => tape.softmax_ce(logits, labels)?,
        LossMode::CenterClean | LossMode::CenterWorstCase => {
            let head = net
                .head
                .as_ref()
                .ok_or_else(|| Error::InvalidLossConfig("center loss needs a frozen head".into()))?;
            tape.sq_dist_rows(f, crate::losses::center_targets(head, labels)?)?
        }
    };
    let loss = tape.mean(per_sample)?;
    let grads = tape.backward(loss)?;
    let g = grads.get(f).expect("feature leaf requires grad");
    let p = g.cols();
    let mut out = vec![0.0; p];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v * v;
        }
    }
    Ok(out.into_iter().map(f64::sqrt).collect())
}
