//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the records in reverse order, visiting each node that carries an
//! upstream gradient exactly once.

use crate::error::{Error, Result};

use super::gemm::{gemm, MatRef};
use super::tensor::DenseTensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        lhs: usize,
        rhs: usize,
    },
    AddRow {
        input: usize,
        bias: usize,
    },
    Prelu {
        input: usize,
        slope: usize,
    },
    SqDistRows {
        input: usize,
        targets: DenseTensor,
    },
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
    },
    LogitMargin {
        logits: usize,
        labels: Vec<usize>,
        rivals: Vec<usize>,
    },
    Sum {
        input: usize,
    },
    Mean {
        input: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner operation record.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&DenseTensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<DenseTensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of records whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn check_finite(t: DenseTensor, op: &'static str) -> Result<DenseTensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(op))
    }
}

fn matrix_dims(t: &DenseTensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::ShapeMismatch(format!(
            "{what}: expected a matrix, got {other:?}"
        ))),
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidParameter(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Forward rule shared by recording and replay.
fn evaluate<'a>(op: &Op, value: impl Fn(usize) -> &'a DenseTensor) -> Result<DenseTensor> {
    let out = match op {
        Op::Leaf => unreachable!("leaves have no forward rule"),
        Op::MatMul { lhs, rhs } => value(*lhs).matmul(&value(*rhs))?,
        Op::AddRow { input, bias } => {
            let x = value(*input);
            let b = value(*bias);
            let (_, cols) = matrix_dims(&x, "add_row input")?;
            if b.len() != cols {
                return Err(Error::ShapeMismatch(format!("bias of {} for {cols} columns", b.len())));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            DenseTensor::from_parts(vec![data.len() / cols.max(1), cols], data)
        }
        Op::Prelu { input, slope } => {
            let x = value(*input);
            let a = value(*slope);
            let (_, cols) = matrix_dims(&x, "prelu input")?;
            if a.len() != cols {
                return Err(Error::ShapeMismatch(format!("{} slopes for {cols} channels", a.len())));
            }
            let shape = x.shape().to_vec();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols) {
                for (v, av) in row.iter_mut().zip(a.data()) {
                    if *v < 0.0 {
                        *v *= av;
                    }
                }
            }
            DenseTensor::from_parts(shape, data)
        }
        Op::SqDistRows { input, targets } => {
            let x = value(*input);
            if x.shape() != targets.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "sq_dist: input {:?} vs targets {:?}",
                    x.shape(),
                    targets.shape()
                )));
            }
            let rows = x.rows();
            let out = (0..rows)
                .map(|i| super::tensor::sq_dist(x.row(i), targets.row(i)))
                .collect();
            DenseTensor::from_parts(vec![rows], out)
        }
        Op::SoftmaxCe { logits, labels } => {
            let z = value(*logits);
            let (rows, classes) = matrix_dims(&z, "softmax_ce logits")?;
            check_labels(labels, rows, classes)?;
            let out = (0..rows)
                .map(|i| super::tensor::softmax_ce(z.row(i), labels[i]))
                .collect();
            DenseTensor::from_parts(vec![rows], out)
        }
        Op::LogitMargin { logits, labels, rivals } => {
            let z = value(*logits);
            let rows = z.rows();
            let out = (0..rows).map(|i| z.row(i)[rivals[i]] - z.row(i)[labels[i]]).collect();
            DenseTensor::from_parts(vec![rows], out)
        }
        Op::Sum { input } => DenseTensor::scalar(value(*input).data().iter().sum()),
        Op::Mean { input } => {
            let x = value(*input);
            if x.is_empty() {
                return Err(Error::EmptyBatch);
            }
            DenseTensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        Op::Scale { input, factor } => {
            let x = value(*input);
            let shape = x.shape().to_vec();
            DenseTensor::from_parts(shape, x.data().iter().map(|v| v * factor).collect())
        }
        Op::Add { lhs, rhs } => {
            let a = value(*lhs);
            let b = value(*rhs);
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch(format!("add: {:?} vs {:?}", a.shape(), b.shape())));
            }
            let shape = a.shape().to_vec();
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            DenseTensor::from_parts(shape, data)
        }
    };
    check_finite(out, op_name(op))
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::AddRow { .. } => "add_row",
        Op::Prelu { .. } => "prelu",
        Op::SqDistRows { .. } => "sq_dist",
        Op::SoftmaxCe { .. } => "softmax_ce",
        Op::LogitMargin { .. } => "logit_margin",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Scale { .. } => "scale",
        Op::Add { .. } => "add",
    }
}

fn operands(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { lhs, rhs } | Op::Add { lhs, rhs } => vec![*lhs, *rhs],
        Op::AddRow { input, bias } => vec![*input, *bias],
        Op::Prelu { input, slope } => vec![*input, *slope],
        Op::SqDistRows { input, .. } | Op::Sum { input } | Op::Mean { input } | Op::Scale { input, .. } => vec![*input],
        Op::SoftmaxCe { logits, .. } | Op::LogitMargin { logits, .. } => vec![*logits],
    }
}

fn accumulate(slot: &mut Option<DenseTensor>, update: DenseTensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(update.data()) {
                *a += b;
            }
        }
        None => *slot = Some(update),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &DenseTensor {
        &self.nodes[var.0].value
    }

    /// Records an input. `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: DenseTensor, requires_grad: bool) -> Result<Var> {
        let value = check_finite(value, "leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: DenseTensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = {
            let nodes = &self.nodes;
            evaluate(&op, |i| &nodes[i].value)?
        };
        let needs_grad = operands(&op).iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.push(Op::MatMul { lhs: lhs.0, rhs: rhs.0 })
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row(&mut self, input: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRow {
            input: input.0,
            bias: bias.0,
        })
    }

    /// `max(0,x) + a·min(0,x)` with one slope per column.
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        self.push(Op::Prelu {
            input: input.0,
            slope: slope.0,
        })
    }

    /// Per-row squared distance to fixed targets.
    pub fn sq_dist_rows(&mut self, input: Var, targets: DenseTensor) -> Result<Var> {
        self.push(Op::SqDistRows {
            input: input.0,
            targets,
        })
    }

    /// Per-row softmax cross-entropy.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(Op::SoftmaxCe {
            logits: logits.0,
            labels: labels.to_vec(),
        })
    }

    /// Per-row `max_{j≠y} z_j − z_y`; the rival class is the lowest-index
    /// maximizer and is fixed at record time.
    pub fn logit_margin(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = &self.nodes[logits.0].value;
        let (rows, classes) = matrix_dims(z, "logit_margin logits")?;
        if classes < 2 {
            return Err(Error::TooFewClasses);
        }
        check_labels(labels, rows, classes)?;
        let rivals = (0..rows)
            .map(|i| {
                let row = z.row(i);
                let mut best = usize::MAX;
                for j in 0..classes {
                    if j != labels[i] && (best == usize::MAX || row[j] > row[best]) {
                        best = j;
                    }
                }
                best
            })
            .collect();
        self.push(Op::LogitMargin {
            logits: logits.0,
            labels: labels.to_vec(),
            rivals,
        })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.push(Op::Sum { input: input.0 })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        self.push(Op::Mean { input: input.0 })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale { input: input.0, factor })
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.push(Op::Add { lhs: lhs.0, rhs: rhs.0 })
    }

    /// Recomputes every non-leaf value from the leaves in record order.
    pub fn replay(&self) -> Result<Vec<DenseTensor>> {
        let mut values: Vec<DenseTensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => evaluate(op, |i| &values[i])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let value = &self.nodes[output.0].value;
        if value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar output, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_with_seed(output, DenseTensor::from_parts(value.shape().to_vec(), vec![1.0]))
    }

    /// Backpropagates an arbitrary upstream gradient from `output`.
    pub fn backward_with_seed(&self, output: Var, seed: DenseTensor) -> Result<Gradients> {
        if seed.shape() != self.nodes[output.0].value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "seed shape {:?} differs from output {:?}",
                seed.shape(),
                self.nodes[output.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(check_finite(seed, "backward seed")?);
        let mut visited = 0;

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            visited += 1;
            let nodes = &self.nodes;
            let wants = |i: usize| nodes[i].needs_grad;

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { lhs, rhs } => {
                    let a = &nodes[*lhs].value;
                    let b = &nodes[*rhs].value;
                    let (m, k) = (a.shape()[0], a.shape()[1]);
                    let n = b.shape()[1];
                    let g = MatRef::row_major(upstream.data(), m, n);
                    if wants(*lhs) {
                        let mut da = vec![0.0; m * k];
                        gemm(g, MatRef::row_major(b.data(), k, n).t(), &mut da, 0.0);
                        accumulate(&mut grads[*lhs], DenseTensor::from_parts(vec![m, k], da));
                    }
                    if wants(*rhs) {
                        let mut db = vec![0.0; k * n];
                        gemm(MatRef::row_major(a.data(), m, k).t(), g, &mut db, 0.0);
                        accumulate(&mut grads[*rhs], DenseTensor::from_parts(vec![k, n], db));
                    }
                }
                Op::AddRow { input, bias } => {
                    let cols = upstream.cols();
                    if wants(*bias) {
                        let mut db = vec![0.0; cols];
                        for row in upstream.data().chunks(cols) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        let shape = nodes[*bias].value.shape().to_vec();
                        accumulate(&mut grads[*bias], DenseTensor::from_parts(shape, db));
                    }
                    if wants(*input) {
                        accumulate(&mut grads[*input], upstream);
                    }
                }
                Op::Prelu { input, slope } => {
                    let x = &nodes[*input].value;
                    let a = &nodes[*slope].value;
                    let cols = x.cols();
                    if wants(*slope) {
                        let mut da = vec![0.0; cols];
                        for (xr, gr) in x.data().chunks(cols).zip(upstream.data().chunks(cols)) {
                            for j in 0..cols {
                                if xr[j] < 0.0 {
                                    da[j] += xr[j] * gr[j];
                                }
                            }
                        }
                        let shape = a.shape().to_vec();
                        accumulate(&mut grads[*slope], DenseTensor::from_parts(shape, da));
                    }
                    if wants(*input) {
                        let mut dx = upstream.into_data();
                        for (xr, gr) in x.data().chunks(cols).zip(dx.chunks_mut(cols)) {
                            for j in 0..cols {
                                if xr[j] < 0.0 {
                                    gr[j] *= a.data()[j];
                                }
                            }
                        }
                        accumulate(&mut grads[*input], DenseTensor::from_parts(x.shape().to_vec(), dx));
                    }
                }
                Op::SqDistRows { input, targets } => {
                    if wants(*input) {
                        let x = &nodes[*input].value;
                        let cols = x.cols();
                        let mut dx = vec![0.0; x.len()];
                        for i in 0..x.rows() {
                            let g = upstream.data()[i];
                            for j in 0..cols {
                                dx[i * cols + j] = 2.0 * (x.row(i)[j] - targets.row(i)[j]) * g;
                            }
                        }
                        accumulate(&mut grads[*input], DenseTensor::from_parts(x.shape().to_vec(), dx));
                    }
                }
                Op::SoftmaxCe { logits, labels } => {
                    if wants(*logits) {
                        let z = &nodes[*logits].value;
                        let cols = z.cols();
                        let mut dz = Vec::with_capacity(z.len());
                        for i in 0..z.rows() {
                            let g = upstream.data()[i];
                            let p = softmax_row(z.row(i));
                            dz.extend(
                                p.iter()
                                    .enumerate()
                                    .map(|(j, pj)| (pj - if j == labels[i] { 1.0 } else { 0.0 }) * g),
                            );
                        }
                        debug_assert_eq!(dz.len(), z.rows() * cols);
                        accumulate(&mut grads[*logits], DenseTensor::from_parts(z.shape().to_vec(), dz));
                    }
                }
                Op::LogitMargin { logits, labels, rivals } => {
                    if wants(*logits) {
                        let z = &nodes[*logits].value;
                        let cols = z.cols();
                        let mut dz = vec![0.0; z.len()];
                        for i in 0..z.rows() {
                            let g = upstream.data()[i];
                            dz[i * cols + rivals[i]] += g;
                            dz[i * cols + labels[i]] -= g;
                        }
                        accumulate(&mut grads[*logits], DenseTensor::from_parts(z.shape().to_vec(), dz));
                    }
                }
                Op::Sum { input } => {
                    if wants(*input) {
                        let x = &nodes[*input].value;
                        let g = upstream.item();
                        accumulate(
                            &mut grads[*input],
                            DenseTensor::from_parts(x.shape().to_vec(), vec![g; x.len()]),
                        );
                    }
                }
                Op::Mean { input } => {
                    if wants(*input) {
                        let x = &nodes[*input].value;
                        let g = upstream.item() / x.len() as f64;
                        accumulate(
                            &mut grads[*input],
                            DenseTensor::from_parts(x.shape().to_vec(), vec![g; x.len()]),
                        );
                    }
                }
                Op::Scale { input, factor } => {
                    if wants(*input) {
                        let shape = upstream.shape().to_vec();
                        let data = upstream.into_data().into_iter().map(|v| v * factor).collect();
                        accumulate(&mut grads[*input], DenseTensor::from_parts(shape, data));
                    }
                }
                Op::Add { lhs, rhs } => {
                    if wants(*lhs) {
                        accumulate(&mut grads[*lhs], upstream.clone());
                    }
                    if wants(*rhs) {
                        accumulate(&mut grads[*rhs], upstream);
                    }
                }
            }
        }

        // Only leaves keep their gradients.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *slot = None;
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(Gradients { grads, visited })
    }
}
