//! Reverse-mode gradient tape. Each training step records its forward ops on
//! a fresh tape, then replays them backwards.
//!
//! Every op validates shapes up front and checks its output for NaN/Inf, so a
//! numeric failure surfaces with the op name instead of corrupting training.

use std::collections::BTreeMap;

use crate::error::NnError;
use crate::nn::params::ParamSet;
use crate::nn::tensor::Tensor;

pub type NodeId = usize;

pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy { x: NodeId, s: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Embedding { table: NodeId, index: usize },
    Concat(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    MeanAxis { x: NodeId, axis: usize },
    SliceVec { x: NodeId, start: usize },
    CropRows { x: NodeId, start: usize },
    DilatedConv { x: NodeId, w: NodeId, dilation: usize },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, mean: Tensor, var: Tensor },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, mean: Tensor, var: Tensor },
    Dot(NodeId, NodeId),
    Softmax(NodeId),
    SoftmaxXent { logits: NodeId, target: usize },
    SigmoidBce { logits: NodeId, targets: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<String, NodeId>,
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<NodeId, NnError> {
        if !value.is_all_finite() {
            return Err(NnError::NonFinite { op: name.to_string() });
        }
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is delivered to it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId, NnError> {
        self.push("input", value, Op::Leaf)
    }

    /// Named parameter leaf. A parameter appears on the tape at most once, so
    /// every use of the returned node accumulates into one gradient.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId, NnError> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let value = params
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?
            .clone();
        let id = self.push("param", value, Op::Leaf)?;
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    fn binary_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(NnError::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b))
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId, NnError> {
        assert!(!xs.is_empty(), "add_n needs at least one node");
        for &x in &xs[1..] {
            self.binary_same_shape("add_n", xs[0], x)?;
        }
        let mut data = self.value(xs[0]).data().to_vec();
        for &x in &xs[1..] {
            for (d, v) in data.iter_mut().zip(self.value(x).data()) {
                *d += v;
            }
        }
        let value = Tensor::new(self.value(xs[0]).shape().to_vec(), data)?;
        self.push("add_n", value, Op::AddN(xs.to_vec()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, NnError> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(x, c))
    }

    /// Multiplies a tensor by a scalar node (shape `[1]`).
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, NnError> {
        if self.value(s).numel() != 1 {
            return Err(NnError::ShapeMismatch {
                op: "scale_by",
                left: self.value(x).shape().to_vec(),
                right: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("scale_by", value, Op::ScaleBy { x, s })
    }

    /// `y = W x + b` for a vector, or row-wise for a `[B, n]` matrix.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if wt.ndim() != 2 || bt.ndim() != 1 || wt.rows() != bt.rows() {
            return Err(NnError::ShapeMismatch {
                op: "dense",
                left: wt.shape().to_vec(),
                right: bt.shape().to_vec(),
            });
        }
        let (m, n) = (wt.rows(), wt.cols());
        let value = match xt.ndim() {
            1 => {
                if xt.rows() != n {
                    return Err(NnError::ShapeMismatch {
                        op: "dense",
                        left: xt.shape().to_vec(),
                        right: wt.shape().to_vec(),
                    });
                }
                let mut out = vec![0.0; m];
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = bt.data()[i];
                    let row = &wt.data()[i * n..(i + 1) * n];
                    for (wv, xv) in row.iter().zip(xt.data()) {
                        acc += wv * xv;
                    }
                    *o = acc;
                }
                Tensor::vector(out)
            }
            2 => {
                if xt.cols() != n {
                    return Err(NnError::ShapeMismatch {
                        op: "dense",
                        left: xt.shape().to_vec(),
                        right: wt.shape().to_vec(),
                    });
                }
                let batch = xt.rows();
                let mut out = vec![0.0; batch * m];
                for bi in 0..batch {
                    let xrow = &xt.data()[bi * n..(bi + 1) * n];
                    for i in 0..m {
                        let mut acc = bt.data()[i];
                        let wrow = &wt.data()[i * n..(i + 1) * n];
                        for (wv, xv) in wrow.iter().zip(xrow) {
                            acc += wv * xv;
                        }
                        out[bi * m + i] = acc;
                    }
                }
                Tensor::matrix(batch, m, out)?
            }
            _ => {
                return Err(NnError::ShapeMismatch {
                    op: "dense",
                    left: xt.shape().to_vec(),
                    right: wt.shape().to_vec(),
                })
            }
        };
        self.push("dense", value, Op::Dense { x, w, b })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let data = self.value(x).data().iter().map(|&v| stable_sigmoid(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("sigmoid", value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("tanh", value, Op::Tanh(x))
    }

    /// Row lookup into an embedding table `[V, E]`.
    pub fn embedding(&mut self, table: NodeId, index: usize) -> Result<NodeId, NnError> {
        let tt = self.value(table);
        if tt.ndim() != 2 || index >= tt.rows() {
            return Err(NnError::LabelOutOfRange {
                index,
                classes: tt.rows(),
            });
        }
        let e = tt.cols();
        let value = Tensor::vector(tt.data()[index * e..(index + 1) * e].to_vec());
        self.push("embedding", value, Op::Embedding { table, index })
    }

    /// Concatenates vectors into one vector.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId, NnError> {
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.ndim() != 1 {
                return Err(NnError::ShapeMismatch {
                    op: "concat",
                    left: t.shape().to_vec(),
                    right: vec![],
                });
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::vector(data);
        self.push("concat", value, Op::Concat(xs.to_vec()))
    }

    /// Stacks L equal-length vectors into an `[L, C]` matrix.
    pub fn stack_rows(&mut self, xs: &[NodeId]) -> Result<NodeId, NnError> {
        assert!(!xs.is_empty(), "stack_rows needs at least one row");
        let c = self.value(xs[0]).rows();
        let mut data = Vec::with_capacity(xs.len() * c);
        for &x in xs {
            self.binary_same_shape("stack_rows", xs[0], x)?;
            data.extend_from_slice(self.value(x).data());
        }
        let value = Tensor::matrix(xs.len(), c, data)?;
        self.push("stack_rows", value, Op::StackRows(xs.to_vec()))
    }

    /// Mean of a matrix over one axis: axis 0 gives `[C]`, axis 1 gives `[L]`.
    pub fn mean_over_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, NnError> {
        let t = self.value(x);
        if t.ndim() != 2 || axis > 1 {
            return Err(NnError::ShapeMismatch {
                op: "mean_over_axis",
                left: t.shape().to_vec(),
                right: vec![axis],
            });
        }
        let (l, c) = (t.rows(), t.cols());
        let value = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..l {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += t.at2(i, j);
                }
            }
            for o in out.iter_mut() {
                *o /= l as f64;
            }
            Tensor::vector(out)
        } else {
            let mut out = vec![0.0; l];
            for (i, o) in out.iter_mut().enumerate() {
                for j in 0..c {
                    *o += t.at2(i, j);
                }
                *o /= c as f64;
            }
            Tensor::vector(out)
        };
        self.push("mean_over_axis", value, Op::MeanAxis { x, axis })
    }

    /// Contiguous slice of a vector.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let t = self.value(x);
        if t.ndim() != 1 || start + len > t.rows() {
            return Err(NnError::ShapeMismatch {
                op: "slice",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let value = Tensor::vector(t.data()[start..start + len].to_vec());
        self.push("slice", value, Op::SliceVec { x, start })
    }

    /// Contiguous row crop of a matrix.
    pub fn crop_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let t = self.value(x);
        if t.ndim() != 2 || start + len > t.rows() {
            return Err(NnError::ShapeMismatch {
                op: "crop_rows",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let c = t.cols();
        let value = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        self.push("crop_rows", value, Op::CropRows { x, start })
    }

    /// Width-3 dilated convolution over an `[L, C_in]` sequence with kernels
    /// `[C_out, 3, C_in]` and no padding; output length is `L - 2d`.
    pub fn dilated_conv1d(&mut self, x: NodeId, w: NodeId, dilation: usize) -> Result<NodeId, NnError> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.ndim() != 2 || wt.ndim() != 3 || wt.shape()[1] != 3 || wt.shape()[2] != xt.cols() {
            return Err(NnError::ShapeMismatch {
                op: "dilated_conv1d",
                left: xt.shape().to_vec(),
                right: wt.shape().to_vec(),
            });
        }
        let l = xt.rows();
        if l <= 2 * dilation {
            return Err(NnError::SequenceTooShort {
                len: l,
                dilation,
                block: None,
            });
        }
        let (c_out, c_in) = (wt.shape()[0], wt.shape()[2]);
        let out_len = l - 2 * dilation;
        let mut out = vec![0.0; out_len * c_out];
        for t in 0..out_len {
            for o in 0..c_out {
                let mut acc = 0.0;
                for k in 0..3 {
                    let xrow = &xt.data()[(t + k * dilation) * c_in..(t + k * dilation + 1) * c_in];
                    let wrow = &wt.data()[(o * 3 + k) * c_in..(o * 3 + k + 1) * c_in];
                    for (wv, xv) in wrow.iter().zip(xrow) {
                        acc += wv * xv;
                    }
                }
                out[t * c_out + o] = acc;
            }
        }
        let value = Tensor::matrix(out_len, c_out, out)?;
        self.push("dilated_conv1d", value, Op::DilatedConv { x, w, dilation })
    }

    /// Batch normalization over axis 0 of `[B, F]` using batch statistics.
    /// Returns the node plus the biased batch mean/variance so the caller can
    /// fold them into running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, Tensor, Tensor), NnError> {
        let xt = self.value(x);
        if xt.ndim() != 2 {
            return Err(NnError::ShapeMismatch {
                op: "batchnorm.train",
                left: xt.shape().to_vec(),
                right: vec![],
            });
        }
        let (b, f) = (xt.rows(), xt.cols());
        if b < 2 {
            return Err(NnError::DegenerateBatch(b));
        }
        self.check_bn_affine(x, gamma, beta)?;
        let mut mean = vec![0.0; f];
        for i in 0..b {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += xt.at2(i, j);
            }
        }
        for m in mean.iter_mut() {
            *m /= b as f64;
        }
        let mut var = vec![0.0; f];
        for i in 0..b {
            for (j, v) in var.iter_mut().enumerate() {
                let d = xt.at2(i, j) - mean[j];
                *v += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= b as f64;
        }
        let mean_t = Tensor::vector(mean);
        let var_t = Tensor::vector(var);
        let value = self.bn_forward(x, gamma, beta, &mean_t, &var_t);
        let id = self.push(
            "batchnorm.train",
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean_t.clone(),
                var: var_t.clone(),
            },
        )?;
        Ok((id, mean_t, var_t))
    }

    /// Batch normalization with frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<NodeId, NnError> {
        let xt = self.value(x);
        if xt.ndim() != 2 || running_mean.rows() != xt.cols() || running_var.rows() != xt.cols() {
            return Err(NnError::ShapeMismatch {
                op: "batchnorm.eval",
                left: xt.shape().to_vec(),
                right: running_mean.shape().to_vec(),
            });
        }
        self.check_bn_affine(x, gamma, beta)?;
        let value = self.bn_forward(x, gamma, beta, running_mean, running_var);
        self.push(
            "batchnorm.eval",
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.clone(),
                var: running_var.clone(),
            },
        )
    }

    fn check_bn_affine(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(), NnError> {
        let f = self.value(x).cols();
        for &affine in &[gamma, beta] {
            let t = self.value(affine);
            if t.ndim() != 1 || t.rows() != f {
                return Err(NnError::ShapeMismatch {
                    op: "batchnorm",
                    left: self.value(x).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn bn_forward(&self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &Tensor, var: &Tensor) -> Tensor {
        let xt = self.value(x);
        let (b, f) = (xt.rows(), xt.cols());
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![0.0; b * f];
        for i in 0..b {
            for j in 0..f {
                let xhat = (xt.at2(i, j) - mean.data()[j]) / (var.data()[j] + BATCHNORM_EPS).sqrt();
                out[i * f + j] = g[j] * xhat + be[j];
            }
        }
        Tensor::matrix(b, f, out).expect("shape consistent")
    }

    /// Inner product of two equal-length vectors, as a `[1]` scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary_same_shape("dot", a, b)?;
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.push("dot", Tensor::scalar(v), Op::Dot(a, b))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let t = self.value(x);
        if t.ndim() != 1 {
            return Err(NnError::ShapeMismatch {
                op: "softmax",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let value = Tensor::vector(exps.into_iter().map(|e| e / sum).collect());
        self.push("softmax", value, Op::Softmax(x))
    }

    /// Cross-entropy of a single logit vector against a class index.
    pub fn softmax_xent(&mut self, logits: NodeId, target: usize) -> Result<NodeId, NnError> {
        let t = self.value(logits);
        if t.ndim() != 1 {
            return Err(NnError::ShapeMismatch {
                op: "softmax_xent",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        if target >= t.rows() {
            return Err(NnError::LabelOutOfRange {
                index: target,
                classes: t.rows(),
            });
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[target];
        self.push("softmax_xent", Tensor::scalar(loss), Op::SoftmaxXent { logits, target })
    }

    /// Mean binary cross-entropy of logits against multi-hot targets.
    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: Tensor) -> Result<NodeId, NnError> {
        let t = self.value(logits);
        if !t.same_shape(&targets) {
            return Err(NnError::ShapeMismatch {
                op: "sigmoid_bce",
                left: t.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let mut loss = 0.0;
        for (&z, &y) in t.data().iter().zip(targets.data()) {
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        loss /= t.numel() as f64;
        self.push("sigmoid_bce", Tensor::scalar(loss), Op::SigmoidBce { logits, targets })
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NnError> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_inputs(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    /// Gradients of the named parameters used on this tape.
    pub fn param_grads(&self, grads: &Gradients) -> Result<BTreeMap<String, Tensor>, NnError> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.param_nodes {
            let g = match grads.get(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros_like(self.value(id)),
            };
            if !g.is_all_finite() {
                return Err(NnError::NonFiniteGrad { name: name.clone() });
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn add_into(slot: &mut Option<Tensor>, template: &Tensor, update: impl Fn(&mut [f64])) {
        let g = slot.get_or_insert_with(|| Tensor::zeros_like(template));
        update(g.data_mut());
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate_inputs(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &src in &[*a, *b] {
                    Self::add_into(&mut grads[src], self.value(src), |acc| {
                        for (o, gv) in acc.iter_mut().zip(g.data()) {
                            *o += gv;
                        }
                    });
                }
            }
            Op::AddN(xs) => {
                for &src in xs {
                    Self::add_into(&mut grads[src], self.value(src), |acc| {
                        for (o, gv) in acc.iter_mut().zip(g.data()) {
                            *o += gv;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                Self::add_into(&mut grads[*a], self.value(*a), |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g.data()[i] * bv[i];
                    }
                });
                Self::add_into(&mut grads[*b], self.value(*b), |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g.data()[i] * av[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                Self::add_into(&mut grads[*x], self.value(*x), |acc| {
                    for (o, gv) in acc.iter_mut().zip(g.data()) {
                        *o += c * gv;
                    }
                });
            }
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s).data()[0];
                let xv = self.value(*x).data().to_vec();
                Self::add_into(&mut grads[*x], self.value(*x), |acc| {
                    for (i, o) in acc.iter_mut().enumerate() {
                        *o += sv * g.data()[i];
                    }
                });
                Self::add_into(&mut grads[*s], self.value(*s), |acc| {
                    let mut dot = 0.0;
                    for (gv, x) in g.data().iter().zip(&xv) {
                        dot += gv * x;
                    }
                    acc[0] += dot;
                });
            }
            Op::Dense { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (m, n) = (wt.rows(), wt.cols());
                match xt.ndim() {
                    1 => {
                        Self::add_into(&mut grads[*x], xt, |acc| {
                            for (j, a) in acc.iter_mut().enumerate() {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += wt.data()[i * n + j] * g.data()[i];
                                }
                                *a += s;
                            }
                        });
                        Self::add_into(&mut grads[*w], wt, |acc| {
                            for i in 0..m {
                                for j in 0..n {
                                    acc[i * n + j] += g.data()[i] * xt.data()[j];
                                }
                            }
                        });
                        Self::add_into(&mut grads[*b], self.value(*b), |acc| {
                            for (a, gv) in acc.iter_mut().zip(g.data()) {
                                *a += gv;
                            }
                        });
                    }
                    _ => {
                        let batch = xt.rows();
                        Self::add_into(&mut grads[*x], xt, |acc| {
                            for bi in 0..batch {
                                for j in 0..n {
                                    let mut s = 0.0;
                                    for i in 0..m {
                                        s += wt.data()[i * n + j] * g.data()[bi * m + i];
                                    }
                                    acc[bi * n + j] += s;
                                }
                            }
                        });
                        Self::add_into(&mut grads[*w], wt, |acc| {
                            for bi in 0..batch {
                                for i in 0..m {
                                    let gv = g.data()[bi * m + i];
                                    for j in 0..n {
                                        acc[i * n + j] += gv * xt.data()[bi * n + j];
                                    }
                                }
                            }
                        });
                        Self::add_into(&mut grads[*b], self.value(*b), |acc| {
                            for bi in 0..batch {
                                for (i, a) in acc.iter_mut().enumerate() {
                                    *a += g.data()[bi * m + i];
                                }
                            }
                        });
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                Self::add_into(&mut grads[*x], self.value(*x), |acc| {
                    for i in 0..acc.len() {
                        if xv[i] > 0.0 {
                            acc[i] += g.data()[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = self.value(id).data().to_vec();
                Self::add_into(&mut grads[*x], self.value(*x), |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g.data()[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = self.value(id).data().to_vec();
                Self::add_into(&mut grads[*x], self.value(*x), |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g.data()[i] * (1.0 - yv[i] * yv[i]);
                    }
                });
            }
            Op::Embedding { table, index } => {
                let e = self.value(id).numel();
                Self::add_into(&mut grads[*table], self.value(*table), |acc| {
                    for j in 0..e {
                        acc[index * e + j] += g.data()[j];
                    }
                });
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &src in xs {
                    let len = self.value(src).numel();
                    Self::add_into(&mut grads[src], self.value(src), |acc| {
                        for j in 0..len {
                            acc[j] += g.data()[offset + j];
                        }
                    });
                    offset += len;
                }
            }
            Op::StackRows(xs) => {
                let c = self.value(xs[0]).numel();
                for (row, &src) in xs.iter().enumerate() {
                    Self::add_into(&mut grads[src], self.value(src), |acc| {
                        for j in 0..c {
                            acc[j] += g.data()[row * c + j];
                        }
                    });
                }
            }
            Op::MeanAxis { x, axis } => {
                let xt = self.value(*x);
                let (l, c) = (xt.rows(), xt.cols());
                let axis = *axis;
                Self::add_into(&mut grads[*x], xt, |acc| {
                    if axis == 0 {
                        for i in 0..l {
                            for j in 0..c {
                                acc[i * c + j] += g.data()[j] / l as f64;
                            }
                        }
                    } else {
                        for i in 0..l {
                            for j in 0..c {
                                acc[i * c + j] += g.data()[i] / c as f64;
                            }
                        }
                    }
                });
            }
            Op::SliceVec { x, start } => {
                let len = self.value(id).numel();
                Self::add_into(&mut grads[*x], self.value(*x), |acc| {
                    for j in 0..len {
                        acc[start + j] += g.data()[j];
                    }
                });
            }
            Op::CropRows { x, start } => {
                let c = self.value(*x).cols();
                let len = self.value(id).rows();
                Self::add_into(&mut grads[*x], self.value(*x), |acc| {
                    for i in 0..len {
                        for j in 0..c {
                            acc[(start + i) * c + j] += g.data()[i * c + j];
                        }
                    }
                });
            }
            Op::DilatedConv { x, w, dilation } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (c_out, c_in) = (wt.shape()[0], wt.shape()[2]);
                let out_len = self.value(id).rows();
                let d = *dilation;
                Self::add_into(&mut grads[*x], xt, |acc| {
                    for t in 0..out_len {
                        for o in 0..c_out {
                            let gv = g.data()[t * c_out + o];
                            for k in 0..3 {
                                for i in 0..c_in {
                                    acc[(t + k * d) * c_in + i] += gv * wt.data()[(o * 3 + k) * c_in + i];
                                }
                            }
                        }
                    }
                });
                Self::add_into(&mut grads[*w], wt, |acc| {
                    for t in 0..out_len {
                        for o in 0..c_out {
                            let gv = g.data()[t * c_out + o];
                            for k in 0..3 {
                                for i in 0..c_in {
                                    acc[(o * 3 + k) * c_in + i] += gv * xt.data()[(t + k * d) * c_in + i];
                                }
                            }
                        }
                    }
                });
            }
            Op::BatchNormTrain { x, gamma, beta, mean, var } => {
                self.bn_backward(*x, *gamma, *beta, mean, var, true, g, grads);
            }
            Op::BatchNormEval { x, gamma, beta, mean, var } => {
                self.bn_backward(*x, *gamma, *beta, mean, var, false, g, grads);
            }
            Op::Dot(a, b) => {
                let gv = g.data()[0];
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                Self::add_into(&mut grads[*a], self.value(*a), |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gv * bv[i];
                    }
                });
                Self::add_into(&mut grads[*b], self.value(*b), |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gv * av[i];
                    }
                });
            }
            Op::Softmax(x) => {
                let yv = self.value(id).data().to_vec();
                let mut gy = 0.0;
                for (gv, y) in g.data().iter().zip(&yv) {
                    gy += gv * y;
                }
                Self::add_into(&mut grads[*x], self.value(*x), |acc| {
                    for i in 0..acc.len() {
                        acc[i] += yv[i] * (g.data()[i] - gy);
                    }
                });
            }
            Op::SoftmaxXent { logits, target } => {
                let t = self.value(*logits);
                let gv = g.data()[0];
                let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = t.data().iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                Self::add_into(&mut grads[*logits], t, |acc| {
                    for i in 0..acc.len() {
                        let p = exps[i] / sum;
                        let y = if i == *target { 1.0 } else { 0.0 };
                        acc[i] += gv * (p - y);
                    }
                });
            }
            Op::SigmoidBce { logits, targets } => {
                let t = self.value(*logits);
                let gv = g.data()[0];
                let n = t.numel() as f64;
                let tv = targets.data().to_vec();
                Self::add_into(&mut grads[*logits], t, |acc| {
                    for (i, a) in acc.iter_mut().enumerate() {
                        *a += gv * (stable_sigmoid(t.data()[i]) - tv[i]) / n;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Tensor,
        var: &Tensor,
        train: bool,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xt = self.value(x);
        let (b, f) = (xt.rows(), xt.cols());
        let gv = self.value(gamma).data().to_vec();

        // xhat and the affine gradients are shared between modes.
        let mut xhat = vec![0.0; b * f];
        for i in 0..b {
            for j in 0..f {
                xhat[i * f + j] = (xt.at2(i, j) - mean.data()[j]) / (var.data()[j] + BATCHNORM_EPS).sqrt();
            }
        }
        Self::add_into(&mut grads[gamma], self.value(gamma), |acc| {
            for i in 0..b {
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += g.data()[i * f + j] * xhat[i * f + j];
                }
            }
        });
        Self::add_into(&mut grads[beta], self.value(beta), |acc| {
            for i in 0..b {
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += g.data()[i * f + j];
                }
            }
        });

        if !train {
            Self::add_into(&mut grads[x], xt, |acc| {
                for i in 0..b {
                    for j in 0..f {
                        acc[i * f + j] +=
                            g.data()[i * f + j] * gv[j] / (var.data()[j] + BATCHNORM_EPS).sqrt();
                    }
                }
            });
            return;
        }

        // Train mode: batch statistics depend on x.
        Self::add_into(&mut grads[x], xt, |acc| {
            for j in 0..f {
                let inv_std = 1.0 / (var.data()[j] + BATCHNORM_EPS).sqrt();
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for i in 0..b {
                    let dxhat = g.data()[i * f + j] * gv[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat[i * f + j];
                }
                for i in 0..b {
                    let dxhat = g.data()[i * f + j] * gv[j];
                    acc[i * f + j] += inv_std / b as f64
                        * (b as f64 * dxhat - sum_dxhat - xhat[i * f + j] * sum_dxhat_xhat);
                }
            }
        });
    }
}

/// One LSTM cell update from packed gate parameters `w: [4H, I+H]`,
/// `b: [4H]`, gate order (input, forget, output, candidate).
pub fn lstm_step(
    tape: &mut Tape,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    w: NodeId,
    b: NodeId,
    hidden: usize,
) -> Result<(NodeId, NodeId), NnError> {
    let z = tape.concat(&[x, h])?;
    let gates = tape.dense(z, w, b)?;
    let i_pre = tape.slice(gates, 0, hidden)?;
    let f_pre = tape.slice(gates, hidden, hidden)?;
    let o_pre = tape.slice(gates, 2 * hidden, hidden)?;
    let g_pre = tape.slice(gates, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i_pre)?;
    let f = tape.sigmoid(f_pre)?;
    let o = tape.sigmoid(o_pre)?;
    let g = tape.tanh(g_pre)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let c_act = tape.tanh(c_new)?;
    let h_new = tape.mul(o, c_act)?;
    Ok((h_new, c_new))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_passthrough() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        let w = tape
            .input(Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let b = tape.input(Tensor::vector(vec![0.0; 3])).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = tape.input(Tensor::vector(vec![1.0])).unwrap();
        match tape.add(a, b) {
            Err(NnError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![1]);
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn nonfinite_output_names_op() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1e308, 1e308])).unwrap();
        let err = tape.dot(x, x).unwrap_err();
        match err {
            NnError::NonFinite { op } => assert_eq!(op, "dot"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn lstm_step_zero_params_zero_state() {
        let hidden = 3;
        let input = 2;
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.5, -0.5])).unwrap();
        let h = tape.input(Tensor::zeros(vec![hidden])).unwrap();
        let c = tape.input(Tensor::zeros(vec![hidden])).unwrap();
        let w = tape.input(Tensor::zeros(vec![4 * hidden, input + hidden])).unwrap();
        let b = tape.input(Tensor::zeros(vec![4 * hidden])).unwrap();
        let (h2, c2) = lstm_step(&mut tape, x, h, c, w, b, hidden).unwrap();
        assert_eq!(tape.value(h2).data(), &[0.0; 3]);
        assert_eq!(tape.value(c2).data(), &[0.0; 3]);
    }

    #[test]
    fn lstm_step_saturated_forget_keeps_cell() {
        let hidden = 2;
        let input = 1;
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.3])).unwrap();
        let h = tape.input(Tensor::zeros(vec![hidden])).unwrap();
        let c = tape.input(Tensor::vector(vec![0.7, -1.1])).unwrap();
        let w = tape.input(Tensor::zeros(vec![4 * hidden, input + hidden])).unwrap();
        // input gate slammed closed, forget gate slammed open
        let mut bias = vec![0.0; 4 * hidden];
        for j in 0..hidden {
            bias[j] = -60.0;
            bias[hidden + j] = 60.0;
        }
        let b = tape.input(Tensor::vector(bias)).unwrap();
        let (_, c2) = lstm_step(&mut tape, x, h, c, w, b, hidden).unwrap();
        let got = tape.value(c2).data();
        assert!((got[0] - 0.7).abs() < 1e-12);
        assert!((got[1] + 1.1).abs() < 1e-12);
    }

    #[test]
    fn conv_output_length_and_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape
            .input(Tensor::matrix(9, 1, (0..9).map(|v| v as f64).collect()).unwrap())
            .unwrap();
        // center tap 1: output equals the centered slice of the input
        let w = tape
            .input(Tensor::new(vec![1, 3, 1], vec![0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let y = tape.dilated_conv1d(x, w, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[7, 1]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn conv_too_short_errors() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(4, 1, vec![0.0; 4]).unwrap()).unwrap();
        let w = tape.input(Tensor::new(vec![1, 3, 1], vec![0.0; 3]).unwrap()).unwrap();
        assert!(matches!(
            tape.dilated_conv1d(x, w, 2),
            Err(NnError::SequenceTooShort { len: 4, dilation: 2, .. })
        ));
    }

    #[test]
    fn batchnorm_constant_column_gives_beta() {
        let mut tape = Tape::new();
        let x = tape
            .input(Tensor::matrix(3, 2, vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0]).unwrap())
            .unwrap();
        let gamma = tape.input(Tensor::vector(vec![2.0, 2.0])).unwrap();
        let beta = tape.input(Tensor::vector(vec![0.25, 0.25])).unwrap();
        let (y, _, _) = tape.batchnorm_train(x, gamma, beta).unwrap();
        for i in 0..3 {
            assert!((tape.value(y).at2(i, 0) - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_identity_on_standardized_batch() {
        let mut tape = Tape::new();
        // mean 0, biased variance 1 per column
        let x = tape
            .input(Tensor::matrix(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap())
            .unwrap();
        let gamma = tape.input(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let beta = tape.input(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let (y, mean, var) = tape.batchnorm_train(x, gamma, beta).unwrap();
        assert_eq!(mean.data(), &[0.0, 0.0]);
        assert_eq!(var.data(), &[1.0, 1.0]);
        for (got, want) in tape.value(y).data().iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_batch_of_one_errors_in_train_mode() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let gamma = tape.input(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let beta = tape.input(Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert!(matches!(
            tape.batchnorm_train(x, gamma, beta),
            Err(NnError::DegenerateBatch(1))
        ));
    }

    #[test]
    fn softmax_xent_uniform_logits_is_ln_v() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::vector(vec![0.7; 5])).unwrap();
        let loss = tape.softmax_xent(logits, 2).unwrap();
        assert!((tape.value(loss).scalar_value() - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_rejects_bad_target() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::vector(vec![0.0; 3])).unwrap();
        assert!(matches!(
            tape.softmax_xent(logits, 3),
            Err(NnError::LabelOutOfRange { index: 3, classes: 3 })
        ));
    }

    #[test]
    fn sigmoid_bce_zero_logits_is_ln_two() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::vector(vec![0.0; 4])).unwrap();
        let loss = tape
            .sigmoid_bce(logits, Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]))
            .unwrap();
        assert!((tape.value(loss).scalar_value() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_accumulates_shared_parameter_uses() {
        // y = x*x via mul: dy/dx = 2x
        let mut tape = Tape::new();
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::vector(vec![3.0])).unwrap();
        let x = tape.param(&ps, "x").unwrap();
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        let pg = tape.param_grads(&grads).unwrap();
        assert_eq!(pg["x"].data(), &[6.0]);
    }
}
