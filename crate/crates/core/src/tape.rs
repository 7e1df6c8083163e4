//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Nodes are appended in forward order, so the append order is already a
//! topological order; backward walks the tape in exact reverse append order,
//! which fixes the gradient accumulation order and makes repeated runs
//! bit-identical.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub type NodeId = usize;

const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Scale {
        x: NodeId,
        alpha: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // saved for backward; in eval mode these are the running stats
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: NodeId,
        target: Tensor,
    },
    CosineLoss {
        pred: NodeId,
        target: Tensor,
    },
    L1Norm {
        xs: Vec<NodeId>,
    },
    MulConst {
        x: NodeId,
        c: f64,
    },
    /// Sum of scalar nodes (loss combination).
    AddScalars {
        xs: Vec<NodeId>,
    },
    /// <g, x>: fixed-weight inner product to a scalar. Test utility for
    /// injecting arbitrary upstream gradients.
    Inner {
        x: NodeId,
        g: Tensor,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    label: Option<&'static str>,
}

/// Running statistics for one batch-norm layer, owned by the network.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_of: Vec<Option<ParamId>>,
    param_cache: HashMap<ParamId, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn label(&self, id: NodeId) -> Option<&'static str> {
        self.nodes[id].label
    }

    pub fn set_label(&mut self, id: NodeId, label: &'static str) {
        self.nodes[id].label = Some(label);
    }

    fn push(&mut self, op: Op, value: Tensor, check: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: check });
        }
        self.nodes.push(Node { op, value, label: None });
        self.param_of.push(None);
        Ok(self.nodes.len() - 1)
    }

    /// A leaf holding a non-parameter value (inputs, constants).
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value, "input")
    }

    /// A leaf seeded from the parameter store. Seeding the same parameter
    /// twice returns the same node, so gradients accumulate in one place.
    pub fn param(&mut self, id: ParamId, store: &ParamStore) -> Result<NodeId> {
        if let Some(&n) = self.param_cache.get(&id) {
            return Ok(n);
        }
        let n = self.push(Op::Leaf, store.value(id).clone(), "param")?;
        self.param_of[n] = Some(id);
        self.param_cache.insert(id, n);
        Ok(n)
    }

    pub fn param_of(&self, node: NodeId) -> Option<ParamId> {
        self.param_of[node]
    }

    fn require_2d(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Error::Dimension { op, lhs: s.to_vec(), rhs: vec![] });
        }
        Ok((s[0], s[1]))
    }

    /// y = x W (+ b). x: [batch x in], w: [in x out], b: [out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (batch, xin) = self.require_2d(x, "linear")?;
        let (win, wout) = self.require_2d(w, "linear")?;
        if xin != win {
            return Err(Error::Dimension {
                op: "linear",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(w).shape().to_vec(),
            });
        }
        if let Some(bn) = b {
            let bs = self.value(bn).shape();
            if bs != [wout] {
                return Err(Error::Dimension {
                    op: "linear_bias",
                    lhs: bs.to_vec(),
                    rhs: vec![wout],
                });
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; batch * wout];
        for r in 0..batch {
            for i in 0..xin {
                let xv_ri = xv[r * xin + i];
                let wrow = &wv[i * wout..(i + 1) * wout];
                let orow = &mut out[r * wout..(r + 1) * wout];
                for (o, wv_io) in orow.iter_mut().zip(wrow) {
                    *o += xv_ri * wv_io;
                }
            }
        }
        if let Some(bn) = b {
            let bv = self.value(bn).data();
            for r in 0..batch {
                for c in 0..wout {
                    out[r * wout + c] += bv[c];
                }
            }
        }
        let value = Tensor::new(vec![batch, wout], out)?;
        self.push(Op::Linear { x, w, b }, value, "linear")
    }

    /// Channel-wise concatenation of [batch x c_k] parts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat: empty part list"));
        }
        let (batch, _) = self.require_2d(parts[0], "concat")?;
        let mut total = 0usize;
        for &p in parts {
            let (b, c) = self.require_2d(p, "concat")?;
            if b != batch {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(batch * total);
        for r in 0..batch {
            for &p in parts {
                let c = self.value(p).cols();
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::new(vec![batch, total], out)?;
        self.push(Op::Concat { parts: parts.to_vec() }, value, "concat")
    }

    /// Elementwise alpha * x with a scalar architecture weight node.
    pub fn scale(&mut self, x: NodeId, alpha: NodeId) -> Result<NodeId> {
        if !self.value(alpha).is_scalar() {
            return Err(Error::contract("scale: alpha must be a scalar node"));
        }
        let a = self.value(alpha).item();
        let out: Vec<f64> = self.value(x).data().iter().map(|v| a * v).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(Op::Scale { x, alpha }, value, "scale")
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push(Op::Add { a, b }, value, "add")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        // never emits -0.0
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(Op::Relu { x }, value, "relu")
    }

    /// Batch normalization over the batch dimension of [batch x c].
    /// Train mode uses batch statistics and updates `state` with momentum
    /// 0.1; eval mode reads `state`.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        train: bool,
        state: &mut BnState,
    ) -> Result<NodeId> {
        let (batch, c) = self.require_2d(x, "batchnorm")?;
        if train && batch < 2 {
            return Err(Error::contract("batchnorm: train mode requires batch >= 2"));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Dimension {
                op: "batchnorm_affine",
                lhs: self.value(gamma).shape().to_vec(),
                rhs: vec![c],
            });
        }
        let xv = self.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            for r in 0..batch {
                for j in 0..c {
                    mean[j] += xv[r * c + j];
                }
            }
            for m in &mut mean {
                *m /= batch as f64;
            }
            let mut var = vec![0.0; c];
            for r in 0..batch {
                for j in 0..c {
                    let d = xv[r * c + j] - mean[j];
                    var[j] += d * d;
                }
            }
            for v in &mut var {
                *v /= batch as f64;
            }
            for j in 0..c {
                state.running_mean[j] = (1.0 - BN_MOMENTUM) * state.running_mean[j] + BN_MOMENTUM * mean[j];
                state.running_var[j] = (1.0 - BN_MOMENTUM) * state.running_var[j] + BN_MOMENTUM * var[j];
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; batch * c];
        for r in 0..batch {
            for j in 0..c {
                let xhat = (xv[r * c + j] - mean[j]) * inv_std[j];
                out[r * c + j] = gv[j] * xhat + bv[j];
            }
        }
        let value = Tensor::new(vec![batch, c], out)?;
        self.push(
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train },
            value,
            "batchnorm",
        )
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (batch, c) = self.require_2d(logits, "softmax_xent")?;
        if labels.len() != batch {
            return Err(Error::Dimension {
                op: "softmax_xent",
                lhs: vec![labels.len()],
                rhs: vec![batch],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "softmax_xent: label {bad} out of range for {c} classes"
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; batch * c];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &lv[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[r * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[r * c + j] /= z;
            }
            loss += -(probs[r * c + labels[r]].max(1e-300)).ln();
        }
        loss /= batch as f64;
        self.push(
            Op::SoftmaxXent { logits, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
            "softmax_xent",
        )
    }

    /// Mean over all elements of (pred - target)^2.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::Dimension {
                op: "mse",
                lhs: self.value(pred).shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = target.numel() as f64;
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        self.push(Op::Mse { pred, target: target.clone() }, Tensor::scalar(loss), "mse")
    }

    /// Mean over the batch of 1 - cos(pred_row, target_row).
    pub fn cosine_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let (batch, c) = self.require_2d(pred, "cosine_loss")?;
        if target.shape() != [batch, c] {
            return Err(Error::Dimension {
                op: "cosine_loss",
                lhs: self.value(pred).shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let pv = self.value(pred).data();
        let tv = target.data();
        let mut loss = 0.0;
        for r in 0..batch {
            let p = &pv[r * c..(r + 1) * c];
            let t = &tv[r * c..(r + 1) * c];
            let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if np == 0.0 || nt == 0.0 {
                return Err(Error::contract("cosine_loss: zero-vector input"));
            }
            let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
            loss += 1.0 - dot / (np * nt);
        }
        loss /= batch as f64;
        self.push(
            Op::CosineLoss { pred, target: target.clone() },
            Tensor::scalar(loss),
            "cosine_loss",
        )
    }

    /// Sum of |x| over the given scalar nodes (the L1 penalty term).
    pub fn l1_norm(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut s = 0.0;
        for &x in xs {
            if !self.value(x).is_scalar() {
                return Err(Error::contract("l1_norm: entries must be scalar nodes"));
            }
            s += self.value(x).item().abs();
        }
        self.push(Op::L1Norm { xs: xs.to_vec() }, Tensor::scalar(s), "l1_norm")
    }

    pub fn mul_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| c * v).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(Op::MulConst { x, c }, value, "mul_const")
    }

    /// Sum of scalar nodes; used to combine loss terms.
    pub fn add_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::contract("add_scalars: empty list"));
        }
        let mut s = 0.0;
        for &x in xs {
            if !self.value(x).is_scalar() {
                return Err(Error::contract("add_scalars: entries must be scalars"));
            }
            s += self.value(x).item();
        }
        self.push(Op::AddScalars { xs: xs.to_vec() }, Tensor::scalar(s), "add_scalars")
    }

    /// <g, x> as a scalar; gradient w.r.t. x is exactly g.
    pub fn inner(&mut self, x: NodeId, g: &Tensor) -> Result<NodeId> {
        if self.value(x).shape() != g.shape() {
            return Err(Error::Dimension {
                op: "inner",
                lhs: self.value(x).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let s: f64 = self.value(x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        self.push(Op::Inner { x, g: g.clone() }, Tensor::scalar(s), "inner")
    }

    /// Smallest distance of any ReLU pre-activation or L1 entry to its kink.
    /// Callers re-sample inputs when this is below ~10 * fd-eps.
    pub fn min_kink_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.nodes[*x].value.data() {
                        min = min.min(v.abs());
                    }
                }
                Op::L1Norm { xs } => {
                    for &x in xs {
                        min = min.min(self.nodes[x].value.item().abs());
                    }
                }
                _ => {}
            }
        }
        min
    }

    /// Reverse-mode gradients of a scalar root w.r.t. every node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let up = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let xv = self.nodes[*x].value.clone();
                    let wv = self.nodes[*w].value.clone();
                    let (batch, xin) = (xv.rows(), xv.cols());
                    let wout = wv.cols();
                    let u = up.data();
                    // dx = up . W^T
                    let mut dx = vec![0.0; batch * xin];
                    for r in 0..batch {
                        for j in 0..xin {
                            let mut s = 0.0;
                            for o in 0..wout {
                                s += u[r * wout + o] * wv.data()[j * wout + o];
                            }
                            dx[r * xin + j] = s;
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(vec![batch, xin], dx)?);
                    // dW = x^T . up
                    let mut dw = vec![0.0; xin * wout];
                    for r in 0..batch {
                        for j in 0..xin {
                            let xr = xv.data()[r * xin + j];
                            for o in 0..wout {
                                dw[j * wout + o] += xr * u[r * wout + o];
                            }
                        }
                    }
                    self.acc(&mut grads, *w, Tensor::new(vec![xin, wout], dw)?);
                    if let Some(bn) = b {
                        let mut db = vec![0.0; wout];
                        for r in 0..batch {
                            for o in 0..wout {
                                db[o] += u[r * wout + o];
                            }
                        }
                        self.acc(&mut grads, *bn, Tensor::new(vec![wout], db)?);
                    }
                }
                Op::Concat { parts } => {
                    let batch = up.rows();
                    let total = up.cols();
                    let mut offset = 0usize;
                    for &p in parts {
                        let c = self.nodes[p].value.cols();
                        let mut dp = Vec::with_capacity(batch * c);
                        for r in 0..batch {
                            dp.extend_from_slice(&up.data()[r * total + offset..r * total + offset + c]);
                        }
                        self.acc(&mut grads, p, Tensor::new(vec![batch, c], dp)?);
                        offset += c;
                    }
                }
                Op::Scale { x, alpha } => {
                    let a = self.nodes[*alpha].value.item();
                    let dx: Vec<f64> = up.data().iter().map(|v| a * v).collect();
                    self.acc(&mut grads, *x, Tensor::new(up.shape().to_vec(), dx)?);
                    let da: f64 = up
                        .data()
                        .iter()
                        .zip(self.nodes[*x].value.data())
                        .map(|(u, xv)| u * xv)
                        .sum();
                    self.acc(&mut grads, *alpha, Tensor::scalar(da));
                }
                Op::Add { a, b } => {
                    self.acc(&mut grads, *a, up.clone());
                    self.acc(&mut grads, *b, up);
                }
                Op::Relu { x } => {
                    let dx: Vec<f64> = up
                        .data()
                        .iter()
                        .zip(self.nodes[*x].value.data())
                        .map(|(u, &xv)| if xv > 0.0 { *u } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *x, Tensor::new(up.shape().to_vec(), dx)?);
                }
                Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                    let xv = &self.nodes[*x].value;
                    let (batch, c) = (xv.rows(), xv.cols());
                    let gv = self.nodes[*gamma].value.data().to_vec();
                    let u = up.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut xhat = vec![0.0; batch * c];
                    for r in 0..batch {
                        for j in 0..c {
                            let xh = (xv.data()[r * c + j] - mean[j]) * inv_std[j];
                            xhat[r * c + j] = xh;
                            dgamma[j] += u[r * c + j] * xh;
                            dbeta[j] += u[r * c + j];
                        }
                    }
                    self.acc(&mut grads, *gamma, Tensor::new(vec![c], dgamma.clone())?);
                    self.acc(&mut grads, *beta, Tensor::new(vec![c], dbeta.clone())?);
                    let mut dx = vec![0.0; batch * c];
                    if *train {
                        // batch statistics participate in the gradient
                        let nb = batch as f64;
                        for j in 0..c {
                            let sum_dxhat: f64 = (0..batch).map(|r| u[r * c + j] * gv[j]).sum();
                            let sum_dxhat_xhat: f64 =
                                (0..batch).map(|r| u[r * c + j] * gv[j] * xhat[r * c + j]).sum();
                            for r in 0..batch {
                                let dxhat = u[r * c + j] * gv[j];
                                dx[r * c + j] = inv_std[j] / nb
                                    * (nb * dxhat - sum_dxhat - xhat[r * c + j] * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for r in 0..batch {
                            for j in 0..c {
                                dx[r * c + j] = u[r * c + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(vec![batch, c], dx)?);
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let (batch, c) = (self.nodes[*logits].value.rows(), self.nodes[*logits].value.cols());
                    let s = up.item() / batch as f64;
                    let mut dl = vec![0.0; batch * c];
                    for r in 0..batch {
                        for j in 0..c {
                            let y = if labels[r] == j { 1.0 } else { 0.0 };
                            dl[r * c + j] = s * (probs[r * c + j] - y);
                        }
                    }
                    self.acc(&mut grads, *logits, Tensor::new(vec![batch, c], dl)?);
                }
                Op::Mse { pred, target } => {
                    let n = target.numel() as f64;
                    let s = up.item() * 2.0 / n;
                    let dp: Vec<f64> = self.nodes[*pred]
                        .value
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(p, t)| s * (p - t))
                        .collect();
                    self.acc(&mut grads, *pred, Tensor::new(target.shape().to_vec(), dp)?);
                }
                Op::CosineLoss { pred, target } => {
                    let pv = &self.nodes[*pred].value;
                    let (batch, c) = (pv.rows(), pv.cols());
                    let s = up.item() / batch as f64;
                    let mut dp = vec![0.0; batch * c];
                    for r in 0..batch {
                        let p = &pv.data()[r * c..(r + 1) * c];
                        let t = &target.data()[r * c..(r + 1) * c];
                        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            // d(1 - dot/(|p||t|))/dp_j
                            dp[r * c + j] =
                                s * (-(t[j] / (np * nt)) + dot * p[j] / (np * np * np * nt));
                        }
                    }
                    self.acc(&mut grads, *pred, Tensor::new(vec![batch, c], dp)?);
                }
                Op::L1Norm { xs } => {
                    let u = up.item();
                    for &x in xs {
                        let v = self.nodes[x].value.item();
                        // subgradient 0 at the kink (lasso convention)
                        let sg = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        self.acc(&mut grads, x, Tensor::scalar(u * sg));
                    }
                }
                Op::MulConst { x, c } => {
                    let dx: Vec<f64> = up.data().iter().map(|v| c * v).collect();
                    self.acc(&mut grads, *x, Tensor::new(up.shape().to_vec(), dx)?);
                }
                Op::AddScalars { xs } => {
                    for &x in xs {
                        self.acc(&mut grads, x, up.clone());
                    }
                }
                Op::Inner { x, g } => {
                    let s = up.item();
                    let dx: Vec<f64> = g.data().iter().map(|v| s * v).collect();
                    self.acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        match &mut grads[id] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    /// Forward multiply-add / element-op count of everything on the tape.
    pub fn forward_cost(&self) -> CostBreakdown {
        let mut cost = CostBreakdown::default();
        for node in &self.nodes {
            let numel = node.value.numel() as u64;
            match &node.op {
                Op::Leaf | Op::Concat { .. } => {}
                Op::Linear { x, w, b } => {
                    let batch = self.nodes[*x].value.rows() as u64;
                    let xin = self.nodes[*x].value.cols() as u64;
                    let wout = self.nodes[*w].value.cols() as u64;
                    let macs = batch * xin * wout + if b.is_some() { batch * wout } else { 0 };
                    if node.label == Some("projection") || node.label == Some("adapter") {
                        cost.projection_macs += macs;
                    } else {
                        cost.linear_macs += macs;
                    }
                }
                Op::Scale { .. } => cost.scale_ops += numel,
                Op::Add { .. } => cost.add_ops += numel,
                Op::Relu { .. } => cost.activ_ops += numel,
                // per element: subtract mean, multiply inv_std, multiply gamma, add beta
                Op::BatchNorm { .. } => cost.norm_ops += 4 * numel,
                Op::SoftmaxXent { logits, .. } | Op::Inner { x: logits, .. } => {
                    cost.loss_ops += 3 * self.nodes[*logits].value.numel() as u64
                }
                Op::Mse { pred, .. } | Op::CosineLoss { pred, .. } => {
                    cost.loss_ops += 3 * self.nodes[*pred].value.numel() as u64
                }
                Op::L1Norm { xs } => cost.loss_ops += xs.len() as u64,
                Op::MulConst { .. } | Op::AddScalars { .. } => cost.loss_ops += numel,
            }
        }
        cost
    }

    /// Multiply-add / element-op count of one reverse sweep from a full
    /// forward. Counted analytically per node from the backward formulas.
    pub fn backward_cost(&self) -> u64 {
        let mut total: u64 = 0;
        for node in &self.nodes {
            let numel = node.value.numel() as u64;
            total += match &node.op {
                Op::Leaf | Op::Concat { .. } => 0,
                Op::Linear { x, w, b } => {
                    let batch = self.nodes[*x].value.rows() as u64;
                    let xin = self.nodes[*x].value.cols() as u64;
                    let wout = self.nodes[*w].value.cols() as u64;
                    // dx and dW are both full matmuls; db is a column sum
                    2 * batch * xin * wout + if b.is_some() { batch * wout } else { 0 }
                }
                Op::Scale { x, .. } => 2 * self.nodes[*x].value.numel() as u64,
                Op::Add { .. } => numel,
                Op::Relu { .. } => numel,
                Op::BatchNorm { x, .. } => 8 * self.nodes[*x].value.numel() as u64,
                Op::SoftmaxXent { logits, .. } => 2 * self.nodes[*logits].value.numel() as u64,
                Op::Mse { pred, .. } | Op::CosineLoss { pred, .. } => {
                    2 * self.nodes[*pred].value.numel() as u64
                }
                Op::L1Norm { xs } => xs.len() as u64,
                Op::MulConst { .. } | Op::AddScalars { .. } | Op::Inner { .. } => numel,
            };
        }
        total
    }
}

/// Per-kind forward op counts measured from a tape traversal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CostBreakdown {
    pub linear_macs: u64,
    pub projection_macs: u64,
    pub scale_ops: u64,
    pub add_ops: u64,
    pub norm_ops: u64,
    pub activ_ops: u64,
    pub loss_ops: u64,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.linear_macs
            + self.projection_macs
            + self.scale_ops
            + self.add_ops
            + self.norm_ops
            + self.activ_ops
            + self.loss_ops
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of_node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient map over the parameter store: `result[param.0]` is the
    /// gradient of that parameter, zero-filled for parameters with no tape
    /// path to the root.
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        for (node, pid) in tape.param_of.iter().enumerate() {
            if let Some(pid) = pid {
                if let Some(g) = self.of_node(node) {
                    out[pid.0] = g.clone();
                }
            }
        }
        out
    }
}
