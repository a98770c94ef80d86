//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A forward pass records one node per operation; [`Tape::backward`] walks
//! the tape in reverse and accumulates exact gradients for every recorded
//! node. Node ids are topologically ordered by construction, so reverse id
//! order is a valid traversal.
//!
//! The op set is exactly what the lifting models need: affine layers, ReLU,
//! batch normalization (batch statistics while training, running statistics
//! in evaluation), inverted dropout, residual adds, the vector-neuron ops,
//! Gram invariants, and the MSE loss.

use crate::error::{Error, Result};
use crate::tensor::{accumulate_tn, matmul_nn, matmul_nt, Tensor};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf {
        requires_grad: bool,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    /// Training-mode batch norm; `xhat` and per-feature `inv_std` are cached
    /// from the forward pass.
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    /// Evaluation-mode batch norm: a fixed affine map from running stats.
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    /// Inverted dropout; mask entries are 0 or 1/(1-rate).
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    /// B×N×2 and B×N stacked into B×N×3.
    JoinXyz {
        xy: NodeId,
        z: NodeId,
    },
    /// Per-sample scalar multiply along the first axis.
    ScaleRows {
        x: NodeId,
        factors: Vec<f64>,
    },
    /// Channel mixing of vector features: out[b,c',:] = Σ_c w[c',c] x[b,c,:].
    VnLinear {
        x: NodeId,
        w: NodeId,
    },
    /// Projection ReLU on vector channels with learned directions.
    VnRelu {
        q: NodeId,
        k: NodeId,
        eps: f64,
    },
    /// Upper triangle of the per-sample channel Gram matrix.
    Gram {
        x: NodeId,
    },
    MseLoss {
        pred: NodeId,
        target: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    label: String,
}

/// Per-feature batch statistics produced by a training-mode batch norm,
/// used by the caller to update running statistics.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, label: impl Into<String>) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            label: label.into(),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor, label: impl Into<String>) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                requires_grad: false,
            },
        label)
    }

    /// Leaf that accumulates a gradient (parameters, grad-checked inputs).
    pub fn var(&mut self, value: Tensor, label: impl Into<String>) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                requires_grad: true,
            },
        label)
    }

    /// Affine map: x (B×K) · w (O×K)^T + b (O).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId, label: impl Into<String>) -> Result<NodeId> {
        let (bsz, k) = self.value(x).dims2()?;
        let (o, wk) = self.value(w).dims2()?;
        if wk != k {
            return Err(Error::invalid_argument(format!(
                "linear: input has {k} features but weight expects {wk}"
            )));
        }
        if self.value(b).len() != o {
            return Err(Error::invalid_argument(format!(
                "linear: bias has {} entries but weight produces {o}",
                self.value(b).len()
            )));
        }
        let mut out = Tensor::zeros(&[bsz, o]);
        matmul_nt(self.value(x), self.value(w), &mut out);
        {
            let bias = self.value(b).data().to_vec();
            let od = out.data_mut();
            for row in od.chunks_mut(o) {
                for (v, bv) in row.iter_mut().zip(&bias) {
                    *v += bv;
                }
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }, label))
    }

    pub fn relu(&mut self, x: NodeId, label: impl Into<String>) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu { x }, label)
    }

    /// Batch norm over the batch axis of a B×F input using batch statistics.
    /// Returns the node and the batch statistics for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        label: impl Into<String>,
    ) -> Result<(NodeId, BatchStats)> {
        let (bsz, f) = self.value(x).dims2()?;
        self.check_affine_params(gamma, beta, f)?;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; f];
        for row in xd.chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= bsz as f64;
        }
        let mut var = vec![0.0; f];
        for row in xd.chunks(f) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        for s in &mut var {
            *s /= bsz as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let mut xhat = Tensor::zeros(&[bsz, f]);
        {
            let xh = xhat.data_mut();
            for (bi, row) in xd.chunks(f).enumerate() {
                for fi in 0..f {
                    xh[bi * f + fi] = (row[fi] - mean[fi]) * inv_std[fi];
                }
            }
        }
        let out = self.affine_from_xhat(&xhat, gamma, beta, f);
        let stats = BatchStats { mean, var };
        let id = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            label,
        );
        Ok((id, stats))
    }

    /// Batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        label: impl Into<String>,
    ) -> Result<NodeId> {
        let (bsz, f) = self.value(x).dims2()?;
        self.check_affine_params(gamma, beta, f)?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::invalid_argument(
                "batch_norm: running statistics length mismatch".to_string(),
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(&[bsz, f]);
        {
            let xd = self.value(x).data();
            let xh = xhat.data_mut();
            for (bi, row) in xd.chunks(f).enumerate() {
                for fi in 0..f {
                    xh[bi * f + fi] = (row[fi] - running_mean[fi]) * inv_std[fi];
                }
            }
        }
        let out = self.affine_from_xhat(&xhat, gamma, beta, f);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            label,
        ))
    }

    fn check_affine_params(&self, gamma: NodeId, beta: NodeId, f: usize) -> Result<()> {
        if self.value(gamma).len() != f || self.value(beta).len() != f {
            return Err(Error::invalid_argument(format!(
                "batch_norm: gamma/beta must have {f} entries"
            )));
        }
        Ok(())
    }

    fn affine_from_xhat(&self, xhat: &Tensor, gamma: NodeId, beta: NodeId, f: usize) -> Tensor {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(f) {
            for fi in 0..f {
                row[fi] = g[fi] * row[fi] + b[fi];
            }
        }
        out
    }

    /// Inverted dropout: survivors scaled by 1/(1-rate). `rate` = 0 is the
    /// identity and draws nothing from the RNG.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut impl Rng,
        label: impl Into<String>,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid_argument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let len = self.value(x).len();
        let mask: Vec<f64> = if rate == 0.0 {
            vec![1.0; len]
        } else {
            let keep = 1.0 / (1.0 - rate);
            (0..len)
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect()
        };
        let mut out = self.value(x).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        Ok(self.push(out, Op::Dropout { x, mask }, label))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, label: impl Into<String>) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::invalid_argument(format!(
                "add: shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        for (v, w) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *v += w;
        }
        Ok(self.push(out, Op::Add { a, b }, label))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize], label: impl Into<String>) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }, label))
    }

    /// Stacks xy (B×N×2) and z (B×N) into B×N×3.
    pub fn join_xyz(&mut self, xy: NodeId, z: NodeId, label: impl Into<String>) -> Result<NodeId> {
        let (bsz, n, two) = self.value(xy).dims3()?;
        let (zb, zn) = self.value(z).dims2()?;
        if two != 2 || zb != bsz || zn != n {
            return Err(Error::invalid_argument(format!(
                "join_xyz: incompatible shapes {:?} and {:?}",
                self.value(xy).shape(),
                self.value(z).shape()
            )));
        }
        let mut out = Tensor::zeros(&[bsz, n, 3]);
        {
            let xyd = self.value(xy).data();
            let zd = self.value(z).data();
            let od = out.data_mut();
            for i in 0..bsz * n {
                od[i * 3] = xyd[i * 2];
                od[i * 3 + 1] = xyd[i * 2 + 1];
                od[i * 3 + 2] = zd[i];
            }
        }
        Ok(self.push(out, Op::JoinXyz { xy, z }, label))
    }

    /// Multiplies sample `b`'s block by `factors[b]`.
    pub fn scale_rows(&mut self, x: NodeId, factors: Vec<f64>, label: impl Into<String>) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() || shape[0] != factors.len() {
            return Err(Error::invalid_argument(format!(
                "scale_rows: {} factors for leading dimension {:?}",
                factors.len(),
                shape.first()
            )));
        }
        let block: usize = shape[1..].iter().product();
        let mut out = self.value(x).clone();
        for (b, chunk) in out.data_mut().chunks_mut(block).enumerate() {
            for v in chunk.iter_mut() {
                *v *= factors[b];
            }
        }
        Ok(self.push(out, Op::ScaleRows { x, factors }, label))
    }

    /// Vector-neuron linear layer: channel mixing only, no bias (a bias
    /// would break rotation equivariance).
    pub fn vn_linear(&mut self, x: NodeId, w: NodeId, label: impl Into<String>) -> Result<NodeId> {
        let (bsz, c, d) = self.value(x).dims3()?;
        let (co, ci) = self.value(w).dims2()?;
        if ci != c {
            return Err(Error::invalid_argument(format!(
                "vn_linear: input has {c} channels but weight expects {ci}"
            )));
        }
        let mut out = Tensor::zeros(&[bsz, co, d]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let od = out.data_mut();
            for b in 0..bsz {
                let xb = &xd[b * c * d..(b + 1) * c * d];
                let ob = &mut od[b * co * d..(b + 1) * co * d];
                for co_i in 0..co {
                    let wr = &wd[co_i * c..(co_i + 1) * c];
                    let dst = &mut ob[co_i * d..(co_i + 1) * d];
                    for (ci_i, &wv) in wr.iter().enumerate() {
                        let src = &xb[ci_i * d..(ci_i + 1) * d];
                        for dd in 0..d {
                            dst[dd] += wv * src[dd];
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::VnLinear { x, w }, label))
    }

    /// Projection ReLU: per channel, with q the feature and k the learned
    /// direction, output q when ⟨q,k⟩ ≥ 0, else q − ⟨q,k⟩/(‖k‖²+ε) · k.
    pub fn vn_relu(&mut self, q: NodeId, k: NodeId, eps: f64, label: impl Into<String>) -> Result<NodeId> {
        if self.value(q).shape() != self.value(k).shape() {
            return Err(Error::invalid_argument(format!(
                "vn_relu: shape mismatch {:?} vs {:?}",
                self.value(q).shape(),
                self.value(k).shape()
            )));
        }
        let (bsz, c, d) = self.value(q).dims3()?;
        let mut out = self.value(q).clone();
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let od = out.data_mut();
            for ch in 0..bsz * c {
                let qv = &qd[ch * d..(ch + 1) * d];
                let kv = &kd[ch * d..(ch + 1) * d];
                let s: f64 = qv.iter().zip(kv).map(|(a, b)| a * b).sum();
                if s < 0.0 {
                    let n: f64 = kv.iter().map(|v| v * v).sum::<f64>() + eps;
                    let coef = s / n;
                    let dst = &mut od[ch * d..(ch + 1) * d];
                    for dd in 0..d {
                        dst[dd] = qv[dd] - coef * kv[dd];
                    }
                }
            }
        }
        Ok(self.push(out, Op::VnRelu { q, k, eps }, label))
    }

    /// Rotation-invariant features: the upper triangle (i ≤ j) of the
    /// per-sample channel Gram matrix, C(C+1)/2 scalars.
    pub fn gram(&mut self, x: NodeId, label: impl Into<String>) -> Result<NodeId> {
        let (bsz, c, d) = self.value(x).dims3()?;
        let p = c * (c + 1) / 2;
        let mut out = Tensor::zeros(&[bsz, p]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for b in 0..bsz {
                let xb = &xd[b * c * d..(b + 1) * c * d];
                let ob = &mut od[b * p..(b + 1) * p];
                let mut idx = 0;
                for i in 0..c {
                    let vi = &xb[i * d..(i + 1) * d];
                    for j in i..c {
                        let vj = &xb[j * d..(j + 1) * d];
                        ob[idx] = vi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        idx += 1;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Gram { x }, label))
    }

    /// Mean squared error over all elements. Non-finite inputs surface here
    /// as a numerical-failure error.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId, label: impl Into<String>) -> Result<NodeId> {
        let label = label.into();
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(Error::invalid_argument(format!(
                "mse_loss: shape mismatch {:?} vs {:?}",
                self.value(pred).shape(),
                self.value(target).shape()
            )));
        }
        if self.value(pred).has_non_finite() || self.value(target).has_non_finite() {
            return Err(Error::numerical(format!("{label} (non-finite input)")));
        }
        let count = self.value(pred).len() as f64;
        let sum: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let loss = sum / count;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("{label} (non-finite loss)")));
        }
        Ok(self.push(Tensor::scalar(loss), Op::MseLoss { pred, target }, label))
    }

    /// Reverse-mode accumulation from a scalar loss node. Returns a gradient
    /// per node; a NaN in any gradient aborts with the offending layer name.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid_argument(
                "backward requires a scalar loss node".to_string(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else {
                continue;
            };
            let node = &self.nodes[id];
            if g.data().iter().any(|v| v.is_nan()) {
                return Err(Error::numerical(format!("gradient of {}", node.label)));
            }
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Linear { x, w, b } => {
                    let (bsz, o) = (g.shape()[0], g.shape()[1]);
                    let k = self.value(*x).shape()[1];
                    if self.wants_grad(*x) {
                        let mut dx = Tensor::zeros(&[bsz, k]);
                        matmul_nn(&g, self.value(*w), &mut dx);
                        self.add_grad(&mut grads, *x, dx);
                    }
                    if self.wants_grad(*w) {
                        let mut dw = Tensor::zeros(&[o, k]);
                        accumulate_tn(&g, self.value(*x), &mut dw);
                        self.add_grad(&mut grads, *w, dw);
                    }
                    if self.wants_grad(*b) {
                        let mut db = Tensor::zeros(&[o]);
                        for row in g.data().chunks(o) {
                            for (d, v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.add_grad(&mut grads, *b, db);
                    }
                }
                Op::Relu { x } => {
                    let mut dx = g.clone();
                    for (d, v) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if *v == 0.0 {
                            *d = 0.0;
                        }
                    }
                    self.add_grad(&mut grads, *x, dx);
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (bsz, f) = (g.shape()[0], g.shape()[1]);
                    let bn = bsz as f64;
                    let gam = self.value(*gamma).data();
                    // Per-feature reductions of g and g·xhat.
                    let mut sum_g = vec![0.0; f];
                    let mut sum_gx = vec![0.0; f];
                    for (grow, xrow) in g.data().chunks(f).zip(xhat.data().chunks(f)) {
                        for fi in 0..f {
                            sum_g[fi] += grow[fi];
                            sum_gx[fi] += grow[fi] * xrow[fi];
                        }
                    }
                    if self.wants_grad(*x) {
                        let mut dx = Tensor::zeros(&[bsz, f]);
                        let dxd = dx.data_mut();
                        for bi in 0..bsz {
                            for fi in 0..f {
                                let idx = bi * f + fi;
                                dx_bn(
                                    &mut dxd[idx],
                                    g.data()[idx],
                                    xhat.data()[idx],
                                    sum_g[fi] / bn,
                                    sum_gx[fi] / bn,
                                    gam[fi],
                                    inv_std[fi],
                                );
                            }
                        }
                        self.add_grad(&mut grads, *x, dx);
                    }
                    self.affine_param_grads(&mut grads, *gamma, *beta, &sum_gx, &sum_g);
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (bsz, f) = (g.shape()[0], g.shape()[1]);
                    let gam = self.value(*gamma).data();
                    let mut sum_g = vec![0.0; f];
                    let mut sum_gx = vec![0.0; f];
                    for (grow, xrow) in g.data().chunks(f).zip(xhat.data().chunks(f)) {
                        for fi in 0..f {
                            sum_g[fi] += grow[fi];
                            sum_gx[fi] += grow[fi] * xrow[fi];
                        }
                    }
                    if self.wants_grad(*x) {
                        let mut dx = Tensor::zeros(&[bsz, f]);
                        let dxd = dx.data_mut();
                        for bi in 0..bsz {
                            for fi in 0..f {
                                dxd[bi * f + fi] = g.data()[bi * f + fi] * gam[fi] * inv_std[fi];
                            }
                        }
                        self.add_grad(&mut grads, *x, dx);
                    }
                    self.affine_param_grads(&mut grads, *gamma, *beta, &sum_gx, &sum_g);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g.clone();
                    for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    self.add_grad(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    self.add_grad(&mut grads, *a, g.clone());
                    self.add_grad(&mut grads, *b, g.clone());
                }
                Op::Reshape { x } => {
                    let dx = g.reshaped(self.value(*x).shape()).expect("same length");
                    self.add_grad(&mut grads, *x, dx);
                }
                Op::JoinXyz { xy, z } => {
                    let (bsz, n, _) = node.value.dims3().expect("join output is rank 3");
                    let mut dxy = Tensor::zeros(&[bsz, n, 2]);
                    let mut dz = Tensor::zeros(&[bsz, n]);
                    {
                        let gd = g.data();
                        let dxyd = dxy.data_mut();
                        let dzd = dz.data_mut();
                        for i in 0..bsz * n {
                            dxyd[i * 2] = gd[i * 3];
                            dxyd[i * 2 + 1] = gd[i * 3 + 1];
                            dzd[i] = gd[i * 3 + 2];
                        }
                    }
                    self.add_grad(&mut grads, *xy, dxy);
                    self.add_grad(&mut grads, *z, dz);
                }
                Op::ScaleRows { x, factors } => {
                    let block: usize = g.shape()[1..].iter().product();
                    let mut dx = g.clone();
                    for (b, chunk) in dx.data_mut().chunks_mut(block).enumerate() {
                        for v in chunk.iter_mut() {
                            *v *= factors[b];
                        }
                    }
                    self.add_grad(&mut grads, *x, dx);
                }
                Op::VnLinear { x, w } => {
                    let (bsz, c, d) = self.value(*x).dims3().expect("vn input rank 3");
                    let co = self.value(*w).shape()[0];
                    let wd = self.value(*w).data();
                    let xd = self.value(*x).data();
                    let gd = g.data();
                    if self.wants_grad(*x) {
                        let mut dx = Tensor::zeros(&[bsz, c, d]);
                        let dxd = dx.data_mut();
                        for b in 0..bsz {
                            for co_i in 0..co {
                                let gr = &gd[(b * co + co_i) * d..(b * co + co_i + 1) * d];
                                let wr = &wd[co_i * c..(co_i + 1) * c];
                                for (ci_i, &wv) in wr.iter().enumerate() {
                                    let dst = &mut dxd[(b * c + ci_i) * d..(b * c + ci_i + 1) * d];
                                    for dd in 0..d {
                                        dst[dd] += wv * gr[dd];
                                    }
                                }
                            }
                        }
                        self.add_grad(&mut grads, *x, dx);
                    }
                    if self.wants_grad(*w) {
                        let mut dw = Tensor::zeros(&[co, c]);
                        let dwd = dw.data_mut();
                        for b in 0..bsz {
                            for co_i in 0..co {
                                let gr = &gd[(b * co + co_i) * d..(b * co + co_i + 1) * d];
                                for ci_i in 0..c {
                                    let xr = &xd[(b * c + ci_i) * d..(b * c + ci_i + 1) * d];
                                    let mut acc = 0.0;
                                    for dd in 0..d {
                                        acc += gr[dd] * xr[dd];
                                    }
                                    dwd[co_i * c + ci_i] += acc;
                                }
                            }
                        }
                        self.add_grad(&mut grads, *w, dw);
                    }
                }
                Op::VnRelu { q, k, eps } => {
                    let (bsz, c, d) = self.value(*q).dims3().expect("vn input rank 3");
                    let qd = self.value(*q).data();
                    let kd = self.value(*k).data();
                    let gd = g.data();
                    let mut dq = Tensor::zeros(&[bsz, c, d]);
                    let mut dk = Tensor::zeros(&[bsz, c, d]);
                    {
                        let dqd = dq.data_mut();
                        let dkd = dk.data_mut();
                        for ch in 0..bsz * c {
                            let r = ch * d..(ch + 1) * d;
                            let qv = &qd[r.clone()];
                            let kv = &kd[r.clone()];
                            let gv = &gd[r.clone()];
                            let s: f64 = qv.iter().zip(kv).map(|(a, b)| a * b).sum();
                            if s >= 0.0 {
                                dqd[r.clone()].copy_from_slice(gv);
                            } else {
                                let n: f64 = kv.iter().map(|v| v * v).sum::<f64>() + eps;
                                let gk: f64 = gv.iter().zip(kv).map(|(a, b)| a * b).sum();
                                let coef = s / n;
                                for dd in 0..d {
                                    dqd[ch * d + dd] = gv[dd] - gk * kv[dd] / n;
                                    dkd[ch * d + dd] = -coef * gv[dd] - gk * qv[dd] / n
                                        + 2.0 * s * gk * kv[dd] / (n * n);
                                }
                            }
                        }
                    }
                    self.add_grad(&mut grads, *q, dq);
                    self.add_grad(&mut grads, *k, dk);
                }
                Op::Gram { x } => {
                    let (bsz, c, d) = self.value(*x).dims3().expect("gram input rank 3");
                    let xd = self.value(*x).data();
                    let gd = g.data();
                    let p = c * (c + 1) / 2;
                    let mut dx = Tensor::zeros(&[bsz, c, d]);
                    {
                        let dxd = dx.data_mut();
                        for b in 0..bsz {
                            let xb = &xd[b * c * d..(b + 1) * c * d];
                            let gb = &gd[b * p..(b + 1) * p];
                            let db = &mut dxd[b * c * d..(b + 1) * c * d];
                            let mut idx = 0;
                            for i in 0..c {
                                for j in i..c {
                                    let gv = gb[idx];
                                    idx += 1;
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for dd in 0..d {
                                        db[i * d + dd] += gv * xb[j * d + dd];
                                        db[j * d + dd] += gv * xb[i * d + dd];
                                    }
                                }
                            }
                        }
                    }
                    self.add_grad(&mut grads, *x, dx);
                }
                Op::MseLoss { pred, target } => {
                    let scale = 2.0 / self.value(*pred).len() as f64 * g.data()[0];
                    if self.wants_grad(*pred) {
                        let mut dp = self.value(*pred).clone();
                        let td = self.value(*target).data().to_vec();
                        for (p, t) in dp.data_mut().iter_mut().zip(&td) {
                            *p = scale * (*p - t);
                        }
                        self.add_grad(&mut grads, *pred, dp);
                    }
                    if self.wants_grad(*target) {
                        let mut dt = self.value(*target).clone();
                        let pd = self.value(*pred).data().to_vec();
                        for (t, p) in dt.data_mut().iter_mut().zip(&pd) {
                            *t = scale * (*t - p);
                        }
                        self.add_grad(&mut grads, *target, dt);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient flows into every non-leaf node and grad-enabled leaves.
    fn wants_grad(&self, id: NodeId) -> bool {
        !matches!(
            self.nodes[id.0].op,
            Op::Leaf {
                requires_grad: false
            }
        )
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.wants_grad(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn affine_param_grads(
        &self,
        grads: &mut [Option<Tensor>],
        gamma: NodeId,
        beta: NodeId,
        sum_gx: &[f64],
        sum_g: &[f64],
    ) {
        if self.wants_grad(gamma) {
            let dg = Tensor::from_vec(&[sum_gx.len()], sum_gx.to_vec()).expect("len matches");
            self.add_grad(grads, gamma, dg);
        }
        if self.wants_grad(beta) {
            let db = Tensor::from_vec(&[sum_g.len()], sum_g.to_vec()).expect("len matches");
            self.add_grad(grads, beta, db);
        }
    }
}

/// dx for training-mode batch norm with batch statistics:
/// dx = γ/σ · (g − mean(g) − x̂ · mean(g·x̂)).
#[inline]
fn dx_bn(dst: &mut f64, g: f64, xhat: f64, mean_g: f64, mean_gx: f64, gamma: f64, inv_std: f64) {
    *dst = gamma * inv_std * (g - mean_g - xhat * mean_gx);
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}
