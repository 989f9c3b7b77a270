//! Reverse-mode automatic differentiation over a fixed op set.
//!
//! A `Graph` is a tape of nodes owned by exactly one training or inference
//! step. Parameters enter as named leaves; after `backward`, their gradients
//! are accumulated back into a [`ParamStore`](crate::params::ParamStore) with
//! [`Graph::accumulate_grads`]. Backward over the same tape is deterministic:
//! nodes are visited in reverse insertion order and sums run in fixed order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: Option<String> },
    Constant,
    Add { a: NodeId, b: NodeId },
    AddN { terms: Vec<NodeId> },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    Relu { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Reparam { mu: NodeId, logvar: NodeId },
    GaussianKl { mu: NodeId, logvar: NodeId },
    ReconGaussian { xhat: NodeId },
    ReconBernoulli { logits: NodeId },
    SumAll { x: NodeId },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize, len: usize },
    ConcatRows { parts: Vec<NodeId> },
    ChannelShuffle { x: NodeId, groups: usize },
    BroadcastRows { x: NodeId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Tensor,
    // op-specific saved forward context (layer norm stats, reparam noise,
    // reconstruction targets)
    aux: Vec<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Vec<Tensor>) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node {
            op,
            value,
            grad,
            aux,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].grad
    }

    /// Insert a trainable leaf. `name` keys gradient accumulation.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                name: Some(name.into()),
            },
            value,
            vec![],
        )
    }

    /// Insert an unnamed differentiable input (gradients readable via `grad`).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { name: None }, value, vec![])
    }

    /// Insert a constant; gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, vec![])
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let mut v = self.nodes[a].value.clone();
        v.add_scaled(&self.nodes[b].value, 1.0);
        Ok(self.push(Op::Add { a, b }, v, vec![]))
    }

    /// Fixed-order sum of same-shaped tensors.
    pub fn add_n(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        assert!(!terms.is_empty());
        for &t in &terms[1..] {
            self.check_same_shape("add_n", terms[0], t)?;
        }
        let mut v = self.nodes[terms[0]].value.clone();
        for &t in &terms[1..] {
            v.add_scaled(&self.nodes[t].value, 1.0);
        }
        Ok(self.push(
            Op::AddN {
                terms: terms.to_vec(),
            },
            v,
            vec![],
        ))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x].value.map(|t| t * c);
        self.push(Op::Scale { x, c }, v, vec![])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x].value.map(|t| t + c);
        self.push(Op::AddScalar { x }, v, vec![])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        Ok(self.push(Op::Mul { a, b }, v, vec![]))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("div", a, b)?;
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(x, y)| x / y)
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        Ok(self.push(Op::Div { a, b }, v, vec![]))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(f64::exp);
        self.push(Op::Exp { x }, v, vec![])
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(f64::ln);
        self.push(Op::Ln { x }, v, vec![])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|t| t.max(0.0));
        self.push(Op::Relu { x }, v, vec![])
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[x].value.map(|t| t.clamp(lo, hi));
        self.push(Op::Clamp { x, lo, hi }, v, vec![])
    }

    /// y = x W + b with b broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        if vx.cols() != vw.rows() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        if vw.cols() != vb.len() {
            return Err(Error::ShapeMismatch {
                op: "linear(bias)",
                lhs: vw.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut v = vx.matmul(vw)?;
        let out = v.cols();
        for i in 0..v.rows() {
            for j in 0..out {
                let t = v.at(i, j) + vb.data()[j];
                v.set(i, j, t);
            }
        }
        Ok(self.push(Op::Linear { x, w, b }, v, vec![]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        Ok(self.push(Op::MatMul { a, b }, v, vec![]))
    }

    /// Row-wise layer normalization with affine gamma/beta.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        let c = vx.cols();
        if self.nodes[gamma].value.len() != c || self.nodes[beta].value.len() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: self.nodes[gamma].value.shape().to_vec(),
            });
        }
        let n = vx.rows();
        let mut xhat = Tensor::zeros(&[n, c]);
        let mut inv_std = Tensor::zeros(&[n]);
        let mut out = Tensor::zeros(&[n, c]);
        let g = self.nodes[gamma].value.data().to_vec();
        let bt = self.nodes[beta].value.data().to_vec();
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.data_mut()[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat.set(i, j, xh);
                out.set(i, j, g[j] * xh + bt[j]);
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, out, vec![xhat, inv_std]))
    }

    /// z = mu + exp(0.5 * logvar) ⊙ noise; differentiable through mu, logvar.
    pub fn reparameterize(&mut self, mu: NodeId, logvar: NodeId, noise: Tensor) -> Result<NodeId> {
        self.check_same_shape("reparameterize", mu, logvar)?;
        let vmu = &self.nodes[mu].value;
        if !vmu.same_shape(&noise) {
            return Err(Error::ShapeMismatch {
                op: "reparameterize",
                lhs: vmu.shape().to_vec(),
                rhs: noise.shape().to_vec(),
            });
        }
        let vlv = &self.nodes[logvar].value;
        let data: Vec<f64> = vmu
            .data()
            .iter()
            .zip(vlv.data().iter())
            .zip(noise.data().iter())
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let v = Tensor::new(vmu.shape().to_vec(), data).expect("same shape");
        Ok(self.push(Op::Reparam { mu, logvar }, v, vec![noise]))
    }

    /// KL(N(mu, exp(logvar)) || N(0, 1)) summed over all elements.
    pub fn gaussian_kl(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        self.check_same_shape("gaussian_kl", mu, logvar)?;
        let vmu = &self.nodes[mu].value;
        let vlv = &self.nodes[logvar].value;
        let kl: f64 = vmu
            .data()
            .iter()
            .zip(vlv.data().iter())
            .map(|(m, lv)| -0.5 * (1.0 + lv - m * m - lv.exp()))
            .sum();
        Ok(self.push(Op::GaussianKl { mu, logvar }, Tensor::scalar(kl), vec![]))
    }

    /// Gaussian unit-variance NLL with constants dropped: 0.5 * ||xhat - x||².
    pub fn recon_gaussian(&mut self, xhat: NodeId, target: &Tensor) -> Result<NodeId> {
        let v = &self.nodes[xhat].value;
        if !v.same_shape(target) {
            return Err(Error::ShapeMismatch {
                op: "recon_gaussian",
                lhs: v.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let loss = 0.5 * v.squared_distance(target);
        Ok(self.push(
            Op::ReconGaussian { xhat },
            Tensor::scalar(loss),
            vec![target.clone()],
        ))
    }

    /// Bernoulli NLL of logits against targets in [0, 1], summed.
    pub fn recon_bernoulli(&mut self, logits: NodeId, target: &Tensor) -> Result<NodeId> {
        let v = &self.nodes[logits].value;
        if !v.same_shape(target) {
            return Err(Error::ShapeMismatch {
                op: "recon_bernoulli",
                lhs: v.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if target.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::Domain(
                "bernoulli reconstruction targets must lie in [0, 1]".into(),
            ));
        }
        // softplus(l) - x * l, stable for large |l|
        let loss: f64 = v
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(&l, &x)| {
                let sp = if l > 0.0 {
                    l + (-l).exp().ln_1p()
                } else {
                    l.exp().ln_1p()
                };
                sp - x * l
            })
            .sum();
        Ok(self.push(
            Op::ReconBernoulli { logits },
            Tensor::scalar(loss),
            vec![target.clone()],
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        self.push(Op::SumAll { x }, Tensor::scalar(s), vec![])
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = &self.nodes[x].value;
        let (n, c) = (v.rows(), v.cols());
        assert!(start + len <= c, "column slice out of range");
        let mut out = Tensor::zeros(&[n, len]);
        for i in 0..n {
            for j in 0..len {
                out.set(i, j, v.at(i, start + j));
            }
        }
        self.push(Op::SliceCols { x, start, len }, out, vec![])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0]].value.rows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut out = Tensor::zeros(&[n, total]);
        let mut off = 0;
        for &p in parts {
            let v = &self.nodes[p].value;
            assert_eq!(v.rows(), n, "row count mismatch in concat_cols");
            for i in 0..n {
                for j in 0..v.cols() {
                    out.set(i, off + j, v.at(i, j));
                }
            }
            off += v.cols();
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
            vec![],
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = &self.nodes[x].value;
        let c = v.cols();
        assert!(start + len <= v.rows(), "row slice out of range");
        let mut out = Tensor::zeros(&[len, c]);
        for i in 0..len {
            for j in 0..c {
                out.set(i, j, v.at(start + i, j));
            }
        }
        self.push(Op::SliceRows { x, start, len }, out, vec![])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.nodes[parts[0]].value.cols();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.rows()).sum();
        let mut out = Tensor::zeros(&[total, c]);
        let mut off = 0;
        for &p in parts {
            let v = &self.nodes[p].value;
            assert_eq!(v.cols(), c, "column count mismatch in concat_rows");
            for i in 0..v.rows() {
                for j in 0..c {
                    out.set(off + i, j, v.at(i, j));
                }
            }
            off += v.rows();
        }
        self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            out,
            vec![],
        )
    }

    /// Per row: reshape channels to (groups, d/groups), transpose, flatten.
    pub fn channel_shuffle(&mut self, x: NodeId, groups: usize) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let d = v.cols();
        if groups == 0 || d % groups != 0 {
            return Err(Error::Config(format!(
                "channel_shuffle: groups {groups} must divide channel count {d}"
            )));
        }
        let per = d / groups;
        let n = v.rows();
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for k in 0..groups {
                for c in 0..per {
                    out.set(i, c * groups + k, v.at(i, k * per + c));
                }
            }
        }
        Ok(self.push(Op::ChannelShuffle { x, groups }, out, vec![]))
    }

    /// Repeat a (1, c) row n times; backward sums row gradients.
    pub fn broadcast_rows(&mut self, x: NodeId, n: usize) -> NodeId {
        let v = &self.nodes[x].value;
        assert_eq!(v.rows(), 1, "broadcast_rows expects a single row");
        let c = v.cols();
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            for j in 0..c {
                out.set(i, j, v.at(0, j));
            }
        }
        self.push(Op::BroadcastRows { x }, out, vec![])
    }

    /// Reverse sweep from a scalar loss node. Gradients of leaves and inputs
    /// are then readable via `grad` / `accumulate_grads`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let v = &self.nodes[loss].value;
        if !v.is_scalar() {
            return Err(Error::Precondition(
                "backward requires a scalar loss node".into(),
            ));
        }
        if !v.scalar_value().is_finite() {
            return Err(Error::NonFinite("backward(loss)"));
        }
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.nodes[loss].grad.data_mut()[0] = 1.0;
        for id in (0..=loss).rev() {
            self.backprop_node(id);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: NodeId) {
        let op = self.nodes[id].op.clone();
        let dy = self.nodes[id].grad.clone();
        if dy.data().iter().all(|&g| g == 0.0) {
            return;
        }
        match op {
            Op::Leaf { .. } | Op::Constant => {}
            Op::Add { a, b } => {
                self.nodes[a].grad.add_scaled(&dy, 1.0);
                self.nodes[b].grad.add_scaled(&dy, 1.0);
            }
            Op::AddN { terms } => {
                for t in terms {
                    self.nodes[t].grad.add_scaled(&dy, 1.0);
                }
            }
            Op::Scale { x, c } => self.nodes[x].grad.add_scaled(&dy, c),
            Op::AddScalar { x } => self.nodes[x].grad.add_scaled(&dy, 1.0),
            Op::Mul { a, b } => {
                let va = self.nodes[a].value.clone();
                let vb = self.nodes[b].value.clone();
                for i in 0..dy.len() {
                    self.nodes[a].grad.data_mut()[i] += dy.data()[i] * vb.data()[i];
                }
                for i in 0..dy.len() {
                    self.nodes[b].grad.data_mut()[i] += dy.data()[i] * va.data()[i];
                }
            }
            Op::Div { a, b } => {
                let va = self.nodes[a].value.clone();
                let vb = self.nodes[b].value.clone();
                for i in 0..dy.len() {
                    self.nodes[a].grad.data_mut()[i] += dy.data()[i] / vb.data()[i];
                }
                for i in 0..dy.len() {
                    self.nodes[b].grad.data_mut()[i] -=
                        dy.data()[i] * va.data()[i] / (vb.data()[i] * vb.data()[i]);
                }
            }
            Op::Exp { x } => {
                let vy = self.nodes[id].value.clone();
                for i in 0..dy.len() {
                    self.nodes[x].grad.data_mut()[i] += dy.data()[i] * vy.data()[i];
                }
            }
            Op::Ln { x } => {
                let vx = self.nodes[x].value.clone();
                for i in 0..dy.len() {
                    self.nodes[x].grad.data_mut()[i] += dy.data()[i] / vx.data()[i];
                }
            }
            Op::Relu { x } => {
                let vx = self.nodes[x].value.clone();
                for i in 0..dy.len() {
                    if vx.data()[i] > 0.0 {
                        self.nodes[x].grad.data_mut()[i] += dy.data()[i];
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.nodes[x].value.clone();
                for i in 0..dy.len() {
                    let v = vx.data()[i];
                    if v > lo && v < hi {
                        self.nodes[x].grad.data_mut()[i] += dy.data()[i];
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let vx = self.nodes[x].value.clone();
                let vw = self.nodes[w].value.clone();
                let (n, k, m) = (vx.rows(), vx.cols(), vw.cols());
                // dx = dy W^T
                for i in 0..n {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += dy.at(i, j) * vw.at(p, j);
                        }
                        self.nodes[x].grad.data_mut()[i * k + p] += acc;
                    }
                }
                // dW = x^T dy
                for p in 0..k {
                    for j in 0..m {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += vx.at(i, p) * dy.at(i, j);
                        }
                        self.nodes[w].grad.data_mut()[p * m + j] += acc;
                    }
                }
                // db = column sums of dy
                for j in 0..m {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += dy.at(i, j);
                    }
                    self.nodes[b].grad.data_mut()[j] += acc;
                }
            }
            Op::MatMul { a, b } => {
                let va = self.nodes[a].value.clone();
                let vb = self.nodes[b].value.clone();
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                for i in 0..n {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += dy.at(i, j) * vb.at(p, j);
                        }
                        self.nodes[a].grad.data_mut()[i * k + p] += acc;
                    }
                }
                for p in 0..k {
                    for j in 0..m {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += va.at(i, p) * dy.at(i, j);
                        }
                        self.nodes[b].grad.data_mut()[p * m + j] += acc;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xhat = self.nodes[id].aux[0].clone();
                let inv_std = self.nodes[id].aux[1].clone();
                let g = self.nodes[gamma].value.clone();
                let (n, c) = (xhat.rows(), xhat.cols());
                for j in 0..c {
                    let mut dg = 0.0;
                    let mut db = 0.0;
                    for i in 0..n {
                        dg += dy.at(i, j) * xhat.at(i, j);
                        db += dy.at(i, j);
                    }
                    self.nodes[gamma].grad.data_mut()[j] += dg;
                    self.nodes[beta].grad.data_mut()[j] += db;
                }
                for i in 0..n {
                    let is = inv_std.data()[i];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let dxh = dy.at(i, j) * g.data()[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat.at(i, j);
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for j in 0..c {
                        let dxh = dy.at(i, j) * g.data()[j];
                        let dx = is * (dxh - mean_dxhat - xhat.at(i, j) * mean_dxhat_xhat);
                        self.nodes[x].grad.data_mut()[i * c + j] += dx;
                    }
                }
            }
            Op::Reparam { mu, logvar } => {
                let noise = self.nodes[id].aux[0].clone();
                let vlv = self.nodes[logvar].value.clone();
                for i in 0..dy.len() {
                    self.nodes[mu].grad.data_mut()[i] += dy.data()[i];
                }
                for i in 0..dy.len() {
                    let sigma = (0.5 * vlv.data()[i]).exp();
                    self.nodes[logvar].grad.data_mut()[i] +=
                        dy.data()[i] * 0.5 * sigma * noise.data()[i];
                }
            }
            Op::GaussianKl { mu, logvar } => {
                let d = dy.scalar_value();
                let vmu = self.nodes[mu].value.clone();
                let vlv = self.nodes[logvar].value.clone();
                for i in 0..vmu.len() {
                    self.nodes[mu].grad.data_mut()[i] += d * vmu.data()[i];
                }
                for i in 0..vlv.len() {
                    self.nodes[logvar].grad.data_mut()[i] += d * 0.5 * (vlv.data()[i].exp() - 1.0);
                }
            }
            Op::ReconGaussian { xhat } => {
                let d = dy.scalar_value();
                let target = self.nodes[id].aux[0].clone();
                let v = self.nodes[xhat].value.clone();
                for i in 0..v.len() {
                    self.nodes[xhat].grad.data_mut()[i] += d * (v.data()[i] - target.data()[i]);
                }
            }
            Op::ReconBernoulli { logits } => {
                let d = dy.scalar_value();
                let target = self.nodes[id].aux[0].clone();
                let v = self.nodes[logits].value.clone();
                for i in 0..v.len() {
                    let sig = 1.0 / (1.0 + (-v.data()[i]).exp());
                    self.nodes[logits].grad.data_mut()[i] += d * (sig - target.data()[i]);
                }
            }
            Op::SumAll { x } => {
                let d = dy.scalar_value();
                for g in self.nodes[x].grad.data_mut() {
                    *g += d;
                }
            }
            Op::SliceCols { x, start, len } => {
                let c = self.nodes[x].value.cols();
                let n = self.nodes[x].value.rows();
                for i in 0..n {
                    for j in 0..len {
                        self.nodes[x].grad.data_mut()[i * c + start + j] += dy.at(i, j);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let n = dy.rows();
                let mut off = 0;
                for p in parts {
                    let c = self.nodes[p].value.cols();
                    for i in 0..n {
                        for j in 0..c {
                            self.nodes[p].grad.data_mut()[i * c + j] += dy.at(i, off + j);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start, len } => {
                let c = self.nodes[x].value.cols();
                for i in 0..len {
                    for j in 0..c {
                        self.nodes[x].grad.data_mut()[(start + i) * c + j] += dy.at(i, j);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let c = dy.cols();
                let mut off = 0;
                for p in parts {
                    let r = self.nodes[p].value.rows();
                    for i in 0..r {
                        for j in 0..c {
                            self.nodes[p].grad.data_mut()[i * c + j] += dy.at(off + i, j);
                        }
                    }
                    off += r;
                }
            }
            Op::ChannelShuffle { x, groups } => {
                let d = dy.cols();
                let per = d / groups;
                let n = dy.rows();
                for i in 0..n {
                    for k in 0..groups {
                        for c in 0..per {
                            self.nodes[x].grad.data_mut()[i * d + k * per + c] +=
                                dy.at(i, c * groups + k);
                        }
                    }
                }
            }
            Op::BroadcastRows { x } => {
                let c = dy.cols();
                for j in 0..c {
                    let mut acc = 0.0;
                    for i in 0..dy.rows() {
                        acc += dy.at(i, j);
                    }
                    self.nodes[x].grad.data_mut()[j] += acc;
                }
            }
        }
    }

    /// Add each named leaf's gradient into the matching store entry.
    pub fn accumulate_grads(&self, store: &mut crate::params::ParamStore) {
        for node in &self.nodes {
            if let Op::Leaf { name: Some(name) } = &node.op {
                store.accumulate_grad(name, &node.grad);
            }
        }
    }

    /// Collect gradients of all named leaves into a map (test support).
    pub fn named_grads(&self) -> std::collections::BTreeMap<String, Tensor> {
        let mut out = std::collections::BTreeMap::new();
        for node in &self.nodes {
            if let Op::Leaf { name: Some(name) } = &node.op {
                out.entry(name.clone())
                    .and_modify(|g: &mut Tensor| g.add_scaled(&node.grad, 1.0))
                    .or_insert_with(|| node.grad.clone());
            }
        }
        out
    }
}
