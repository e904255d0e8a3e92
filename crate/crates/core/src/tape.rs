//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward computation as an
//! append-only list of nodes; inputs always reference earlier indices, so a
//! single reverse sweep visits each node exactly once and accumulates
//! vector-Jacobian products back to the differentiable leaves. Tapes are
//! built fresh for every training step and confined to one thread.
//!
//! Stochastic inputs (dropout noise, cutout hole centers) are sampled at
//! record time and stored as constant nodes, so a backward pass and any
//! finite-difference replay of the same builder see the same realization.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Tensor};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `mul * x + add` with compile-time constants. The offset is baked
    /// into the forward value and does not enter the backward rule; it is
    /// kept on the node for debugging.
    AffineConst {
        x: NodeId,
        mul: f64,
        #[allow(dead_code)]
        add: f64,
    },
    /// Broadcast a scalar node over a tensor: `x + s`.
    AddScalar { x: NodeId, s: NodeId },
    /// Broadcast a scalar node over a tensor: `x * s`.
    MulScalar { x: NodeId, s: NodeId },
    Recip(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    /// 2-D transpose.
    Transpose(NodeId),
    Matmul(NodeId, NodeId),
    /// Scale slab `i` of `x` (its leading axis) by `gate[i]`.
    ScaleRows { gate: NodeId, x: NodeId },
    /// `x[r,c] + v[c]` for every row.
    AddRowVector { x: NodeId, v: NodeId },
    /// `x[n,c,h,w] + b[c]` per channel.
    AddChannelBias { x: NodeId, b: NodeId },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeom,
    },
    /// 2x2 max pooling, stride 2. `switches` holds the flat input index that
    /// won each output cell.
    MaxPool2 { x: NodeId, switches: Vec<u32> },
    Reshape(NodeId),
    /// Scalar pick `x[idx]` from a vector node.
    Index { x: NodeId, idx: usize },
    /// Total sum to a scalar.
    Sum(NodeId),
    /// Fused mean softmax cross-entropy over rows of `logits`; saves the
    /// softmax for the backward rule.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Box<Tensor>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one scalar loss with respect to every leaf on the tape.
///
/// Leaves with no path to the loss carry zero gradients of matching shape.
#[derive(Debug)]
pub struct Gradients {
    by_leaf: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.by_leaf.iter().find(|(id, _)| *id == leaf).map(|(_, g)| g)
    }

    /// Gradient for a leaf that is known to exist on the tape.
    pub fn expect(&self, leaf: NodeId) -> &Tensor {
        self.get(leaf).expect("node is not a registered leaf")
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_leaf.iter().map(|(id, g)| (*id, g))
    }
}

/// Append-only record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
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

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        id
    }

    /// Register a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.leaves.push(id);
        id
    }

    /// Register a non-differentiable input (data, sampled noise, frozen
    /// parameters).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::DimensionMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn expect_scalar(&self, op: &'static str, s: NodeId) -> Result<()> {
        if !self.value(s).is_scalar() {
            return Err(Error::contract(format!(
                "{op} wants a scalar node, got shape {:?}",
                self.value(s).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let value = self.value(x).map(|v| mul * v + add);
        self.push(Op::AffineConst { x, mul, add }, value)
    }

    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.expect_scalar("add_scalar", s)?;
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v + sv);
        Ok(self.push(Op::AddScalar { x, s }, value))
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.expect_scalar("mul_scalar", s)?;
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        Ok(self.push(Op::MulScalar { x, s }, value))
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().contains(&0.0) {
            return Err(Error::contract("recip of zero"));
        }
        let value = self.value(x).map(|v| 1.0 / v);
        Ok(self.push(Op::Recip(x), value))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("log of non-positive value"));
        }
        let value = self.value(x).map(f64::ln);
        Ok(self.push(Op::Log(x), value))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), value)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::abs);
        self.push(Op::Abs(x), value)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        if shape.len() != 2 {
            return Err(Error::contract(format!(
                "transpose wants a matrix, got shape {shape:?}"
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        let data = tensor::transpose(self.value(x).data(), r, c);
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.push(Op::Transpose(x), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * p];
        tensor::mm_accum(self.value(a).data(), self.value(b).data(), m, k, p, &mut out);
        let value = Tensor::new(vec![m, p], out)?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    /// Scale slab `i` along the leading axis of `x` by `gate[i]`.
    pub fn scale_rows(&mut self, gate: NodeId, x: NodeId) -> Result<NodeId> {
        let (sg, sx) = (self.value(gate).shape(), self.value(x).shape());
        if sg.len() != 1 || sx.is_empty() || sg[0] != sx[0] {
            return Err(Error::DimensionMismatch {
                op: "scale_rows",
                lhs: sg.to_vec(),
                rhs: sx.to_vec(),
            });
        }
        let slab = self.value(x).numel() / sx[0];
        let gd = self.value(gate).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for i in 0..sx[0] {
            let g = gd[i];
            for j in 0..slab {
                out[i * slab + j] = g * xd[i * slab + j];
            }
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(Op::ScaleRows { gate, x }, value))
    }

    pub fn add_row_vector(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (sx, sv) = (self.value(x).shape(), self.value(v).shape());
        if sx.len() != 2 || sv.len() != 1 || sx[1] != sv[0] {
            return Err(Error::DimensionMismatch {
                op: "add_row_vector",
                lhs: sx.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let (r, c) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + vd[j];
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(Op::AddRowVector { x, v }, value))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::DimensionMismatch {
                op: "add_channel_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let xd = self.value(x).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let bias = bd[ci];
                for k in 0..hw {
                    out[base + k] = xd[base + k] + bias;
                }
            }
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(Op::AddChannelBias { x, b }, value))
    }

    /// Cross-correlation of `input[n,c,h,w]` with `kernel[f,c,kh,kw]` under
    /// zero padding.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let geom = ConvGeom::resolve(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            pad,
        )?;
        let cols = tensor::im2col(self.value(input).data(), &geom);
        let rows = geom.out_rows();
        let plen = geom.patch_len();
        // out_mat[rows, f] = cols · kernelᵀ (kernel rows are already packed
        // patches).
        let mut out_mat = vec![0.0; rows * geom.f];
        tensor::mm_abt_accum(
            &cols,
            self.value(kernel).data(),
            rows,
            plen,
            geom.f,
            &mut out_mat,
        );
        // Reorder [n·oh·ow, f] -> [n, f, oh, ow].
        let spatial = geom.oh * geom.ow;
        let mut out = vec![0.0; geom.n * geom.f * spatial];
        for ni in 0..geom.n {
            for s in 0..spatial {
                let row = (ni * spatial + s) * geom.f;
                for fi in 0..geom.f {
                    out[(ni * geom.f + fi) * spatial + s] = out_mat[row + fi];
                }
            }
        }
        let value = Tensor::new(vec![geom.n, geom.f, geom.oh, geom.ow], out)?;
        Ok(self.push(Op::Conv2d { input, kernel, geom }, value))
    }

    /// 2x2 max pooling with stride 2. Extents must be even.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape();
        if sx.len() != 4 || !sx[2].is_multiple_of(2) || !sx[3].is_multiple_of(2) {
            return Err(Error::contract(format!(
                "max_pool2 wants [n,c,even,even], got {sx:?}"
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut switches = vec![0u32; out.len()];
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best_idx = in_base + (2 * i) * w + 2 * j;
                    let mut best = xd[best_idx];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = in_base + (2 * i + di) * w + (2 * j + dj);
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    out[out_base + i * ow + j] = best;
                    switches[out_base + i * ow + j] = best_idx as u32;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2 { x, switches }, value))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Pick element `idx` of a vector node as a scalar.
    pub fn index(&mut self, x: NodeId, idx: usize) -> Result<NodeId> {
        let sx = self.value(x).shape();
        if sx.len() != 1 || idx >= sx[0] {
            return Err(Error::contract(format!(
                "index {idx} out of bounds for shape {sx:?}"
            )));
        }
        let value = Tensor::scalar(self.value(x).data()[idx]);
        Ok(self.push(Op::Index { x, idx }, value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(total))
    }

    /// Mean negative log-likelihood of `labels` under a row-wise softmax of
    /// `logits[b,k]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sl = self.value(logits).shape();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::DimensionMismatch {
                op: "softmax_cross_entropy",
                lhs: sl.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (b, k) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::data(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &ld[r * k..(r + 1) * k];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - maxv).exp();
                probs[r * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[r * k + j] /= z;
            }
            loss -= (probs[r * k + labels[r]]).max(f64::MIN_POSITIVE).ln();
        }
        loss /= b as f64;
        let probs = Tensor::new(vec![b, k], probs)?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: Box::new(probs),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Reverse sweep from a scalar `loss` node; returns one gradient per
    /// registered leaf (zeros for leaves the loss does not depend on).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(Error::contract("loss node is not on this tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_op(id, &g, &mut grads);
            // Leaves keep their accumulated gradient.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let by_leaf = self
            .leaves
            .iter()
            .map(|&leaf| {
                let g = if leaf <= loss {
                    grads[leaf].take()
                } else {
                    None
                };
                (
                    leaf,
                    g.unwrap_or_else(|| Tensor::zeros(self.value(leaf).shape())),
                )
            })
            .collect();
        Ok(Gradients { by_leaf })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
        match &mut grads[id] {
            Some(existing) => existing.scaled_add_assign(1.0, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backward_op(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = zip_mul(g, self.value(*b));
                let db = zip_mul(g, self.value(*a));
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::AffineConst { x, mul, .. } => {
                self.accum(grads, *x, g.map(|v| mul * v));
            }
            Op::AddScalar { x, s } => {
                self.accum(grads, *x, g.clone());
                let total: f64 = g.data().iter().sum();
                self.accum(grads, *s, Tensor::scalar(total));
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).item();
                self.accum(grads, *x, g.map(|v| sv * v));
                let ds = g.dot_flat(self.value(*x));
                self.accum(grads, *s, Tensor::scalar(ds));
            }
            Op::Recip(x) => {
                let out = self.value(id);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, ov)| -gv * ov * ov)
                        .collect(),
                )
                .expect("shape preserved");
                self.accum(grads, *x, dx);
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, v)| gv / v)
                        .collect(),
                )
                .expect("shape preserved");
                self.accum(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let out = self.value(id);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, ov)| gv * ov * (1.0 - ov))
                        .collect(),
                )
                .expect("shape preserved");
                self.accum(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )
                .expect("shape preserved");
                self.accum(grads, *x, dx);
            }
            Op::Abs(x) => {
                // Subgradient 0 at the kink.
                let xv = self.value(*x);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, v)| {
                            if *v > 0.0 {
                                *gv
                            } else if *v < 0.0 {
                                -*gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
                .expect("shape preserved");
                self.accum(grads, *x, dx);
            }
            Op::Transpose(x) => {
                let sg = g.shape();
                let data = tensor::transpose(g.data(), sg[0], sg[1]);
                let dx = Tensor::new(vec![sg[1], sg[0]], data).expect("transpose shape");
                self.accum(grads, *x, dx);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, p) = (sa[0], sa[1], sb[1]);
                // dA = g · Bᵀ
                let mut da = vec![0.0; m * k];
                tensor::mm_abt_accum(g.data(), self.value(*b).data(), m, p, k, &mut da);
                // dB = Aᵀ · g
                let mut db = vec![0.0; k * p];
                tensor::mm_atb_accum(self.value(*a).data(), g.data(), m, k, p, &mut db);
                self.accum(grads, *a, Tensor::new(vec![m, k], da).expect("shape"));
                self.accum(grads, *b, Tensor::new(vec![k, p], db).expect("shape"));
            }
            Op::ScaleRows { gate, x } => {
                let gates = self.value(*gate);
                let xv = self.value(*x);
                let d0 = gates.numel();
                let slab = xv.numel() / d0;
                let mut dgate = vec![0.0; d0];
                let mut dx = vec![0.0; xv.numel()];
                for i in 0..d0 {
                    let gd = &g.data()[i * slab..(i + 1) * slab];
                    let xd = &xv.data()[i * slab..(i + 1) * slab];
                    dgate[i] = tensor::dot(gd, xd);
                    let gv = gates.data()[i];
                    for j in 0..slab {
                        dx[i * slab + j] = gv * gd[j];
                    }
                }
                self.accum(grads, *gate, Tensor::new(vec![d0], dgate).expect("shape"));
                self.accum(grads, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
            }
            Op::AddRowVector { x, v } => {
                self.accum(grads, *x, g.clone());
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dv[j] += g.data()[i * c + j];
                    }
                }
                self.accum(grads, *v, Tensor::new(vec![c], dv).expect("shape"));
            }
            Op::AddChannelBias { x, b } => {
                self.accum(grads, *x, g.clone());
                let sg = g.shape();
                let (n, c, hw) = (sg[0], sg[1], sg[2] * sg[3]);
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let mut acc = 0.0;
                        for k in 0..hw {
                            acc += g.data()[base + k];
                        }
                        db[ci] += acc;
                    }
                }
                self.accum(grads, *b, Tensor::new(vec![c], db).expect("shape"));
            }
            Op::Conv2d { input, kernel, geom } => {
                let spatial = geom.oh * geom.ow;
                let rows = geom.out_rows();
                let plen = geom.patch_len();
                // Reorder g [n,f,oh,ow] -> g_mat [n·oh·ow, f].
                let mut g_mat = vec![0.0; rows * geom.f];
                for ni in 0..geom.n {
                    for fi in 0..geom.f {
                        let base = (ni * geom.f + fi) * spatial;
                        for s in 0..spatial {
                            g_mat[(ni * spatial + s) * geom.f + fi] = g.data()[base + s];
                        }
                    }
                }
                let cols = tensor::im2col(self.value(*input).data(), geom);
                // dK = g_matᵀ · cols, laid out directly as [f, c·kh·kw].
                let mut dk = vec![0.0; geom.f * plen];
                tensor::mm_atb_accum(&g_mat, &cols, rows, geom.f, plen, &mut dk);
                // d_cols = g_mat · kmat, then scatter back to input geometry.
                let mut d_cols = vec![0.0; rows * plen];
                tensor::mm_accum(
                    &g_mat,
                    self.value(*kernel).data(),
                    rows,
                    geom.f,
                    plen,
                    &mut d_cols,
                );
                let mut dx = vec![0.0; self.value(*input).numel()];
                tensor::col2im_accum(&d_cols, geom, &mut dx);
                self.accum(
                    grads,
                    *kernel,
                    Tensor::new(self.value(*kernel).shape().to_vec(), dk).expect("shape"),
                );
                self.accum(
                    grads,
                    *input,
                    Tensor::new(self.value(*input).shape().to_vec(), dx).expect("shape"),
                );
            }
            Op::MaxPool2 { x, switches } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (out_idx, &src) in switches.iter().enumerate() {
                    dx[src as usize] += g.data()[out_idx];
                }
                self.accum(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).expect("shape"),
                );
            }
            Op::Reshape(x) => {
                let dx = g
                    .reshaped(self.value(*x).shape().to_vec())
                    .expect("reshape adjoint");
                self.accum(grads, *x, dx);
            }
            Op::Index { x, idx } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                dx.data_mut()[*idx] = g.item();
                self.accum(grads, *x, dx);
            }
            Op::Sum(x) => {
                let dx = Tensor::full(self.value(*x).shape(), g.item());
                self.accum(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let seed = g.item();
                let (b, k) = (probs.shape()[0], probs.shape()[1]);
                let scale = seed / b as f64;
                let mut dl = probs.map(|p| p * scale);
                for (r, &label) in labels.iter().enumerate() {
                    dl.data_mut()[r * k + label] -= scale;
                }
                self.accum(grads, *logits, dl);
            }
        }
    }
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x * y)
            .collect(),
    )
    .expect("shape preserved")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-odds; inverse of [`sigmoid`] on (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_is_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let prod = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(prod), tape.value(b));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn all_ones_conv_sums_windows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.expect(x).data(), &[2.0, 4.0, 6.0]);
    }
}
