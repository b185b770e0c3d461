//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A `Tape` records one forward pass as an append-only arena of nodes; the
//! append order is a topological order, so the backward pass is a single
//! reverse sweep that visits each node exactly once. Forward values are
//! computed eagerly through the pure kernels in [`crate::tensor`], so every
//! recorded value has already passed the all-finite check.
//!
//! Tapes are single-threaded per forward pass; independent passes may run in
//! parallel on their own tapes.
//!
//! The tape also keeps a running multiply-accumulate count for the matrix
//! products it records (m·k·n per product, forward only), which the
//! complexity probe reads.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, BoolMask, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: VarId, b: VarId },
    MatmulNt { a: VarId, b: VarId },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    AddBias { a: VarId, bias: VarId },
    Scale { a: VarId, c: T },
    SoftmaxRows { x: VarId },
    MaskedFill { x: VarId, mask: BoolMask },
    Concat { parts: Vec<VarId>, axis: usize },
    GatherRows { x: VarId, indices: Vec<usize> },
    MaxRows { x: VarId, argmax: Vec<usize> },
    GroupMaxRows { x: VarId, argmax: Vec<usize> },
    Gelu { x: VarId },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, eps: T },
    CrossEntropy { logits: VarId, targets: Vec<usize>, probs: Tensor<T> },
    Sum { x: VarId },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients for every tape variable reached by the backward sweep.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), macs: 0 }
    }

    /// Multiply-accumulate count of all matrix products recorded so far,
    /// plus any externally accounted work.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Account multiply-accumulates performed outside the tape (geometry
    /// kernels such as distance scans feeding a recorded op).
    pub fn count_external_macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Differentiable input (parameters, anything gradients are wanted for).
    pub fn leaf(&mut self, t: Tensor<T>) -> VarId {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input (data, masks rendered as values, constants).
    pub fn constant(&mut self, t: Tensor<T>) -> VarId {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        let n = self.value(b).shape()[1];
        self.macs += (m * k * n) as u64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Matmul { a, b }, ng))
    }

    /// a @ b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        let n = self.value(b).shape()[0];
        self.macs += (m * k * n) as u64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatmulNt { a, b }, ng))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = tensor::sub(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul { a, b }, ng))
    }

    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let v = tensor::add_bias(self.value(a), self.value(bias))?;
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(v, Op::AddBias { a, bias }, ng))
    }

    pub fn scale(&mut self, a: VarId, c: T) -> Result<VarId> {
        let v = tensor::scale(self.value(a), c)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Scale { a, c }, ng))
    }

    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let v = tensor::softmax_rows(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::SoftmaxRows { x }, ng))
    }

    pub fn masked_fill(&mut self, x: VarId, mask: &BoolMask, value: T) -> Result<VarId> {
        let v = tensor::masked_fill(self.value(x), mask, value)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::MaskedFill { x, mask: mask.clone() }, ng))
    }

    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat(&tensors, axis)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    /// Gather axis-0 slices; also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: VarId, indices: &[usize]) -> Result<VarId> {
        let v = tensor::gather_rows(self.value(x), indices)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::GatherRows { x, indices: indices.to_vec() }, ng))
    }

    /// Column-wise max over rows; gradient routes to the lowest argmax row.
    pub fn max_rows(&mut self, x: VarId) -> Result<VarId> {
        let (v, argmax) = tensor::max_rows(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::MaxRows { x, argmax }, ng))
    }

    /// Column max within consecutive row blocks of `group_size`; the pooling
    /// stage of set abstraction. Gradient routes to the argmax row per block.
    pub fn group_max_rows(&mut self, x: VarId, group_size: usize) -> Result<VarId> {
        let (v, argmax) = tensor::group_max_rows(self.value(x), group_size)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::GroupMaxRows { x, argmax }, ng))
    }

    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        let v = tensor::gelu(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Gelu { x }, ng))
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: T) -> Result<VarId> {
        let v = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, eps }, ng))
    }

    /// Mean token-level negative log-likelihood over the given target rows.
    pub fn cross_entropy(&mut self, logits: VarId, targets: &[usize]) -> Result<VarId> {
        let (loss, probs) = tensor::cross_entropy(self.value(logits), targets)?;
        let ng = self.needs(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let v = tensor::sum_all(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Sum { x }, ng))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// variable the loss depends on; leaves created with [`Tape::constant`]
    /// are skipped.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>> {
        let loss_val = self.value(loss);
        if !loss_val.is_scalar() {
            return Err(Error::NotScalar { shape: loss_val.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |id: VarId| self.value(id);
        let acc = |grads: &mut [Option<Tensor<T>>], id: VarId, delta: Tensor<T>| -> Result<()> {
            if !self.needs(id) {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(existing) => *existing = tensor::add(existing, &delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                if self.needs(*a) {
                    let da = tensor::matmul_nt(g, val(*b))?;
                    acc(grads, *a, da)?;
                }
                if self.needs(*b) {
                    let db = tensor::matmul(&tensor::transpose(val(*a))?, g)?;
                    acc(grads, *b, db)?;
                }
            }
            Op::MatmulNt { a, b } => {
                if self.needs(*a) {
                    let da = tensor::matmul(g, val(*b))?;
                    acc(grads, *a, da)?;
                }
                if self.needs(*b) {
                    let db = tensor::matmul(&tensor::transpose(g)?, val(*a))?;
                    acc(grads, *b, db)?;
                }
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone())?;
                acc(grads, *b, g.clone())?;
            }
            Op::Sub { a, b } => {
                acc(grads, *a, g.clone())?;
                acc(grads, *b, tensor::scale(g, T::zero() - T::one())?)?;
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, tensor::mul(g, val(*b))?)?;
                }
                if self.needs(*b) {
                    acc(grads, *b, tensor::mul(g, val(*a))?)?;
                }
            }
            Op::AddBias { a, bias } => {
                acc(grads, *a, g.clone())?;
                if self.needs(*bias) {
                    let n = val(*bias).shape()[0];
                    let mut db = vec![T::zero(); n];
                    for (k, &gv) in g.data().iter().enumerate() {
                        db[k % n] += gv;
                    }
                    acc(grads, *bias, Tensor::new(vec![n], db)?)?;
                }
            }
            Op::Scale { a, c } => {
                acc(grads, *a, tensor::scale(g, *c)?)?;
            }
            Op::SoftmaxRows { x } => {
                let s = &self.nodes[i].value;
                let (m, n) = (s.shape()[0], s.shape()[1]);
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    let srow = s.row(r);
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let dot: T = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                    for c in 0..n {
                        dx[r * n + c] = srow[c] * (grow[c] - dot);
                    }
                }
                acc(grads, *x, Tensor::new(vec![m, n], dx)?)?;
            }
            Op::MaskedFill { x, mask } => {
                // gradient flows only through unmasked entries
                let keep = BoolMask::new(
                    mask.shape().to_vec(),
                    mask.data().iter().map(|&b| !b).collect(),
                )?;
                let blocked = tensor::masked_fill(g, &keep, T::zero())?;
                // `keep` zeroes the pass-through cells; invert by subtraction
                let dx = tensor::sub(g, &blocked)?;
                acc(grads, *x, dx)?;
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut offset = 0usize;
                for &p in parts {
                    let pshape = val(p).shape().to_vec();
                    if pshape.iter().product::<usize>() == 0 {
                        continue;
                    }
                    let pa = pshape[axis];
                    let mut dp = Vec::with_capacity(val(p).numel());
                    for o in 0..outer {
                        let start = (o * out_shape[axis] + offset) * inner;
                        dp.extend_from_slice(&g.data()[start..start + pa * inner]);
                    }
                    offset += pa;
                    acc(grads, p, Tensor::new(pshape, dp)?)?;
                }
            }
            Op::GatherRows { x, indices } => {
                let xshape = val(*x).shape().to_vec();
                let inner: usize = xshape[1..].iter().product();
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (k, &src) in indices.iter().enumerate() {
                    for c in 0..inner {
                        dx[src * inner + c] += g.data()[k * inner + c];
                    }
                }
                acc(grads, *x, Tensor::new(xshape, dx)?)?;
            }
            Op::MaxRows { x, argmax } => {
                let xshape = val(*x).shape().to_vec();
                let n = xshape[1];
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (j, &r) in argmax.iter().enumerate() {
                    dx[r * n + j] += g.data()[j];
                }
                acc(grads, *x, Tensor::new(xshape, dx)?)?;
            }
            Op::GroupMaxRows { x, argmax } => {
                let xshape = val(*x).shape().to_vec();
                let n = xshape[1];
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (cell, &r) in argmax.iter().enumerate() {
                    dx[r * n + cell % n] += g.data()[cell];
                }
                acc(grads, *x, Tensor::new(xshape, dx)?)?;
            }
            Op::Gelu { x } => {
                let xin = val(*x);
                let data: Vec<T> = xin
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * tensor::gelu_grad_scalar(v))
                    .collect();
                acc(grads, *x, Tensor::new(xin.shape().to_vec(), data)?)?;
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xin = val(*x);
                let (m, n) = (xin.shape()[0], xin.shape()[1]);
                let nf = T::from64(n as f64);
                let gam = val(*gamma);
                let mut dx = vec![T::zero(); m * n];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for r in 0..m {
                    let row = xin.row(r);
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let mean = row.iter().copied().sum::<T>() / nf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                    let inv = (var + *eps).sqrt().recip();
                    // dxhat, plus the two row means the closed form needs
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    let mut xhat = vec![T::zero(); n];
                    let mut dxhat = vec![T::zero(); n];
                    for c in 0..n {
                        xhat[c] = (row[c] - mean) * inv;
                        dxhat[c] = grow[c] * gam.data()[c];
                        mean_dxhat += dxhat[c];
                        mean_dxhat_xhat += dxhat[c] * xhat[c];
                        dgamma[c] += grow[c] * xhat[c];
                        dbeta[c] += grow[c];
                    }
                    mean_dxhat = mean_dxhat / nf;
                    mean_dxhat_xhat = mean_dxhat_xhat / nf;
                    for c in 0..n {
                        dx[r * n + c] =
                            inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                    }
                }
                acc(grads, *x, Tensor::new(vec![m, n], dx)?)?;
                if self.needs(*gamma) {
                    acc(grads, *gamma, Tensor::new(vec![n], dgamma)?)?;
                }
                if self.needs(*beta) {
                    acc(grads, *beta, Tensor::new(vec![n], dbeta)?)?;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let gscalar = g.item()?;
                let (m, v) = (probs.shape()[0], probs.shape()[1]);
                let inv_m = T::from64(m as f64).recip();
                let mut dl = vec![T::zero(); m * v];
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..v {
                        let indicator = if c == t { T::one() } else { T::zero() };
                        dl[r * v + c] = gscalar * (probs.at2(r, c) - indicator) * inv_m;
                    }
                }
                acc(grads, *logits, Tensor::new(vec![m, v], dl)?)?;
            }
            Op::Sum { x } => {
                let gscalar = g.item()?;
                let xin = val(*x);
                acc(
                    grads,
                    *x,
                    Tensor::filled(xin.shape().to_vec(), gscalar),
                )?;
            }
        }
        Ok(())
    }
}
