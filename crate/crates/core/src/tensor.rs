//! Dense row-major tensors and the pure kernels the rest of the crate is
//! built from.
//!
//! Kernels are pure functions over immutable tensors and are safe to call
//! from parallel workers. Every kernel validates its output: a NaN or
//! infinity is reported as an error, never returned silently. There is no
//! implicit broadcasting beyond mask fill.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor: explicit shape plus a row-major scalar array.
///
/// Rank 0 (shape `[]`) is a scalar holding one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Boolean mask companion to [`Tensor`]. A mask dimension of extent 1
/// broadcasts over the corresponding tensor dimension in `masked_fill`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoolMask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor_new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor { shape, data: vec![T::one(); n] }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = numel_of(&shape);
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// 2-D tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![r, c],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar { shape: self.shape.clone() })
        }
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.rank() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a rank-2 tensor (rank-1 is its own width).
    pub fn cols(&self) -> usize {
        match self.rank() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert!(self.rank() == 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[T] {
        debug_assert!(self.rank() == 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Construct a kernel output, enforcing the all-finite invariant.
    fn output(op: &'static str, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        debug_assert_eq!(numel_of(&shape), data.len());
        let t = Tensor { shape, data };
        t.ensure_finite(op)?;
        Ok(t)
    }

    /// Standard normal samples, drawn as f64 for dtype-independent streams.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let n = numel_of(&shape);
        let dist = Normal::new(0.0f64, std).expect("valid std");
        let data = (0..n).map(|_| T::from64(dist.sample(rng))).collect();
        Tensor { shape, data }
    }

    /// Uniform samples in [lo, hi), drawn as f64.
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Self {
        let n = numel_of(&shape);
        let data = (0..n).map(|_| T::from64(rng.gen_range(lo..hi))).collect();
        Tensor { shape, data }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::output("map", self.shape.clone(), data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from64(v.to64())).collect(),
        }
    }
}

impl BoolMask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "mask_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(BoolMask { shape, data })
    }

    pub fn falses(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        BoolMask { shape, data: vec![false; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn set2(&mut self, i: usize, j: usize, v: bool) {
        debug_assert!(self.shape.len() == 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn at2(&self, i: usize, j: usize) -> bool {
        debug_assert!(self.shape.len() == 2);
        self.data[i * self.shape[1] + j]
    }

    /// Causal mask for a T×T attention block: true marks cells to suppress
    /// (key position > query position).
    pub fn causal(t: usize) -> Self {
        let mut m = BoolMask::falses(vec![t, t]);
        for i in 0..t {
            for j in (i + 1)..t {
                m.set2(i, j, true);
            }
        }
        m
    }

    /// Whether this mask broadcasts over `shape`: equal rank, each dim equal
    /// or 1.
    fn broadcasts_to(&self, shape: &[usize]) -> bool {
        self.shape.len() == shape.len()
            && self
                .shape
                .iter()
                .zip(shape)
                .all(|(&m, &s)| m == s || m == 1)
    }
}

// ── Kernels ──────────────────────────────────────────────────────────

/// out = a @ b, with a: m×k and b: k×n.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bpj;
            }
        }
    }
    Tensor::output("matmul", vec![m, n], out)
}

/// out = a @ b^T, with a: m×k and b: n×k.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::output("matmul_nt", vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "transpose",
            lhs: a.shape.clone(),
            rhs: vec![],
        });
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::output("transpose", vec![n, m], out)
}

fn zip_same_shape<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::output(op, a.shape.clone(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same_shape("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same_shape("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same_shape("mul", a, b, |x, y| x * y)
}

/// Add a length-n bias vector to every row of an m×n tensor.
pub fn add_bias<T: Scalar>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || bias.rank() != 1 || bias.shape[0] != a.shape[1] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            lhs: a.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let n = a.shape[1];
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| x + bias.data[i % n])
        .collect();
    Tensor::output("add_bias", a.shape.clone(), data)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
    let data = a.data.iter().map(|&x| x * c).collect();
    Tensor::output("scale", a.shape.clone(), data)
}

/// Row-wise softmax with row-max subtraction.
///
/// A row whose maximum equals the mask sentinel is entirely masked; that is
/// a degenerate-row error, not a silent uniform distribution. Entries at the
/// sentinel underflow to exactly 0 after exponentiation.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "softmax_rows",
            lhs: x.shape.clone(),
            rhs: vec![],
        });
    }
    let (m, n) = (x.shape[0], x.shape[1]);
    let sentinel = T::mask_sentinel();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(sentinel, T::max);
        if max <= sentinel {
            return Err(Error::DegenerateRow { row: i });
        }
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Tensor::output("softmax_rows", vec![m, n], out)
}

/// Replace entries where the mask holds with `value`. The mask must have the
/// same rank as `x` with each dimension equal or 1 (broadcast).
pub fn masked_fill<T: Scalar>(x: &Tensor<T>, mask: &BoolMask, value: T) -> Result<Tensor<T>> {
    if !mask.broadcasts_to(&x.shape) {
        return Err(Error::ShapeMismatch {
            op: "masked_fill",
            lhs: x.shape.clone(),
            rhs: mask.shape.clone(),
        });
    }
    let rank = x.rank();
    let mut strides = vec![0usize; rank];
    {
        let mut acc = 1usize;
        for d in (0..rank).rev() {
            strides[d] = if mask.shape[d] == 1 { 0 } else { acc };
            acc *= mask.shape[d];
        }
    }
    let mut out = x.data.clone();
    let mut idx = vec![0usize; rank];
    for v in out.iter_mut() {
        let mi: usize = idx.iter().zip(&strides).map(|(&i, &s)| i * s).sum();
        if mask.data[mi] {
            *v = value;
        }
        // row-major increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < x.shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    // The sentinel is finite by construction, so the invariant holds.
    Tensor::output("masked_fill", x.shape.clone(), out)
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let parts: Vec<&Tensor<T>> = parts.iter().copied().filter(|p| p.numel() > 0).collect();
    let first = parts.first().ok_or(Error::ShapeMismatch {
        op: "concat",
        lhs: vec![],
        rhs: vec![],
    })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::IndexOutOfBounds { op: "concat", index: axis, len: rank });
    }
    let mut out_shape = first.shape.clone();
    out_shape[axis] = 0;
    for p in &parts {
        if p.rank() != rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        for d in 0..rank {
            if d != axis && p.shape[d] != first.shape[d] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        out_shape[axis] += p.shape[axis];
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(numel_of(&out_shape));
    for o in 0..outer {
        for p in &parts {
            let block = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    Tensor::output("concat", out_shape, data)
}

/// Gather rows (axis-0 slices) by index; duplicates allowed.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(Error::ShapeMismatch {
            op: "gather_rows",
            lhs: x.shape.clone(),
            rhs: vec![],
        });
    }
    let m = x.shape[0];
    let inner: usize = x.shape[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * inner);
    for &i in indices {
        if i >= m {
            return Err(Error::IndexOutOfBounds { op: "gather_rows", index: i, len: m });
        }
        data.extend_from_slice(&x.data[i * inner..(i + 1) * inner]);
    }
    let mut shape = x.shape.clone();
    shape[0] = indices.len();
    Tensor::output("gather_rows", shape, data)
}

/// Column-wise max over the rows of an m×n tensor. Returns the length-n max
/// vector and, per column, the lowest row index attaining it.
pub fn max_rows<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 2 || x.shape[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "max_rows",
            lhs: x.shape.clone(),
            rhs: vec![],
        });
    }
    let (m, n) = (x.shape[0], x.shape[1]);
    let mut best = x.data[..n].to_vec();
    let mut arg = vec![0usize; n];
    for i in 1..m {
        for j in 0..n {
            let v = x.data[i * n + j];
            if v > best[j] {
                best[j] = v;
                arg[j] = i;
            }
        }
    }
    Ok((Tensor::output("max_rows", vec![n], best)?, arg))
}

/// Row-blocked column max: x is (g·group_size)×n, output is g×n where row i
/// is the column-wise max of block i. Returns per-output-cell the lowest
/// absolute row index attaining the max.
pub fn group_max_rows<T: Scalar>(
    x: &Tensor<T>,
    group_size: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 2 || group_size == 0 || x.shape[0] % group_size != 0 {
        return Err(Error::ShapeMismatch {
            op: "group_max_rows",
            lhs: x.shape.clone(),
            rhs: vec![group_size],
        });
    }
    let (m, n) = (x.shape[0], x.shape[1]);
    let g = m / group_size;
    let mut out = vec![T::zero(); g * n];
    let mut arg = vec![0usize; g * n];
    for b in 0..g {
        let base = b * group_size;
        out[b * n..(b + 1) * n].copy_from_slice(&x.data[base * n..base * n + n]);
        for j in 0..n {
            arg[b * n + j] = base;
        }
        for r in 1..group_size {
            let row = base + r;
            for j in 0..n {
                let v = x.data[row * n + j];
                if v > out[b * n + j] {
                    out[b * n + j] = v;
                    arg[b * n + j] = row;
                }
            }
        }
    }
    Ok((Tensor::output("group_max_rows", vec![g, n], out)?, arg))
}

/// GELU (tanh approximation), applied elementwise.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let data = x.data.iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::output("gelu", x.shape.clone(), data)
}

pub(crate) fn gelu_scalar<T: Scalar>(v: T) -> T {
    let c = T::from64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from64(0.044715);
    let half = T::from64(0.5);
    let u = c * (v + k * v * v * v);
    half * v * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad_scalar<T: Scalar>(v: T) -> T {
    let c = T::from64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from64(0.044715);
    let half = T::from64(0.5);
    let three = T::from64(3.0);
    let u = c * (v + k * v * v * v);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * v * sech2 * c * (T::one() + three * k * v * v)
}

/// Per-row layer normalization with learnable gain and shift.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || gamma.shape() != [x.shape[1]] || beta.shape() != [x.shape[1]] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let (m, n) = (x.shape[0], x.shape[1]);
    let nf = T::from64(n as f64);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / nf;
        let inv = (var + eps).sqrt().recip();
        for j in 0..n {
            out[i * n + j] = (row[j] - mean) * inv * gamma.data[j] + beta.data[j];
        }
    }
    Tensor::output("layer_norm", vec![m, n], out)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`. Returns the scalar loss and the softmax probabilities.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape[0] != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    let v = logits.shape[1];
    for &t in targets {
        if t >= v {
            return Err(Error::IndexOutOfBounds { op: "cross_entropy", index: t, len: v });
        }
    }
    let probs = softmax_rows(logits)?;
    let m = targets.len();
    let mut nll = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        nll = nll - probs.at2(i, t).ln();
    }
    let loss = nll / T::from64(m as f64);
    Ok((
        Tensor::output("cross_entropy", vec![], vec![loss])?,
        probs,
    ))
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.data.iter().copied().sum::<T>();
    Tensor::output("sum", vec![], vec![s])
}

// ── Binary dump ──────────────────────────────────────────────────────
//
// Debug format: 16-byte header (magic "TNSR", u32 version, u32 rank,
// u32 dtype byte-width), then rank u64 little-endian extents, then the
// elements little-endian.

const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

impl<T: Scalar> Tensor<T> {
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        let width: u32 = std::mem::size_of::<T>() as u32;
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        w.write_all(&width.to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            if width == 8 {
                w.write_all(&v.to64().to_le_bytes())?;
            } else {
                w.write_all(&(v.to64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)?;
        if &head[0..4] != TENSOR_MAGIC {
            return Err(Error::Format { op: "tensor_read", detail: "bad magic".into() });
        }
        let rank = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(head[12..16].try_into().unwrap());
        if width as usize != std::mem::size_of::<T>() {
            return Err(Error::Format {
                op: "tensor_read",
                detail: format!("dtype width {} does not match {}", width, T::DTYPE),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n = numel_of(&shape);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            if width == 8 {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(T::from64(f64::from_le_bytes(b)));
            } else {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                data.push(T::from64(f32::from_le_bytes(b) as f64));
            }
        }
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_binary(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tensor<f64>;

    #[test]
    fn matmul_identity() {
        let i = T64::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = T64::from_rows(&[vec![3.0, -1.5], vec![2.0, 7.0]]).unwrap();
        assert_eq!(matmul(&i, &x).unwrap(), x);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] · [[0],[1]] = [[2],[4]]
        let a = T64::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = T64::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let z = T64::zeros(vec![3, 4]);
        let mut rng = crate::rng_from_seed(7);
        let b = T64::randn(vec![4, 2], 1.0, &mut rng);
        let c = matmul(&z, &b).unwrap();
        assert_eq!(c, T64::zeros(vec![3, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = T64::zeros(vec![2, 3]);
        let b = T64::zeros(vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_nt_matches_transpose_route() {
        let mut rng = crate::rng_from_seed(3);
        let a = T64::randn(vec![3, 5], 1.0, &mut rng);
        let b = T64::randn(vec![4, 5], 1.0, &mut rng);
        let direct = matmul_nt(&a, &b).unwrap();
        let via_t = matmul(&a, &transpose(&b).unwrap()).unwrap();
        assert!(direct.max_abs_diff(&via_t) < 1e-12);
    }

    #[test]
    fn softmax_symmetric_row() {
        let x = T64::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_entries_no_overflow() {
        let x = T64::from_rows(&[vec![1000.0, 1000.0, 1000.0]]).unwrap();
        let s = softmax_rows(&x).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // softmax([0, ln 3]) = [1/4, 3/4]
        let x = T64::from_rows(&[vec![0.0, 3.0f64.ln()]]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_unit_interval() {
        let mut rng = crate::rng_from_seed(11);
        for _ in 0..20 {
            let x = T64::randn(vec![4, 7], 3.0, &mut rng);
            let s = softmax_rows(&x).unwrap();
            for i in 0..4 {
                let sum: f64 = s.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(s.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_degenerate() {
        let sentinel = f64::mask_sentinel();
        let x = T64::from_rows(&[vec![sentinel, sentinel]]).unwrap();
        match softmax_rows(&x) {
            Err(Error::DegenerateRow { row: 0 }) => {}
            other => panic!("expected degenerate row, got {other:?}"),
        }
    }

    #[test]
    fn masked_fill_all_false_is_identity() {
        let mut rng = crate::rng_from_seed(5);
        let x = T64::randn(vec![3, 4], 1.0, &mut rng);
        let m = BoolMask::falses(vec![3, 4]);
        assert_eq!(masked_fill(&x, &m, f64::mask_sentinel()).unwrap(), x);
    }

    #[test]
    fn masked_fill_then_softmax_exact_zero() {
        // mask [0,1] on row [a,b] → softmax yields [1, 0]
        let x = T64::from_rows(&[vec![1.3, -0.2]]).unwrap();
        let m = BoolMask::new(vec![1, 2], vec![false, true]).unwrap();
        let filled = masked_fill(&x, &m, f64::mask_sentinel()).unwrap();
        let s = softmax_rows(&filled).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_fill_all_true_then_softmax_degenerates() {
        let x = T64::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let m = BoolMask::new(vec![1, 2], vec![true, true]).unwrap();
        let filled = masked_fill(&x, &m, f64::mask_sentinel()).unwrap();
        assert!(matches!(softmax_rows(&filled), Err(Error::DegenerateRow { .. })));
    }

    #[test]
    fn masked_fill_broadcasts_column_mask() {
        let x = T64::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let m = BoolMask::new(vec![1, 2], vec![false, true]).unwrap();
        let y = masked_fill(&x, &m, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn masked_fill_rejects_non_broadcastable() {
        let x = T64::zeros(vec![2, 3]);
        let m = BoolMask::falses(vec![2, 2]);
        assert!(matches!(
            masked_fill(&x, &m, 0.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nonfinite_output_is_reported() {
        let x = T64::filled(vec![2], f64::MAX);
        assert!(matches!(scale(&x, 2.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn concat_then_gather_roundtrip_bitexact() {
        let mut rng = crate::rng_from_seed(9);
        let a = T64::randn(vec![3, 4], 1.0, &mut rng);
        let b = T64::randn(vec![2, 4], 1.0, &mut rng);
        let cat = concat(&[&a, &b], 0).unwrap();
        let back_a = gather_rows(&cat, &[0, 1, 2]).unwrap();
        let back_b = gather_rows(&cat, &[3, 4]).unwrap();
        assert_eq!(back_a, a);
        assert_eq!(back_b, b);
    }

    #[test]
    fn concat_axis1() {
        let a = T64::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let b = T64::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        let cat = concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.shape(), &[2, 2]);
        assert_eq!(cat.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn max_rows_takes_lowest_tied_index() {
        let x = T64::from_rows(&[vec![1.0, 5.0], vec![1.0, 2.0]]).unwrap();
        let (m, arg) = max_rows(&x).unwrap();
        assert_eq!(m.data(), &[1.0, 5.0]);
        assert_eq!(arg, vec![0, 0]);
    }

    #[test]
    fn layer_norm_mean_zero_unit_var() {
        let x = T64::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let g = T64::ones(vec![4]);
        let b = T64::zeros(vec![4]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = T64::zeros(vec![2, 4]);
        let (loss, _) = cross_entropy(&logits, &[1, 3]).unwrap();
        assert!((loss.item().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn binary_roundtrip() {
        let mut rng = crate::rng_from_seed(13);
        let x = T64::randn(vec![2, 3, 2], 1.0, &mut rng);
        let mut buf = Vec::new();
        x.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"TNSR");
        let y = T64::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(x, y);
    }
}
