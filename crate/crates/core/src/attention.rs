//! Causal self-attention and its adaptive variant.
//!
//! The adaptive layer is standard multi-head attention whose key/value
//! matrices are extended with projections of dense vision tokens:
//!
//! ```text
//! Q = H·W_Q       K_all = [H·W_K ; D·W'_K]      V_all = [H·W_V ; D·W'_V]
//! out = softmax(Q·K_allᵀ / √d_k) · V_all
//! ```
//!
//! Dense tokens contribute keys and values only — queries come from the
//! hidden state alone and dense tokens never occupy residual-stream
//! positions, so sequence length is constant across layers. The combined
//! mask is: causal over the H×H block; sparse-vision rows see no dense
//! columns; text rows see only dense columns owned by selected regions.
//!
//! Each layer records its row-stochastic weights. The hidden→sparse-vision
//! slice (dense columns eliminated) is what the next layer's selector reads.
//! Weights are recorded as detached values: selection is a discrete control
//! path, no gradient flows through it.

use std::io::Write;

use crate::config::HeadAgg;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::selector::SelectionMask;
use crate::tape::{Tape, VarId};
use crate::tensor::{BoolMask, Tensor};

/// Per-layer projection parameters registered on a tape. One d_model×d_k
/// matrix per head for Q/K/V; magnifier layers carry the independent dense
/// key/value projections as well; plus the output projection.
#[derive(Clone, Debug)]
pub struct AttentionLayerVars {
    pub w_q: Vec<VarId>,
    pub w_k: Vec<VarId>,
    pub w_v: Vec<VarId>,
    /// Dense-token key projections (magnifier layers only).
    pub w_dense_k: Option<Vec<VarId>>,
    /// Dense-token value projections (magnifier layers only).
    pub w_dense_v: Option<Vec<VarId>>,
    pub w_o: VarId,
    pub d_k: usize,
}

impl AttentionLayerVars {
    pub fn heads(&self) -> usize {
        self.w_q.len()
    }
}

/// Dense tokens offered to a layer as extra keys/values: the (R·K)×d_model
/// token matrix and, per token, the sparse region index that owns it.
#[derive(Clone, Copy, Debug)]
pub struct DenseAttachment<'a> {
    pub tokens: VarId,
    pub owners: &'a [usize],
}

/// Detached per-layer attention weights.
///
/// `head_weights[h]` is the full row-stochastic T×(T+RK) map of head `h`;
/// `sliced_map` is the head-aggregated T×S hidden→sparse-vision portion with
/// every dense column eliminated.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T: Scalar> {
    pub layer: usize,
    pub head_weights: Vec<Tensor<T>>,
    pub sliced_map: Tensor<T>,
    /// Hidden-state length (queries).
    pub t: usize,
    /// Sparse vision token count (sliced-map width).
    pub s: usize,
    /// Dense key columns appended this layer.
    pub dense_cols: usize,
}

impl<T: Scalar> AttentionRecord<T> {
    /// Head-aggregated full map (text and dense columns included).
    pub fn aggregate_full(&self, agg: HeadAgg) -> Tensor<T> {
        aggregate_heads(&self.head_weights, agg)
    }

    /// Sum of each full row across all heads' maps; row-stochasticity check.
    pub fn row_sum_range(&self) -> (T, T) {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for w in &self.head_weights {
            for i in 0..w.rows() {
                let sum = w.row(i).iter().copied().sum::<T>();
                lo = lo.min(sum);
                hi = hi.max(sum);
            }
        }
        (lo, hi)
    }
}

fn aggregate_heads<T: Scalar>(head_weights: &[Tensor<T>], agg: HeadAgg) -> Tensor<T> {
    let shape = head_weights[0].shape().to_vec();
    let n = head_weights[0].numel();
    let mut out = vec![T::zero(); n];
    match agg {
        HeadAgg::Mean => {
            let inv = T::from64(head_weights.len() as f64).recip();
            for w in head_weights {
                for (o, &v) in out.iter_mut().zip(w.data()) {
                    *o = *o + v;
                }
            }
            for o in out.iter_mut() {
                *o = *o * inv;
            }
        }
        HeadAgg::Max => {
            out.copy_from_slice(head_weights[0].data());
            for w in &head_weights[1..] {
                for (o, &v) in out.iter_mut().zip(w.data()) {
                    *o = (*o).max(v);
                }
            }
        }
    }
    Tensor::new(shape, out).expect("aggregate preserves finiteness")
}

fn slice_columns<T: Scalar>(x: &Tensor<T>, cols: usize) -> Tensor<T> {
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        out.extend_from_slice(&x.row(i)[..cols]);
    }
    Tensor::new(vec![rows, cols], out).expect("slice preserves finiteness")
}

/// Combined attention mask: causal over the T×T hidden block, all dense
/// columns blocked for sparse-vision rows (the first `s` positions), and
/// dense columns of unselected regions blocked for text rows.
fn build_mask(
    t: usize,
    s: usize,
    owners: &[usize],
    selection: Option<&SelectionMask>,
) -> BoolMask {
    let rk = owners.len();
    let mut mask = BoolMask::falses(vec![t, t + rk]);
    for i in 0..t {
        for j in (i + 1)..t {
            mask.set2(i, j, true);
        }
    }
    for (c, &owner) in owners.iter().enumerate() {
        for i in 0..s.min(t) {
            mask.set2(i, t + c, true);
        }
        let allowed = selection.map_or(false, |sel| sel.is_selected(owner));
        if !allowed {
            for i in s..t {
                mask.set2(i, t + c, true);
            }
        }
    }
    mask
}

fn attention_core<T: Scalar>(
    tape: &mut Tape<T>,
    h: VarId,
    dense: Option<DenseAttachment<'_>>,
    selection: Option<&SelectionMask>,
    vars: &AttentionLayerVars,
    layer: usize,
    s: usize,
    head_agg: HeadAgg,
) -> Result<(VarId, AttentionRecord<T>)> {
    let t = tape.value(h).shape()[0];
    if t == 0 {
        return Err(Error::Layout("attention needs at least one position".into()));
    }
    if s > t {
        return Err(Error::Layout(format!(
            "sparse token count {s} exceeds sequence length {t}"
        )));
    }
    let owners: &[usize] = dense.map_or(&[], |d| d.owners);
    if let Some(d) = dense {
        let rows = tape.value(d.tokens).shape()[0];
        if rows != owners.len() {
            return Err(Error::ShapeMismatch {
                op: "adaptive_self_attention",
                lhs: vec![rows],
                rhs: vec![owners.len()],
            });
        }
    }

    let mask = build_mask(t, s, owners, selection);
    let inv_sqrt_dk = T::from64(1.0 / (vars.d_k as f64).sqrt());
    let sentinel = T::mask_sentinel();

    let mut contexts = Vec::with_capacity(vars.heads());
    let mut head_weights = Vec::with_capacity(vars.heads());
    for hd in 0..vars.heads() {
        let q = tape.matmul(h, vars.w_q[hd])?;
        let k = tape.matmul(h, vars.w_k[hd])?;
        let v = tape.matmul(h, vars.w_v[hd])?;
        let (k_all, v_all) = match dense {
            Some(d) => {
                let wk = vars.w_dense_k.as_ref().ok_or_else(|| {
                    Error::Config("dense tokens attached to a layer without dense projections".into())
                })?[hd];
                let wv = vars.w_dense_v.as_ref().ok_or_else(|| {
                    Error::Config("dense tokens attached to a layer without dense projections".into())
                })?[hd];
                let dk = tape.matmul(d.tokens, wk)?;
                let dv = tape.matmul(d.tokens, wv)?;
                (tape.concat(&[k, dk], 0)?, tape.concat(&[v, dv], 0)?)
            }
            None => (k, v),
        };
        let scores = tape.matmul_nt(q, k_all)?;
        let scaled = tape.scale(scores, inv_sqrt_dk)?;
        let masked = tape.masked_fill(scaled, &mask, sentinel)?;
        let weights = tape.softmax_rows(masked)?;
        head_weights.push(tape.value(weights).clone());
        contexts.push(tape.matmul(weights, v_all)?);
    }
    let merged = tape.concat(&contexts, 1)?;
    let out = tape.matmul(merged, vars.w_o)?;

    let sliced_map = slice_columns(&aggregate_heads(&head_weights, head_agg), s);
    let record = AttentionRecord {
        layer,
        head_weights,
        sliced_map,
        t,
        s,
        dense_cols: owners.len(),
    };
    Ok((out, record))
}

/// Multi-head causal self-attention over the hidden state.
pub fn standard_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    h: VarId,
    vars: &AttentionLayerVars,
    layer: usize,
    s: usize,
    head_agg: HeadAgg,
) -> Result<(VarId, AttentionRecord<T>)> {
    attention_core(tape, h, None, None, vars, layer, s, head_agg)
}

/// Adaptive self-attention: causal attention with the selected regions'
/// dense tokens concatenated as extra keys/values. With no dense attachment
/// this is exactly [`standard_self_attention`].
pub fn adaptive_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    h: VarId,
    dense: Option<DenseAttachment<'_>>,
    selection: &SelectionMask,
    vars: &AttentionLayerVars,
    layer: usize,
    s: usize,
    head_agg: HeadAgg,
) -> Result<(VarId, AttentionRecord<T>)> {
    attention_core(tape, h, dense, Some(selection), vars, layer, s, head_agg)
}

// ── Record export ────────────────────────────────────────────────────

/// Head-aggregated full attention map as `row,col,weight` CSV.
pub fn write_record_csv<T: Scalar>(
    record: &AttentionRecord<T>,
    agg: HeadAgg,
    w: &mut impl Write,
) -> Result<()> {
    let full = record.aggregate_full(agg);
    writeln!(w, "row,col,weight")?;
    for i in 0..full.rows() {
        for j in 0..full.cols() {
            writeln!(w, "{},{},{}", i, j, full.at2(i, j).to64())?;
        }
    }
    Ok(())
}

/// The sliced hidden→sparse-vision map as a binary (P5) PGM heatmap, each
/// row min-max normalized to 0–255 with the selector's normalization.
pub fn write_sliced_pgm<T: Scalar>(record: &AttentionRecord<T>, w: &mut impl Write) -> Result<()> {
    let map = &record.sliced_map;
    let (rows, cols) = (map.rows(), map.cols());
    write!(w, "P5\n{} {}\n255\n", cols, rows)?;
    for i in 0..rows {
        let bytes = crate::selector::normalize_to_u8(map.row(i));
        w.write_all(&bytes)?;
    }
    Ok(())
}
