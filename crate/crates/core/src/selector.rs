//! Dense vision token selector.
//!
//! Parameter-free procedure: take the previous layer's attention row from
//! the querying text position to the sparse vision tokens, min-max normalize
//! it to 0–255, and keep the tokens at or above a threshold. The selected
//! region set drives dense-token retrieval in the magnifier layer.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::config::SelectStrategy;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of one selection: normalized scores, the rule inputs, and the
/// chosen sparse-token indices (sorted ascending, never empty).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub scores_u8: Vec<u8>,
    pub threshold: u8,
    pub selected: Vec<usize>,
    pub strategy: SelectStrategy,
}

impl SelectionMask {
    /// Number of sparse vision tokens the scores cover.
    pub fn len(&self) -> usize {
        self.scores_u8.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores_u8.is_empty()
    }

    pub fn selected_fraction(&self) -> f64 {
        self.selected.len() as f64 / self.scores_u8.len() as f64
    }

    pub fn is_selected(&self, sparse_index: usize) -> bool {
        self.selected.binary_search(&sparse_index).is_ok()
    }
}

/// Head-aggregated attention row from `query_position` to every sparse
/// vision token, read off the record's sliced map.
pub fn extract_query_row<T: Scalar>(
    record: &AttentionRecord<T>,
    query_position: usize,
) -> Result<Vec<T>> {
    if query_position >= record.sliced_map.rows() {
        return Err(Error::IndexOutOfBounds {
            op: "extract_query_row",
            index: query_position,
            len: record.sliced_map.rows(),
        });
    }
    Ok(record.sliced_map.row(query_position).to_vec())
}

/// Min-max map onto 0..=255 with half-away-from-zero rounding:
/// `u8[i] = round(255 · (raw[i] − min) / (max − min))`.
/// A constant row maps to all zeros.
pub fn normalize_to_u8<T: Scalar>(raw: &[T]) -> Vec<u8> {
    debug_assert!(!raw.is_empty());
    let mut lo = raw[0];
    let mut hi = raw[0];
    for &v in raw {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return vec![0u8; raw.len()];
    }
    let span = hi - lo;
    let full = T::from64(255.0);
    raw.iter()
        .map(|&v| {
            let scaled = full * ((v - lo) / span);
            scaled.round().to64().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Threshold rule with the non-empty fallback.
///
/// Attention-map strategy keeps `{ i : scores[i] >= threshold }`, falling
/// back to the (lowest) argmax alone if that set is empty. Random strategy
/// draws the same cardinality uniformly, so ablations compare selection
/// quality at matched cost. `max_select_frac`, when set, caps the selection
/// at the top-scoring fraction.
pub fn select(
    scores_u8: &[u8],
    threshold: u8,
    strategy: SelectStrategy,
    rng: &mut impl Rng,
    max_select_frac: Option<f64>,
) -> SelectionMask {
    debug_assert!(!scores_u8.is_empty());
    let mut selected: Vec<usize> = scores_u8
        .iter()
        .enumerate()
        .filter_map(|(i, &s)| (s >= threshold).then_some(i))
        .collect();
    if selected.is_empty() {
        let argmax = scores_u8
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        selected.push(argmax);
    }
    if let Some(frac) = max_select_frac {
        let cap = ((scores_u8.len() as f64 * frac).floor() as usize).max(1);
        if selected.len() > cap {
            selected.sort_by(|&a, &b| scores_u8[b].cmp(&scores_u8[a]).then(a.cmp(&b)));
            selected.truncate(cap);
            selected.sort_unstable();
        }
    }
    match strategy {
        SelectStrategy::AttentionMap => SelectionMask {
            scores_u8: scores_u8.to_vec(),
            threshold,
            selected,
            strategy,
        },
        SelectStrategy::Random => {
            let n = selected.len();
            let mut drawn = rand::seq::index::sample(rng, scores_u8.len(), n).into_vec();
            drawn.sort_unstable();
            SelectionMask {
                scores_u8: scores_u8.to_vec(),
                threshold,
                selected: drawn,
                strategy,
            }
        }
    }
}

/// Whose attention row drives selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Teacher forcing: the last instruction token, the position that
    /// predicts the first answer token.
    Training,
    /// Greedy decoding with `generated` answer tokens emitted so far; the
    /// query is the current last token, recomputed every step.
    Decode { generated: usize },
}

/// Index of the querying position for the given sequence layout
/// (`vision_len` sparse tokens, then `instruction_len` text tokens, then any
/// answer tokens).
pub fn choose_query_position(
    vision_len: usize,
    instruction_len: usize,
    phase: Phase,
) -> Result<usize> {
    if instruction_len == 0 {
        return Err(Error::Layout("sequence has no text tokens".into()));
    }
    Ok(match phase {
        Phase::Training => vision_len + instruction_len - 1,
        Phase::Decode { generated } => vision_len + instruction_len + generated - 1,
    })
}

/// One JSON line per magnifier layer: `{layer, threshold, scores_u8, selected}`.
#[derive(Serialize)]
struct SelectionLine<'a> {
    layer: usize,
    threshold: u8,
    scores_u8: &'a [u8],
    selected: &'a [usize],
    strategy: SelectStrategy,
}

pub fn write_selections_jsonl(
    w: &mut impl Write,
    masks: &[(usize, &SelectionMask)],
) -> Result<()> {
    for (layer, mask) in masks {
        let line = SelectionLine {
            layer: *layer,
            threshold: mask.threshold,
            scores_u8: &mask.scores_u8,
            selected: &mask.selected,
            strategy: mask.strategy,
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_point_row() {
        // (0.5-0.1)/0.8 = 0.5 → 127.5 rounds away from zero to 128
        assert_eq!(normalize_to_u8(&[0.1f64, 0.5, 0.9]), vec![0, 128, 255]);
    }

    #[test]
    fn normalize_constant_row_is_zeros() {
        assert_eq!(normalize_to_u8(&[0.7f64; 5]), vec![0; 5]);
    }

    #[test]
    fn normalize_endpoints_forced() {
        let mut rng = rng_from_seed(4);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..9).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
            let u = normalize_to_u8(&raw);
            let (mut lo_i, mut hi_i) = (0usize, 0usize);
            for (i, &v) in raw.iter().enumerate() {
                if v < raw[lo_i] {
                    lo_i = i;
                }
                if v > raw[hi_i] {
                    hi_i = i;
                }
            }
            if raw[lo_i] < raw[hi_i] {
                assert_eq!(u[lo_i], 0);
                assert_eq!(u[hi_i], 255);
            }
        }
    }

    #[test]
    fn select_applies_threshold_rule() {
        let mut rng = rng_from_seed(0);
        let m = select(&[0, 128, 255], 96, SelectStrategy::AttentionMap, &mut rng, None);
        assert_eq!(m.selected, vec![1, 2]);
    }

    #[test]
    fn select_threshold_zero_takes_all() {
        let mut rng = rng_from_seed(0);
        let m = select(&[5, 0, 200], 0, SelectStrategy::AttentionMap, &mut rng, None);
        assert_eq!(m.selected, vec![0, 1, 2]);
    }

    #[test]
    fn select_threshold_255_is_argmax_set() {
        let mut rng = rng_from_seed(0);
        let m = select(&[3, 255, 9], 255, SelectStrategy::AttentionMap, &mut rng, None);
        assert_eq!(m.selected, vec![1]);
        // ties at 255 are all selected
        let m = select(&[255, 4, 255], 255, SelectStrategy::AttentionMap, &mut rng, None);
        assert_eq!(m.selected, vec![0, 2]);
    }

    #[test]
    fn select_empty_falls_back_to_argmax() {
        // constant zeros with positive threshold → argmax fallback (index 0)
        let mut rng = rng_from_seed(0);
        let m = select(&[0, 0, 0], 96, SelectStrategy::AttentionMap, &mut rng, None);
        assert_eq!(m.selected, vec![0]);
        let m = select(&[10, 40, 20], 96, SelectStrategy::AttentionMap, &mut rng, None);
        assert_eq!(m.selected, vec![1]);
    }

    #[test]
    fn select_random_preserves_cardinality() {
        let mut rng = rng_from_seed(12);
        let scores = [0u8, 100, 150, 200, 255];
        for th in [0u8, 96, 150, 255] {
            let att = select(&scores, th, SelectStrategy::AttentionMap, &mut rng, None);
            let ran = select(&scores, th, SelectStrategy::Random, &mut rng, None);
            assert_eq!(att.selected.len(), ran.selected.len(), "threshold {th}");
            assert!(ran.selected.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn select_cap_keeps_top_scores() {
        let mut rng = rng_from_seed(1);
        let m = select(
            &[10, 250, 80, 200, 90],
            0,
            SelectStrategy::AttentionMap,
            &mut rng,
            Some(0.4),
        );
        assert_eq!(m.selected, vec![1, 3]);
    }

    #[test]
    fn query_position_layout_arithmetic() {
        // [128 vision | 6 instr | answer]: training queries index 133
        assert_eq!(choose_query_position(128, 6, Phase::Training).unwrap(), 133);
        // decode with t generated tokens queries 128 + 6 + t - 1
        assert_eq!(choose_query_position(128, 6, Phase::Decode { generated: 0 }).unwrap(), 133);
        assert_eq!(choose_query_position(128, 6, Phase::Decode { generated: 3 }).unwrap(), 136);
    }

    #[test]
    fn query_position_requires_text() {
        assert!(choose_query_position(128, 0, Phase::Training).is_err());
    }

    #[test]
    fn jsonl_export_shape() {
        let mask = SelectionMask {
            scores_u8: vec![0, 255],
            threshold: 96,
            selected: vec![1],
            strategy: SelectStrategy::AttentionMap,
        };
        let mut buf = Vec::new();
        write_selections_jsonl(&mut buf, &[(2, &mask), (3, &mask)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(v["layer"], 2);
        assert_eq!(v["threshold"], 96);
        assert_eq!(v["selected"], serde_json::json!([1]));
    }

    proptest! {
        /// min-max normalization absorbs positive affine maps, so selection
        /// is invariant under raw → a·raw + b.
        #[test]
        fn affine_invariance(
            raw in proptest::collection::vec(-50.0f64..50.0, 2..40),
            a in 0.01f64..100.0,
            b in -100.0f64..100.0,
            threshold in 0u8..=255,
        ) {
            let mapped: Vec<f64> = raw.iter().map(|&v| a * v + b).collect();
            let mut rng1 = rng_from_seed(0);
            let mut rng2 = rng_from_seed(0);
            let s1 = select(&normalize_to_u8(&raw), threshold, SelectStrategy::AttentionMap, &mut rng1, None);
            let s2 = select(&normalize_to_u8(&mapped), threshold, SelectStrategy::AttentionMap, &mut rng2, None);
            prop_assert_eq!(s1.selected, s2.selected);
        }

        /// raising the threshold never adds a selected token
        #[test]
        fn threshold_monotonicity(
            scores in proptest::collection::vec(0u8..=255, 1..40),
            t1 in 0u8..=255,
            t2 in 0u8..=255,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let mut rng1 = rng_from_seed(0);
            let mut rng2 = rng_from_seed(0);
            let s_lo = select(&scores, lo, SelectStrategy::AttentionMap, &mut rng1, None);
            let s_hi = select(&scores, hi, SelectStrategy::AttentionMap, &mut rng2, None);
            for i in &s_hi.selected {
                prop_assert!(s_lo.selected.contains(i));
            }
        }

        /// the argmax token is selected for every threshold
        #[test]
        fn argmax_always_selected(
            scores in proptest::collection::vec(0u8..=255, 1..40),
            threshold in 0u8..=255,
        ) {
            let mut rng = rng_from_seed(0);
            let s = select(&scores, threshold, SelectStrategy::AttentionMap, &mut rng, None);
            let max = *scores.iter().max().unwrap();
            let argmax = scores.iter().position(|&v| v == max).unwrap();
            prop_assert!(s.selected.contains(&argmax));
            prop_assert!(!s.selected.is_empty());
        }
    }
}
