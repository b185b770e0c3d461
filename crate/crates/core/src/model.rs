//! The toy causal transformer with the scene-magnifier layers.
//!
//! Sequence layout is [sparse vision | instruction | answer]. The first
//! `n_sa` layers run standard causal self-attention; each of the last `n_ma`
//! layers reads the previous layer's attention record, selects regions,
//! retrieves dense tokens, and runs adaptive self-attention. Pre-norm
//! residual blocks with a GELU feed-forward throughout; loss is
//! cross-entropy on the answer span only.
//!
//! Everything is deterministic given (config, params, inputs): selection
//! randomness is derived from the config seed, batches shuffle from a seeded
//! stream, and data-parallel gradients are summed in example order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    adaptive_self_attention, standard_self_attention, AttentionLayerVars, AttentionRecord,
    DenseAttachment,
};
use crate::config::{cosine_lr, ModelConfig, SelectStrategy, TrainConfig};
use crate::error::{Error, Result};
use crate::pointcloud::{SaParamVars, SceneField};
use crate::scalar::Scalar;
use crate::selector::{
    choose_query_position, extract_query_row, normalize_to_u8, select, Phase, SelectionMask,
};
use crate::tape::{Gradients, Tape, VarId};
use crate::tensor::Tensor;
use crate::tokenizer::{
    build_dense_tokens, build_sparse_tokens_planned, plan_scene, sinusoidal_1d, DenseRegionCache,
    ScenePlan,
};

// ── Sequence layout ──────────────────────────────────────────────────

/// Contiguous spans [vision | instruction | answer] with the text token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub vision_len: usize,
    pub instruction: Vec<u32>,
    pub answer: Vec<u32>,
}

impl SequenceLayout {
    pub fn new(vision_len: usize, instruction: Vec<u32>, answer: Vec<u32>) -> Result<Self> {
        if instruction.is_empty() {
            return Err(Error::Layout("instruction span must be non-empty".into()));
        }
        Ok(SequenceLayout { vision_len, instruction, answer })
    }

    pub fn total_len(&self) -> usize {
        self.vision_len + self.instruction.len() + self.answer.len()
    }

    pub fn text_ids(&self) -> Vec<u32> {
        let mut ids = self.instruction.clone();
        ids.extend_from_slice(&self.answer);
        ids
    }

    /// Row range of the logits that predict the answer tokens (position p
    /// predicts token p+1, so the span starts at the last instruction token).
    pub fn answer_query_rows(&self) -> std::ops::Range<usize> {
        let start = self.vision_len + self.instruction.len() - 1;
        start..start + self.answer.len()
    }
}

// ── Parameters ───────────────────────────────────────────────────────

/// Named parameter tensors in a deterministic (lexicographic) order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, Tensor<T>>,
}

/// Per-tape handles for every named parameter.
pub struct BoundParams {
    vars: BTreeMap<String, VarId>,
}

impl BoundParams {
    fn get(&self, name: &str) -> VarId {
        self.vars[name]
    }

    pub fn var(&self, name: &str) -> Option<VarId> {
        self.vars.get(name).copied()
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Initialize all weights from the config seed: normal(0, 0.02) for
    /// projections and embeddings, ones/zeros for layer norms and biases.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be set before init".into()));
        }
        let mut rng = crate::rng_from_seed(cfg.seed);
        let std = 0.02;
        let d = cfg.d_model;
        let mut entries = BTreeMap::new();
        // creation order is fixed so the random stream is stable; the map
        // reorders lexicographically for iteration
        let norm = |entries: &mut BTreeMap<String, Tensor<T>>,
                        name: String,
                        shape: Vec<usize>,
                        std: f64,
                        rng: &mut rand_chacha::ChaCha8Rng| {
            entries.insert(name, Tensor::randn(shape, std, rng));
        };
        // token content must be commensurate with the fixed positional
        // sinusoids, so embeddings and the set-abstraction maps use
        // fan-scaled init; transformer internals keep the small-residual std
        let embed_std = 1.0 / (d as f64).sqrt();
        norm(&mut entries, "embed.tok".into(), vec![cfg.vocab_size, d], embed_std, &mut rng);
        norm(&mut entries, "head.lm".into(), vec![d, cfg.vocab_size], std, &mut rng);
        entries.insert("final_ln.gamma".into(), Tensor::ones(vec![d]));
        entries.insert("final_ln.beta".into(), Tensor::zeros(vec![d]));
        let sa_in = 3 + cfg.feature_dim;
        for tier in ["sa_sparse", "sa_dense"] {
            let x1 = (2.0 / (sa_in + cfg.sa_hidden) as f64).sqrt();
            let x2 = (2.0 / (cfg.sa_hidden + d) as f64).sqrt();
            norm(&mut entries, format!("{tier}.w1"), vec![sa_in, cfg.sa_hidden], x1, &mut rng);
            entries.insert(format!("{tier}.b1"), Tensor::zeros(vec![cfg.sa_hidden]));
            norm(&mut entries, format!("{tier}.w2"), vec![cfg.sa_hidden, d], x2, &mut rng);
            entries.insert(format!("{tier}.b2"), Tensor::zeros(vec![d]));
        }
        let d_ff = d * cfg.ffn_mult;
        for layer in 0..cfg.n_layers {
            let p = format!("layer{layer}");
            entries.insert(format!("{p}.ln1.gamma"), Tensor::ones(vec![d]));
            entries.insert(format!("{p}.ln1.beta"), Tensor::zeros(vec![d]));
            entries.insert(format!("{p}.ln2.gamma"), Tensor::ones(vec![d]));
            entries.insert(format!("{p}.ln2.beta"), Tensor::zeros(vec![d]));
            for h in 0..cfg.heads {
                norm(&mut entries, format!("{p}.attn.q{h}"), vec![d, cfg.d_k], std, &mut rng);
                norm(&mut entries, format!("{p}.attn.k{h}"), vec![d, cfg.d_k], std, &mut rng);
                norm(&mut entries, format!("{p}.attn.v{h}"), vec![d, cfg.d_k], std, &mut rng);
            }
            if cfg.is_magnifier_layer(layer) {
                for h in 0..cfg.heads {
                    norm(&mut entries, format!("{p}.attn.dk{h}"), vec![d, cfg.d_k], std, &mut rng);
                    norm(&mut entries, format!("{p}.attn.dv{h}"), vec![d, cfg.d_k], std, &mut rng);
                }
            }
            norm(&mut entries, format!("{p}.attn.o"), vec![d, d], std, &mut rng);
            norm(&mut entries, format!("{p}.ffn.w1"), vec![d, d_ff], std, &mut rng);
            entries.insert(format!("{p}.ffn.b1"), Tensor::zeros(vec![d_ff]));
            norm(&mut entries, format!("{p}.ffn.w2"), vec![d_ff, d], std, &mut rng);
            entries.insert(format!("{p}.ffn.b2"), Tensor::zeros(vec![d]));
        }
        Ok(ParamStore { entries })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    /// Replace an existing parameter; shapes must match.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let Some(slot) = self.entries.get_mut(name) else {
            return Err(Error::Config(format!("unknown parameter {name}")));
        };
        if slot.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Register every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
            .collect();
        BoundParams { vars }
    }

    fn attention_vars(&self, bound: &BoundParams, cfg: &ModelConfig, layer: usize) -> AttentionLayerVars {
        let p = format!("layer{layer}");
        let per_head = |stem: &str| -> Vec<VarId> {
            (0..cfg.heads).map(|h| bound.get(&format!("{p}.attn.{stem}{h}"))).collect()
        };
        let magnifier = cfg.is_magnifier_layer(layer);
        AttentionLayerVars {
            w_q: per_head("q"),
            w_k: per_head("k"),
            w_v: per_head("v"),
            w_dense_k: magnifier.then(|| per_head("dk")),
            w_dense_v: magnifier.then(|| per_head("dv")),
            w_o: bound.get(&format!("{p}.attn.o")),
            d_k: cfg.d_k,
        }
    }

    fn sa_vars(&self, bound: &BoundParams, tier: &str) -> SaParamVars {
        SaParamVars {
            w1: bound.get(&format!("{tier}.w1")),
            b1: bound.get(&format!("{tier}.b1")),
            w2: bound.get(&format!("{tier}.w2")),
            b2: bound.get(&format!("{tier}.b2")),
        }
    }
}

// ── Forward pass ─────────────────────────────────────────────────────

/// A scene with its tokenization geometry precomputed.
#[derive(Clone, Debug)]
pub struct PreparedScene<T: Scalar> {
    pub field: SceneField<T>,
    pub plan: ScenePlan<T>,
}

impl<T: Scalar> PreparedScene<T> {
    pub fn prepare(field: SceneField<T>, cfg: &ModelConfig) -> Result<Self> {
        let plan = plan_scene(&field, cfg)?;
        Ok(PreparedScene { field, plan })
    }
}

/// How magnifier layers obtain their selection.
#[derive(Clone, Copy, Debug)]
pub enum SelectionOverride<'a> {
    /// Selector pipeline as configured.
    Normal,
    /// Use these masks, one per magnifier layer.
    Frozen(&'a [SelectionMask]),
    /// Keep the top `ceil(frac·S)` scoring regions instead of thresholding;
    /// pins selection cardinality so structural cost comparisons are exact.
    TopK { frac: f64 },
}

pub struct ForwardOutput<T: Scalar> {
    pub logits: VarId,
    pub records: Vec<AttentionRecord<T>>,
    /// Per layer; `None` on standard layers.
    pub selections: Vec<Option<SelectionMask>>,
    /// Multiply-accumulates spent building tokens (both tiers).
    pub tokenize_macs: u64,
    /// Multiply-accumulates spent inside the transformer (everything else).
    pub transformer_macs: u64,
    /// Tape handles of the bound parameters, for gradient extraction.
    pub bound: BoundParams,
}

impl<T: Scalar> ForwardOutput<T> {
    /// Mean selected fraction across magnifier layers (None without any).
    pub fn selected_frac_mean(&self) -> Option<f64> {
        let fracs: Vec<f64> = self
            .selections
            .iter()
            .flatten()
            .map(|m| m.selected_fraction())
            .collect();
        (!fracs.is_empty()).then(|| fracs.iter().sum::<f64>() / fracs.len() as f64)
    }
}

pub struct Forward<'a, T: Scalar> {
    pub scene: &'a PreparedScene<T>,
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn run(
        &self,
        tape: &mut Tape<T>,
        layout: &SequenceLayout,
        phase: Phase,
        select_rng: &mut rand_chacha::ChaCha8Rng,
        over: SelectionOverride<'_>,
    ) -> Result<ForwardOutput<T>> {
        let cfg = self.cfg;
        if layout.vision_len != cfg.vision_token_num {
            return Err(Error::Layout(format!(
                "layout vision_len {} != configured {}",
                layout.vision_len, cfg.vision_token_num
            )));
        }
        let s = cfg.vision_token_num;
        let base_macs = tape.macs();
        let mut tokenize_macs = 0u64;
        let bound = self.params.bind(tape);

        // coarse tier
        let before = tape.macs();
        let sparse = build_sparse_tokens_planned(
            tape,
            &self.scene.plan,
            cfg,
            &self.params.sa_vars(&bound, "sa_sparse"),
        )?;
        tokenize_macs += tape.macs() - before;

        // text embedding with absolute-position sinusoids
        let text_ids = layout.text_ids();
        if text_ids.is_empty() {
            return Err(Error::Layout("sequence has no text tokens".into()));
        }
        let idx: Vec<usize> = text_ids.iter().map(|&t| t as usize).collect();
        let tok = tape.gather_rows(bound.get("embed.tok"), &idx)?;
        let pe = tape.constant(sinusoidal_1d(s, idx.len(), cfg.d_model)?);
        let text = tape.add(tok, pe)?;

        let mut h = tape.concat(&[sparse.tokens, text], 0)?;

        let dense_params = self.params.sa_vars(&bound, "sa_dense");
        let mut cache = DenseRegionCache::new();
        let mut records: Vec<AttentionRecord<T>> = Vec::with_capacity(cfg.n_layers);
        let mut selections: Vec<Option<SelectionMask>> = Vec::with_capacity(cfg.n_layers);
        let mut frozen_iter = match over {
            SelectionOverride::Frozen(masks) => Some(masks.iter()),
            _ => None,
        };

        let eps = T::from64(1e-5);
        for layer in 0..cfg.n_layers {
            let p = format!("layer{layer}");
            let ln1 = tape.layer_norm(
                h,
                bound.get(&format!("{p}.ln1.gamma")),
                bound.get(&format!("{p}.ln1.beta")),
                eps,
            )?;
            let vars = self.params.attention_vars(&bound, cfg, layer);
            let (attn_out, record) = if !cfg.is_magnifier_layer(layer) {
                selections.push(None);
                standard_self_attention(tape, ln1, &vars, layer, s, cfg.head_agg)?
            } else {
                let selection = match &mut frozen_iter {
                    Some(it) => it
                        .next()
                        .cloned()
                        .ok_or_else(|| Error::Config("frozen selections exhausted".into()))?,
                    None => {
                        let prev = records
                            .last()
                            .expect("n_sa >= 1 guarantees a predecessor record");
                        let qpos =
                            choose_query_position(s, layout.instruction.len(), phase)?;
                        let row = extract_query_row(prev, qpos)?;
                        let scores = normalize_to_u8(&row);
                        match over {
                            SelectionOverride::TopK { frac } => top_k_selection(
                                &scores,
                                cfg.threshold,
                                frac,
                            ),
                            _ => select(
                                &scores,
                                cfg.threshold,
                                cfg.select_strategy,
                                select_rng,
                                cfg.max_select_frac,
                            ),
                        }
                    }
                };
                let before = tape.macs();
                let batch = build_dense_tokens(
                    tape,
                    &self.scene.field,
                    &selection,
                    &self.scene.plan.centers,
                    cfg,
                    &dense_params,
                    &mut cache,
                )?;
                tokenize_macs += tape.macs() - before;
                let attach = batch.as_ref().map(|b| DenseAttachment {
                    tokens: b.tokens,
                    owners: &b.owner_sparse_index,
                });
                let out = adaptive_self_attention(
                    tape,
                    ln1,
                    attach,
                    &selection,
                    &vars,
                    layer,
                    s,
                    cfg.head_agg,
                )?;
                selections.push(Some(selection));
                out
            };
            records.push(record);
            h = tape.add(h, attn_out)?;

            let ln2 = tape.layer_norm(
                h,
                bound.get(&format!("{p}.ln2.gamma")),
                bound.get(&format!("{p}.ln2.beta")),
                eps,
            )?;
            let f1 = tape.matmul(ln2, bound.get(&format!("{p}.ffn.w1")))?;
            let f1 = tape.add_bias(f1, bound.get(&format!("{p}.ffn.b1")))?;
            let f1 = tape.gelu(f1)?;
            let f2 = tape.matmul(f1, bound.get(&format!("{p}.ffn.w2")))?;
            let f2 = tape.add_bias(f2, bound.get(&format!("{p}.ffn.b2")))?;
            h = tape.add(h, f2)?;
        }
        let hf = tape.layer_norm(h, bound.get("final_ln.gamma"), bound.get("final_ln.beta"), eps)?;
        let logits = tape.matmul(hf, bound.get("head.lm"))?;

        let transformer_macs = tape.macs() - base_macs - tokenize_macs;
        Ok(ForwardOutput { logits, records, selections, tokenize_macs, transformer_macs, bound })
    }

    /// Forward plus cross-entropy on the answer span.
    pub fn run_with_loss(
        &self,
        tape: &mut Tape<T>,
        layout: &SequenceLayout,
        select_rng: &mut rand_chacha::ChaCha8Rng,
        over: SelectionOverride<'_>,
    ) -> Result<(VarId, ForwardOutput<T>)> {
        if layout.answer.is_empty() {
            return Err(Error::Layout("answer span must be non-empty for training".into()));
        }
        let out = self.run(tape, layout, Phase::Training, select_rng, over)?;
        let rows: Vec<usize> = layout.answer_query_rows().collect();
        let targets: Vec<usize> = layout.answer.iter().map(|&t| t as usize).collect();
        let picked = tape.gather_rows(out.logits, &rows)?;
        let loss = tape.cross_entropy(picked, &targets)?;
        Ok((loss, out))
    }
}

fn top_k_selection(scores: &[u8], threshold: u8, frac: f64) -> SelectionMask {
    let k = ((scores.len() as f64 * frac).ceil() as usize).clamp(1, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order.into_iter().take(k).collect();
    selected.sort_unstable();
    SelectionMask {
        scores_u8: scores.to_vec(),
        threshold,
        selected,
        strategy: SelectStrategy::AttentionMap,
    }
}

// ── Optimizer ────────────────────────────────────────────────────────

/// AdamW with decoupled weight decay. Moments are kept at f64 regardless of
/// the model dtype so schedules behave identically across precisions.
pub struct AdamW {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: usize,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        tc: &TrainConfig,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - tc.adam_beta1.powi(t);
        let bc2 = 1.0 - tc.adam_beta2.powi(t);
        for (name, tensor) in params.entries.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let n = tensor.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut data = tensor.data().to_vec();
            for i in 0..n {
                let g = grad.data()[i].to64();
                m[i] = tc.adam_beta1 * m[i] + (1.0 - tc.adam_beta1) * g;
                v[i] = tc.adam_beta2 * v[i] + (1.0 - tc.adam_beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let p = data[i].to64();
                let update = m_hat / (v_hat.sqrt() + tc.adam_eps) + tc.weight_decay * p;
                data[i] = T::from64(p - lr * update);
            }
            *tensor = Tensor::new(tensor.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

// ── Training ─────────────────────────────────────────────────────────

/// One training example: a prepared scene and its QA text spans.
#[derive(Clone)]
pub struct TrainSample<T: Scalar> {
    pub scene: Arc<PreparedScene<T>>,
    pub instruction: Vec<u32>,
    pub answer: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub selected_frac_mean: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub params: ParamStore<T>,
    pub metrics: Vec<StepMetrics>,
}

/// Train from scratch on the given samples. Batches are drawn from a seeded
/// shuffle; batch items run in parallel but gradients are summed in example
/// order, so the loss curve is a pure function of (samples, cfg, tcfg).
pub fn train<T: Scalar>(
    samples: &[TrainSample<T>],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&StepMetrics)>,
) -> Result<TrainOutcome<T>> {
    if samples.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    let mut params = ParamStore::<T>::init(cfg)?;
    let mut adam = AdamW::new();
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = crate::rng_from_seed(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut cursor = samples.len(); // force an initial shuffle

    for step in 0..tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            if cursor >= order.len() {
                use rand::seq::SliceRandom;
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let results: Vec<Result<(f64, f64, BTreeMap<String, Tensor<T>>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(bi, &si)| {
                let sample = &samples[si];
                let layout = SequenceLayout::new(
                    cfg.vision_token_num,
                    sample.instruction.clone(),
                    sample.answer.clone(),
                )?;
                let fwd = Forward { scene: &sample.scene, cfg, params: &params };
                let mut tape = Tape::new();
                let mut sel_rng = crate::rng_from_seed(
                    cfg.seed ^ (step as u64).wrapping_mul(0x517c_c1b7_2722_0a95) ^ bi as u64,
                );
                let (loss, out) =
                    fwd.run_with_loss(&mut tape, &layout, &mut sel_rng, SelectionOverride::Normal)?;
                let loss_val = tape.value(loss).item()?.to64();
                let grads = tape.backward(loss)?;
                let named = collect_named_grads(&out.bound, grads);
                Ok((loss_val, out.selected_frac_mean().unwrap_or(0.0), named))
            })
            .collect();

        let mut loss_sum = 0.0;
        let mut frac_sum = 0.0;
        let mut grad_sum: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for r in results {
            let (loss_val, frac, named) = r?;
            loss_sum += loss_val;
            frac_sum += frac;
            for (name, g) in named {
                match grad_sum.get_mut(&name) {
                    Some(acc) => *acc = crate::tensor::add(acc, &g)?,
                    None => {
                        grad_sum.insert(name, g);
                    }
                }
            }
        }
        let batch_f = tcfg.batch_size as f64;
        let loss = loss_sum / batch_f;
        if !loss.is_finite() {
            return Err(Error::NanLoss { step });
        }
        let inv = T::from64(1.0 / batch_f);
        for g in grad_sum.values_mut() {
            *g = crate::tensor::scale(g, inv)?;
        }
        if let Some(max_norm) = tcfg.grad_clip {
            clip_global_norm(&mut grad_sum, max_norm)?;
        }
        let lr = cosine_lr(tcfg, step, tcfg.steps);
        adam.step(&mut params, &grad_sum, tcfg, lr)?;

        let record = StepMetrics { step, loss, lr, selected_frac_mean: frac_sum / batch_f };
        if step % tcfg.log_every == 0 || step + 1 == tcfg.steps {
            if let Some(cb) = progress.as_deref_mut() {
                cb(&record);
            }
        }
        metrics.push(record);
        if let Some(stop) = tcfg.stop_below_loss {
            if loss < stop {
                break;
            }
        }
    }
    Ok(TrainOutcome { params, metrics })
}

fn collect_named_grads<T: Scalar>(
    bound: &BoundParams,
    mut grads: Gradients<T>,
) -> BTreeMap<String, Tensor<T>> {
    let mut named = BTreeMap::new();
    for (name, &id) in &bound.vars {
        if let Some(g) = grads.take(id) {
            named.insert(name.clone(), g);
        }
    }
    named
}

fn clip_global_norm<T: Scalar>(
    grads: &mut BTreeMap<String, Tensor<T>>,
    max_norm: f64,
) -> Result<()> {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            let v = v.to64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = T::from64(max_norm / norm);
        for g in grads.values_mut() {
            *g = crate::tensor::scale(g, factor)?;
        }
    }
    Ok(())
}

// ── Generation ───────────────────────────────────────────────────────

/// Decode result with the statistics of the first decoding forward.
pub struct GenerateStats {
    pub tokens: Vec<u32>,
    /// Selected fraction per magnifier layer at the first step.
    pub selected_frac_per_layer: Vec<f64>,
    pub transformer_macs: u64,
    pub tokenize_macs: u64,
}

/// Greedy decoding: selection is recomputed every step from the current
/// last token; stops at `eos` or `max_len`.
pub fn generate<T: Scalar>(
    scene: &PreparedScene<T>,
    instruction: &[u32],
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    max_len: usize,
    eos: u32,
) -> Result<Vec<u32>> {
    Ok(generate_with_stats(scene, instruction, cfg, params, max_len, eos)?.tokens)
}

pub fn generate_with_stats<T: Scalar>(
    scene: &PreparedScene<T>,
    instruction: &[u32],
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    max_len: usize,
    eos: u32,
) -> Result<GenerateStats> {
    let fwd = Forward { scene, cfg, params };
    let mut answer: Vec<u32> = Vec::new();
    let mut stats = GenerateStats {
        tokens: Vec::new(),
        selected_frac_per_layer: Vec::new(),
        transformer_macs: 0,
        tokenize_macs: 0,
    };
    for step in 0..max_len {
        let layout =
            SequenceLayout::new(cfg.vision_token_num, instruction.to_vec(), answer.clone())?;
        let mut tape = Tape::new();
        let mut sel_rng = crate::rng_from_seed(
            cfg.seed ^ 0xdec0_de00 ^ (step as u64).wrapping_mul(0x2545_f491_4f6c_dd1d),
        );
        let out = fwd.run(
            &mut tape,
            &layout,
            Phase::Decode { generated: answer.len() },
            &mut sel_rng,
            SelectionOverride::Normal,
        )?;
        if step == 0 {
            stats.selected_frac_per_layer = out
                .selections
                .iter()
                .flatten()
                .map(|m| m.selected_fraction())
                .collect();
            stats.transformer_macs = out.transformer_macs;
            stats.tokenize_macs = out.tokenize_macs;
        }
        let logits = tape.value(out.logits);
        let last = logits.row(logits.rows() - 1);
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        let token = best as u32;
        if token == eos {
            break;
        }
        answer.push(token);
    }
    stats.tokens = answer;
    Ok(stats)
}

// ── Checkpointing ────────────────────────────────────────────────────
//
// Versioned binary of named tensors: header {magic "MGCK", u32 version,
// u32 dtype byte-width, u64 entry count}, then per entry {u32 name length,
// name bytes, u32 rank, u64 extents…, data little-endian}. A JSON sidecar
// at <path>.json holds the ModelConfig.

const CKPT_MAGIC: &[u8; 4] = b"MGCK";

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(std::mem::size_of::<T>() as u32).to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            if std::mem::size_of::<T>() == 8 {
                w.write_all(&v.to64().to_le_bytes())?;
            } else {
                w.write_all(&(v.to64() as f32).to_le_bytes())?;
            }
        }
    }
    drop(w);
    let sidecar = path.with_extension("json");
    std::fs::write(sidecar, serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelConfig, ParamStore<T>)> {
    let path = path.as_ref();
    let cfg: ModelConfig =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 20];
    r.read_exact(&mut head)?;
    if &head[0..4] != CKPT_MAGIC {
        return Err(Error::Format { op: "checkpoint", detail: "bad magic".into() });
    }
    let width = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    if width != std::mem::size_of::<T>() {
        return Err(Error::Format {
            op: "checkpoint",
            detail: format!("dtype width {} does not match {}", width, T::DTYPE),
        });
    }
    let count = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let name_len = u32::from_le_bytes(b4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Format { op: "checkpoint", detail: e.to_string() })?;
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            if width == 8 {
                let mut b8 = [0u8; 8];
                r.read_exact(&mut b8)?;
                data.push(T::from64(f64::from_le_bytes(b8)));
            } else {
                r.read_exact(&mut b4)?;
                data.push(T::from64(f32::from_le_bytes(b4) as f64));
            }
        }
        entries.insert(name, Tensor::new(shape, data)?);
    }
    Ok((cfg, ParamStore { entries }))
}
