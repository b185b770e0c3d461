//! Model and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-head attention maps are aggregated into the map the selector reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAgg {
    Mean,
    Max,
}

/// Center sampler for the coarse tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Farthest-point sampling, deterministic given the scene.
    Fps,
    /// Uniform sampling from a seeded per-scene stream.
    Random,
}

/// How the magnifier picks regions for dense retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectStrategy {
    /// Threshold the normalized attention row (the mechanism under test).
    AttentionMap,
    /// Uniform random regions of the same cardinality (ablation control).
    Random,
}

/// Architecture and selector hyperparameters.
///
/// Desk-scale defaults: 4 layers split 2+2, d_model 64, 4 heads, 128 sparse
/// vision tokens, 4 dense tokens per selected region, selection threshold 96.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Total transformer layers N.
    pub n_layers: usize,
    /// Leading standard self-attention layers.
    pub n_sa: usize,
    /// Trailing magnifier layers (selector + adaptive attention).
    pub n_ma: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Per-head dimension; heads · d_k = d_model.
    pub d_k: usize,
    pub vocab_size: usize,

    /// Sparse vision token count S.
    pub vision_token_num: usize,
    /// Dense tokens per selected region K. 0 disables dense retrieval, which
    /// turns every magnifier layer into a standard layer (used by the
    /// complexity probe as the exact-baseline switch).
    pub dense_token_num: usize,
    /// Selection threshold on the 0–255 normalized attention row.
    pub threshold: u8,
    /// Optional cap on the selected fraction of sparse tokens (off by default).
    pub max_select_frac: Option<f64>,

    /// Points kept when downsampling the raw field for the coarse tier.
    pub downsample_points: usize,
    /// Grouping radius of the coarse set-abstraction stage (meters).
    pub region_radius: f64,
    /// Dense retrieval radius around a selected region center (meters);
    /// half the region radius by default so dense tokens refine rather than
    /// re-cover the coarse region.
    pub dense_radius: f64,

    pub head_agg: HeadAgg,
    pub sampler: Sampler,
    pub select_strategy: SelectStrategy,
    pub seed: u64,

    /// Neighbors pooled per sparse token.
    pub sparse_group_size: usize,
    /// Neighbors pooled per dense token.
    pub dense_group_size: usize,
    /// Cap on full-resolution points gathered per selected region.
    pub dense_ball_max_points: usize,
    /// Hidden width of the shared pointwise map in both set-abstraction stages.
    pub sa_hidden: usize,
    /// Feed-forward expansion factor.
    pub ffn_mult: usize,
    /// Per-point feature width d_f of the scenes this model reads; fixes the
    /// input width of the set-abstraction maps. Set from the dataset.
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_sa: 2,
            n_ma: 2,
            heads: 4,
            d_model: 64,
            d_k: 16,
            vocab_size: 0, // filled from the vocabulary in use
            vision_token_num: 128,
            dense_token_num: 4,
            threshold: 96,
            max_select_frac: None,
            downsample_points: 4096,
            region_radius: 2.5,
            dense_radius: 1.25,
            head_agg: HeadAgg::Mean,
            sampler: Sampler::Fps,
            select_strategy: SelectStrategy::AttentionMap,
            seed: 0,
            sparse_group_size: 32,
            dense_group_size: 16,
            dense_ball_max_points: 256,
            sa_hidden: 64,
            ffn_mult: 4,
            feature_dim: 0, // filled from the dataset
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_sa + self.n_ma != self.n_layers {
            return fail(format!(
                "n_sa ({}) + n_ma ({}) must equal n_layers ({})",
                self.n_sa, self.n_ma, self.n_layers
            ));
        }
        if self.n_ma > 0 && self.n_sa < 1 {
            return fail("the first magnifier layer needs at least one standard predecessor".into());
        }
        if self.heads == 0 || self.d_k == 0 || self.heads * self.d_k != self.d_model {
            return fail(format!(
                "heads ({}) x d_k ({}) must equal d_model ({})",
                self.heads, self.d_k, self.d_model
            ));
        }
        if self.vision_token_num == 0 {
            return fail("vision_token_num must be >= 1".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be set".into());
        }
        if self.region_radius <= 0.0 || self.dense_radius <= 0.0 {
            return fail("radii must be positive".into());
        }
        if self.downsample_points < self.vision_token_num {
            return fail(format!(
                "downsample_points ({}) must cover vision_token_num ({})",
                self.downsample_points, self.vision_token_num
            ));
        }
        if self.sparse_group_size == 0 || self.dense_group_size == 0 || self.sa_hidden == 0 {
            return fail("set-abstraction sizes must be >= 1".into());
        }
        if let Some(f) = self.max_select_frac {
            if !(0.0..=1.0).contains(&f) {
                return fail(format!("max_select_frac {f} outside [0,1]"));
            }
        }
        Ok(())
    }

    /// True when layer index `layer` (0-based) runs the magnifier path.
    pub fn is_magnifier_layer(&self, layer: usize) -> bool {
        layer >= self.n_sa
    }
}

/// Optimizer and schedule settings for [`crate::model::train`].
///
/// Desk-scale schedule: AdamW with weight decay 0.1, cosine decay from
/// 3e-4 to 3e-5 (a from-scratch toy model stalls at fine-tuning-scale rates).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; None disables clipping.
    pub grad_clip: Option<f64>,
    /// Emit a metrics record every this many steps (and on the last step).
    pub log_every: usize,
    /// Abort early once the running mean loss drops below this value.
    pub stop_below_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr_max: 3e-4,
            lr_min: 3e-5,
            weight_decay: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            log_every: 25,
            stop_below_loss: None,
        }
    }
}

/// Cosine-annealed learning rate at `step` of `total` steps.
pub fn cosine_lr(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return cfg.lr_max;
    }
    let t = step as f64 / (total - 1) as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}
