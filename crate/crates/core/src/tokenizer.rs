//! Two-tier scene tokenization.
//!
//! Sparse vision tokens give the transformer a fixed-budget coarse view:
//! the raw field is downsampled, S centers are sampled, and each center
//! pools a wide neighborhood through set abstraction. Dense vision tokens
//! are built on demand per magnifier layer: each selected region goes back
//! to the FULL-resolution field and pools K narrow sub-neighborhoods, so
//! fine detail (and feature binding lost to wide pooling) is recovered
//! exactly where the model is looking.
//!
//! Token counts are decided by config, never by scene size: the transformer
//! sees S + text positions regardless of how many points the scene has.

use std::collections::HashMap;

use crate::config::{ModelConfig, Sampler};
use crate::error::{Error, Result};
use crate::pointcloud::{
    ball_query, farthest_point_sample, sa_aggregate, sa_aggregate_at, RegionQuery, SaParamVars,
    SceneField,
};
use crate::scalar::Scalar;
use crate::selector::SelectionMask;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Coarse scene tokens plus the geometry needed to magnify them later.
#[derive(Clone, Copy, Debug)]
pub struct SparseTokenSet<'a, T: Scalar> {
    /// S×d_model token matrix on the tape.
    pub tokens: VarId,
    /// S×3 region centers (meters).
    pub centers: &'a Tensor<T>,
    pub region_radius: T,
    pub source_scene: &'a str,
}

/// Dense tokens retrieved for the selected regions of one magnifier layer.
#[derive(Clone, Debug)]
pub struct DenseTokenBatch<T: Scalar> {
    /// (R·K)×d_model token matrix on the tape.
    pub tokens: VarId,
    /// Sparse-token owner of each dense token; every owner appears exactly
    /// K times, in ascending owner order.
    pub owner_sparse_index: Vec<usize>,
    /// Dense tokens per region.
    pub k: usize,
    /// (R·K)×3 sub-center coordinates.
    pub centers: Tensor<T>,
}

/// Parameter-independent tokenization geometry for one scene: the
/// downsampled field and the chosen sparse centers. Computing this once per
/// scene and reusing it across forward passes skips the expensive FPS work;
/// the token values themselves are recomputed per pass (they depend on
/// parameters).
#[derive(Clone, Debug)]
pub struct ScenePlan<T: Scalar> {
    pub downsampled: SceneField<T>,
    pub center_indices: Vec<usize>,
    pub centers: Tensor<T>,
}

/// Per-forward-pass cache of dense-region geometry keyed by sparse-token
/// index, so selections that repeat a region across magnifier layers reuse
/// its ball query and sub-center sampling. Single-writer within a pass.
#[derive(Default)]
pub struct DenseRegionCache<T: Scalar> {
    regions: HashMap<usize, DenseRegionGeometry<T>>,
}

#[derive(Clone, Debug)]
struct DenseRegionGeometry<T: Scalar> {
    region: SceneField<T>,
    sub_centers: Vec<[T; 3]>,
}

impl<T: Scalar> DenseRegionCache<T> {
    pub fn new() -> Self {
        DenseRegionCache { regions: HashMap::new() }
    }
}

/// Downsample the field and choose sparse-token centers.
pub fn plan_scene<T: Scalar>(field: &SceneField<T>, cfg: &ModelConfig) -> Result<ScenePlan<T>> {
    let s = cfg.vision_token_num;
    if field.len() < s {
        return Err(Error::Cardinality {
            op: "plan_scene",
            requested: s,
            available: field.len(),
        });
    }
    let keep = cfg.downsample_points.min(field.len()).max(s);
    let downsampled = if keep == field.len() {
        field.clone()
    } else {
        let indices = sample_indices(field, keep, cfg)?;
        field.subset(&indices)?
    };
    let center_indices = sample_indices(&downsampled, s, cfg)?;
    let flat: Vec<T> = center_indices
        .iter()
        .flat_map(|&i| downsampled.position(i))
        .collect();
    let centers = Tensor::new(vec![s, 3], flat)?;
    Ok(ScenePlan { downsampled, center_indices, centers })
}

fn sample_indices<T: Scalar>(
    field: &SceneField<T>,
    n: usize,
    cfg: &ModelConfig,
) -> Result<Vec<usize>> {
    match cfg.sampler {
        Sampler::Fps => farthest_point_sample(field, n, 0),
        Sampler::Random => {
            if n > field.len() {
                return Err(Error::Cardinality {
                    op: "sample_indices",
                    requested: n,
                    available: field.len(),
                });
            }
            let seed = cfg.seed ^ crate::stable_hash(field.scene_id());
            let mut rng = crate::rng_from_seed(seed);
            let mut picked = rand::seq::index::sample(&mut rng, field.len(), n).into_vec();
            picked.sort_unstable();
            Ok(picked)
        }
    }
}

/// Build the sparse token set from a precomputed plan. Tokens are the wide
/// set-abstraction pool plus a fixed sinusoidal embedding of their centers.
pub fn build_sparse_tokens_planned<'a, T: Scalar>(
    tape: &mut Tape<T>,
    plan: &'a ScenePlan<T>,
    cfg: &ModelConfig,
    params: &SaParamVars,
) -> Result<SparseTokenSet<'a, T>> {
    let (pooled, _) = sa_aggregate(
        tape,
        &plan.downsampled,
        &plan.center_indices,
        T::from64(cfg.region_radius),
        cfg.sparse_group_size,
        params,
    )?;
    let pe = tape.constant(sinusoidal_3d(&plan.centers, cfg.d_model)?);
    let tokens = tape.add(pooled, pe)?;
    Ok(SparseTokenSet {
        tokens,
        centers: &plan.centers,
        region_radius: T::from64(cfg.region_radius),
        source_scene: plan.downsampled.scene_id(),
    })
}

/// Plan the scene, then build its sparse tokens.
pub fn build_sparse_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    field: &SceneField<T>,
    cfg: &ModelConfig,
    params: &SaParamVars,
) -> Result<(ScenePlan<T>, VarId)> {
    let plan = plan_scene(field, cfg)?;
    let tokens = build_sparse_tokens_planned(tape, &plan, cfg, params)?.tokens;
    Ok((plan, tokens))
}

/// Retrieve K dense tokens for every selected region, reading the
/// full-resolution field.
///
/// Per region: ball-query the full field around the sparse token's center at
/// `dense_radius`, farthest-point sample K sub-centers inside the ball
/// (seeded at the nearest full-resolution point to the region center), and
/// pool a narrow neighborhood (`dense_radius`/2) around each sub-center.
/// Returns None when the selection is empty or K = 0.
pub fn build_dense_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    full_field: &SceneField<T>,
    selection: &SelectionMask,
    sparse_centers: &Tensor<T>,
    cfg: &ModelConfig,
    params: &SaParamVars,
    cache: &mut DenseRegionCache<T>,
) -> Result<Option<DenseTokenBatch<T>>> {
    let k = cfg.dense_token_num;
    if selection.selected.is_empty() || k == 0 {
        return Ok(None);
    }
    let dense_radius = T::from64(cfg.dense_radius);
    let sub_radius = T::from64(cfg.dense_radius * 0.5);

    let mut owners = Vec::with_capacity(selection.selected.len() * k);
    let mut parts = Vec::with_capacity(selection.selected.len());
    let mut center_rows: Vec<T> = Vec::with_capacity(selection.selected.len() * k * 3);
    for &sparse_idx in &selection.selected {
        if sparse_idx >= sparse_centers.rows() {
            return Err(Error::IndexOutOfBounds {
                op: "build_dense_tokens",
                index: sparse_idx,
                len: sparse_centers.rows(),
            });
        }
        if !cache.regions.contains_key(&sparse_idx) {
            let row = sparse_centers.row(sparse_idx);
            let center = [row[0], row[1], row[2]];
            let q = RegionQuery::new(center, dense_radius, cfg.dense_ball_max_points)?;
            // full-resolution distance scan: the scene-size-dependent part
            // of dense retrieval, charged to the tokenization cost
            tape.count_external_macs((full_field.len() * 3) as u64);
            let members = ball_query(full_field, &q);
            let region = full_field.subset(&members)?;
            // ball members are distance-sorted, so index 0 seeds FPS at the
            // nearest full-resolution point to the region center
            let n_sub = k.min(region.len());
            tape.count_external_macs((region.len() * n_sub * 3) as u64);
            let picked = farthest_point_sample(&region, n_sub, 0)?;
            let mut sub_centers: Vec<[T; 3]> =
                picked.iter().map(|&i| region.position(i)).collect();
            while sub_centers.len() < k {
                let repeat = sub_centers[sub_centers.len() % n_sub];
                sub_centers.push(repeat); // sparse region: cycle sub-centers
            }
            cache
                .regions
                .insert(sparse_idx, DenseRegionGeometry { region, sub_centers });
        }
        let geo = &cache.regions[&sparse_idx];
        let pooled = sa_aggregate_at(
            tape,
            &geo.region,
            &geo.sub_centers,
            sub_radius,
            cfg.dense_group_size,
            params,
        )?;
        let sub_center_mat = {
            let flat: Vec<T> = geo.sub_centers.iter().flat_map(|c| c.iter().copied()).collect();
            Tensor::new(vec![k, 3], flat)?
        };
        let pe = tape.constant(sinusoidal_3d(&sub_center_mat, cfg.d_model)?);
        parts.push(tape.add(pooled, pe)?);
        owners.extend(std::iter::repeat(sparse_idx).take(k));
        center_rows.extend(sub_center_mat.data().iter().copied());
    }
    let tokens = tape.concat(&parts, 0)?;
    let centers = Tensor::new(vec![owners.len(), 3], center_rows)?;
    Ok(Some(DenseTokenBatch { tokens, owner_sparse_index: owners, k, centers }))
}

// ── Positional embeddings ────────────────────────────────────────────

/// Positional embeddings are scaled down so token content (class/color
/// signatures, word identity) is not drowned out at initialization.
pub const POSENC_SCALE: f64 = 0.3;

/// Fixed sinusoidal embedding of 3-D coordinates: the width is split evenly
/// across x/y/z (any remainder is zero), each axis carrying interleaved
/// sin/cos at geometrically spaced frequencies.
pub fn sinusoidal_3d<T: Scalar>(centers: &Tensor<T>, d_model: usize) -> Result<Tensor<T>> {
    let n = centers.rows();
    let d_axis = d_model / 3;
    let mut out = vec![T::zero(); n * d_model];
    for i in 0..n {
        let row = centers.row(i);
        for axis in 0..3 {
            let coord = row[axis].to64();
            for j in 0..d_axis {
                let pair = (j / 2) as f64;
                let freq = 1.0 / 10000f64.powf(2.0 * pair / d_axis as f64);
                let angle = coord * freq;
                let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                out[i * d_model + axis * d_axis + j] = T::from64(POSENC_SCALE * v);
            }
        }
    }
    Tensor::new(vec![n, d_model], out)
}

/// Fixed sinusoidal embedding of absolute sequence positions
/// `offset..offset + n` (the text half of the sequence).
pub fn sinusoidal_1d<T: Scalar>(offset: usize, n: usize, d_model: usize) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); n * d_model];
    for i in 0..n {
        let pos = (offset + i) as f64;
        for j in 0..d_model {
            let pair = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d_model as f64);
            let angle = pos * freq;
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            out[i * d_model + j] = T::from64(POSENC_SCALE * v);
        }
    }
    Tensor::new(vec![n, d_model], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SelectStrategy;
    use crate::rng_from_seed;

    type T64 = Tensor<f64>;
    type F = SceneField<f64>;

    fn random_field(m: usize, d_f: usize, seed: u64, extent: f64) -> F {
        let mut rng = rng_from_seed(seed);
        F::new(
            format!("scene{seed}"),
            T64::rand_uniform(vec![m, 3], -extent, extent, &mut rng),
            T64::randn(vec![m, d_f], 1.0, &mut rng),
        )
        .unwrap()
    }

    fn tiny_cfg(s: usize, k: usize) -> ModelConfig {
        ModelConfig {
            vision_token_num: s,
            dense_token_num: k,
            downsample_points: 64,
            d_model: 12,
            d_k: 6,
            heads: 2,
            vocab_size: 10,
            region_radius: 3.0,
            dense_radius: 1.5,
            sparse_group_size: 8,
            dense_group_size: 4,
            dense_ball_max_points: 32,
            sa_hidden: 6,
            ..ModelConfig::default()
        }
    }

    fn sa_params(tape: &mut Tape<f64>, d_f: usize, hidden: usize, d_model: usize, seed: u64) -> SaParamVars {
        let mut rng = rng_from_seed(seed);
        SaParamVars {
            w1: tape.leaf(T64::randn(vec![3 + d_f, hidden], 0.4, &mut rng)),
            b1: tape.leaf(T64::randn(vec![hidden], 0.4, &mut rng)),
            w2: tape.leaf(T64::randn(vec![hidden, d_model], 0.4, &mut rng)),
            b2: tape.leaf(T64::randn(vec![d_model], 0.4, &mut rng)),
        }
    }

    #[test]
    fn sparse_token_count_follows_config() {
        for s in [16usize, 32] {
            let field = random_field(200, 2, 5, 4.0);
            let cfg = tiny_cfg(s, 4);
            let mut tape = Tape::new();
            let params = sa_params(&mut tape, 2, 6, cfg.d_model, 1);
            let (plan, tokens) = build_sparse_tokens(&mut tape, &field, &cfg, &params).unwrap();
            assert_eq!(tape.value(tokens).shape(), &[s, cfg.d_model]);
            assert_eq!(plan.centers.shape(), &[s, 3]);
        }
    }

    #[test]
    fn sparse_tokens_reject_tiny_scene() {
        let field = random_field(8, 2, 6, 1.0);
        let cfg = tiny_cfg(16, 4);
        let mut tape = Tape::new();
        let params = sa_params(&mut tape, 2, 6, cfg.d_model, 1);
        assert!(matches!(
            build_sparse_tokens(&mut tape, &field, &cfg, &params),
            Err(Error::Cardinality { .. })
        ));
    }

    #[test]
    fn degenerate_single_point_scene() {
        // one repeated point, S = 1: the token equals the plain set
        // abstraction of that point (plus its positional embedding)
        let pos = vec![0.5, -1.0, 2.0].repeat(5);
        let feat = vec![1.0; 5];
        let field = F::new(
            "dup",
            T64::new(vec![5, 3], pos).unwrap(),
            T64::new(vec![5, 1], feat).unwrap(),
        )
        .unwrap();
        let cfg = ModelConfig { vision_token_num: 1, downsample_points: 5, ..tiny_cfg(1, 2) };
        let mut tape = Tape::new();
        let params = sa_params(&mut tape, 1, 6, cfg.d_model, 2);
        let (plan, tokens) = build_sparse_tokens(&mut tape, &field, &cfg, &params).unwrap();
        assert_eq!(plan.centers.row(0), &[0.5, -1.0, 2.0]);

        let mut tape2 = Tape::new();
        let params2 = sa_params(&mut tape2, 1, 6, cfg.d_model, 2);
        let (raw, _) = sa_aggregate(
            &mut tape2,
            &field,
            &[0],
            cfg.region_radius,
            cfg.sparse_group_size,
            &params2,
        )
        .unwrap();
        let pe = sinusoidal_3d(&plan.centers, cfg.d_model).unwrap();
        let expect = crate::tensor::add(tape2.value(raw), &pe).unwrap();
        assert!(tape.value(tokens).max_abs_diff(&expect) < 1e-12);
    }

    fn selection_of(indices: &[usize], s: usize) -> SelectionMask {
        SelectionMask {
            scores_u8: vec![0; s],
            threshold: 0,
            selected: indices.to_vec(),
            strategy: SelectStrategy::AttentionMap,
        }
    }

    #[test]
    fn dense_batch_cardinality() {
        let field = random_field(300, 2, 7, 4.0);
        let cfg = tiny_cfg(16, 4);
        let mut tape = Tape::new();
        let sparse_params = sa_params(&mut tape, 2, 6, cfg.d_model, 1);
        let dense_params = sa_params(&mut tape, 2, 6, cfg.d_model, 2);
        let (plan, _) = build_sparse_tokens(&mut tape, &field, &cfg, &sparse_params).unwrap();
        let sel = selection_of(&[1, 5, 9], 16);
        let mut cache = DenseRegionCache::new();
        let batch = build_dense_tokens(
            &mut tape, &field, &sel, &plan.centers, &cfg, &dense_params, &mut cache,
        )
        .unwrap()
        .unwrap();
        assert_eq!(tape.value(batch.tokens).shape(), &[12, cfg.d_model]);
        assert_eq!(batch.owner_sparse_index, vec![1, 1, 1, 1, 5, 5, 5, 5, 9, 9, 9, 9]);
    }

    #[test]
    fn dense_single_region_owner_map() {
        let field = random_field(200, 1, 8, 3.0);
        let cfg = tiny_cfg(8, 2);
        let mut tape = Tape::new();
        let sparse_params = sa_params(&mut tape, 1, 6, cfg.d_model, 3);
        let dense_params = sa_params(&mut tape, 1, 6, cfg.d_model, 4);
        let (plan, _) = build_sparse_tokens(&mut tape, &field, &cfg, &sparse_params).unwrap();
        let sel = selection_of(&[3], 8);
        let mut cache = DenseRegionCache::new();
        let batch = build_dense_tokens(
            &mut tape, &field, &sel, &plan.centers, &cfg, &dense_params, &mut cache,
        )
        .unwrap()
        .unwrap();
        assert_eq!(batch.owner_sparse_index, vec![3, 3]);
        assert_eq!(batch.k, 2);
    }

    #[test]
    fn empty_selection_and_zero_k_yield_no_batch() {
        let field = random_field(200, 1, 9, 3.0);
        let cfg = tiny_cfg(8, 2);
        let mut tape = Tape::new();
        let sparse_params = sa_params(&mut tape, 1, 6, cfg.d_model, 3);
        let dense_params = sa_params(&mut tape, 1, 6, cfg.d_model, 4);
        let (plan, _) = build_sparse_tokens(&mut tape, &field, &cfg, &sparse_params).unwrap();
        let mut cache = DenseRegionCache::new();
        let none = build_dense_tokens(
            &mut tape,
            &field,
            &selection_of(&[], 8),
            &plan.centers,
            &cfg,
            &dense_params,
            &mut cache,
        )
        .unwrap();
        assert!(none.is_none());
        let cfg0 = ModelConfig { dense_token_num: 0, ..cfg };
        let none = build_dense_tokens(
            &mut tape,
            &field,
            &selection_of(&[1], 8),
            &plan.centers,
            &cfg0,
            &dense_params,
            &mut cache,
        )
        .unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn dense_centers_stay_within_dense_radius() {
        let field = random_field(400, 2, 11, 5.0);
        let cfg = tiny_cfg(16, 4);
        let mut tape = Tape::new();
        let sparse_params = sa_params(&mut tape, 2, 6, cfg.d_model, 5);
        let dense_params = sa_params(&mut tape, 2, 6, cfg.d_model, 6);
        let (plan, _) = build_sparse_tokens(&mut tape, &field, &cfg, &sparse_params).unwrap();
        let sel = selection_of(&[0, 7, 12], 16);
        let mut cache = DenseRegionCache::new();
        let batch = build_dense_tokens(
            &mut tape, &field, &sel, &plan.centers, &cfg, &dense_params, &mut cache,
        )
        .unwrap()
        .unwrap();
        for (row, &owner) in batch.owner_sparse_index.iter().enumerate() {
            let c = plan.centers.row(owner);
            let p = batch.centers.row(row);
            let d2: f64 = (0..3).map(|d| (p[d] - c[d]).powi(2)).sum();
            assert!(d2.sqrt() <= cfg.dense_radius + 1e-9);
        }
    }

    #[test]
    fn dense_build_is_deterministic() {
        let field = random_field(300, 2, 13, 4.0);
        let cfg = tiny_cfg(16, 4);
        let run = || {
            let mut tape = Tape::new();
            let sparse_params = sa_params(&mut tape, 2, 6, cfg.d_model, 5);
            let dense_params = sa_params(&mut tape, 2, 6, cfg.d_model, 6);
            let (plan, _) = build_sparse_tokens(&mut tape, &field, &cfg, &sparse_params).unwrap();
            let sel = selection_of(&[2, 4], 16);
            let mut cache = DenseRegionCache::new();
            let batch = build_dense_tokens(
                &mut tape, &field, &sel, &plan.centers, &cfg, &dense_params, &mut cache,
            )
            .unwrap()
            .unwrap();
            (tape.value(batch.tokens).clone(), batch.owner_sparse_index)
        };
        let (a_tokens, a_owners) = run();
        let (b_tokens, b_owners) = run();
        assert_eq!(a_tokens.data(), b_tokens.data());
        assert_eq!(a_owners, b_owners);
    }

    #[test]
    fn constant_token_count_across_scene_sizes() {
        let cfg = tiny_cfg(16, 4);
        let mut counts = Vec::new();
        for m in [150usize, 600, 2400] {
            let field = random_field(m, 2, 17, 5.0);
            let mut tape = Tape::new();
            let params = sa_params(&mut tape, 2, 6, cfg.d_model, 1);
            let (_, tokens) = build_sparse_tokens(&mut tape, &field, &cfg, &params).unwrap();
            counts.push(tape.value(tokens).shape()[0]);
        }
        assert_eq!(counts, vec![16, 16, 16]);
    }

    #[test]
    fn dense_tokens_separate_clusters_sparse_token_pools_them() {
        // two tight clusters with opposite feature signatures inside one
        // region: the coarse token max-pools both, the dense tokens keep
        // them apart; verified against explicit scalar evaluation.
        let mut pos = Vec::new();
        let mut feat = Vec::new();
        for i in 0..6 {
            let eps = i as f64 * 0.01;
            pos.extend([0.0 + eps, 0.0, 0.0]);
            feat.extend([1.0, 0.0]);
            pos.extend([1.0 - eps, 0.0, 0.0]);
            feat.extend([0.0, 1.0]);
        }
        let field = F::new(
            "clusters",
            T64::new(vec![12, 3], pos.clone()).unwrap(),
            T64::new(vec![12, 2], feat.clone()).unwrap(),
        )
        .unwrap();
        let cfg = ModelConfig {
            vision_token_num: 1,
            dense_token_num: 2,
            downsample_points: 12,
            d_model: 6,
            d_k: 3,
            heads: 2,
            vocab_size: 10,
            region_radius: 2.0,
            dense_radius: 1.2,
            sparse_group_size: 12,
            dense_group_size: 6,
            dense_ball_max_points: 12,
            sa_hidden: 4,
            ..ModelConfig::default()
        };
        let mut tape = Tape::new();
        let sparse_params = sa_params(&mut tape, 2, 4, 6, 21);
        let dense_params = sa_params(&mut tape, 2, 4, 6, 22);
        let (plan, sparse_tokens) =
            build_sparse_tokens(&mut tape, &field, &cfg, &sparse_params).unwrap();
        let sel = selection_of(&[0], 1);
        let mut cache = DenseRegionCache::new();
        let batch = build_dense_tokens(
            &mut tape, &field, &sel, &plan.centers, &cfg, &dense_params, &mut cache,
        )
        .unwrap()
        .unwrap();
        let dense_vals = tape.value(batch.tokens).clone();

        // the two dense sub-centers must land in different clusters (FPS
        // spreads them) and produce distinct tokens
        let c0 = batch.centers.row(0)[0];
        let c1 = batch.centers.row(1)[0];
        assert!((c0 - c1).abs() > 0.5, "sub-centers {c0} vs {c1}");
        let d01 = {
            let a = dense_vals.row(0);
            let b = dense_vals.row(1);
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max)
        };
        assert!(d01 > 1e-3, "dense tokens should differ across clusters");

        // hand evaluation of one dense token: explicit map + max over its
        // narrow group, plus the positional embedding
        let w1 = tape.value(dense_params.w1).clone();
        let b1 = tape.value(dense_params.b1).clone();
        let w2 = tape.value(dense_params.w2).clone();
        let b2 = tape.value(dense_params.b2).clone();
        let sub_center = [
            batch.centers.row(0)[0],
            batch.centers.row(0)[1],
            batch.centers.row(0)[2],
        ];
        let q = RegionQuery::new(sub_center, cfg.dense_radius * 0.5, cfg.dense_group_size).unwrap();
        // the region subset contains all 12 points (ball covers the scene)
        let region_members = ball_query(&field, &q);
        let mut members = region_members.clone();
        while members.len() < cfg.dense_group_size {
            members.push(members[0]);
        }
        let mut pooled = vec![f64::NEG_INFINITY; 6];
        for &i in &members {
            let input = [
                pos[i * 3] - sub_center[0],
                pos[i * 3 + 1] - sub_center[1],
                pos[i * 3 + 2] - sub_center[2],
                feat[i * 2],
                feat[i * 2 + 1],
            ];
            let mut hidden = vec![0.0f64; 4];
            for h in 0..4 {
                let mut acc = b1.data()[h];
                for (k, &x) in input.iter().enumerate() {
                    acc += x * w1.at2(k, h);
                }
                hidden[h] = crate::tensor::gelu_scalar(acc);
            }
            for o in 0..6 {
                let mut acc = b2.data()[o];
                for (h, &hv) in hidden.iter().enumerate() {
                    acc += hv * w2.at2(h, o);
                }
                pooled[o] = pooled[o].max(acc);
            }
        }
        let sub_center_mat = T64::new(vec![1, 3], sub_center.to_vec()).unwrap();
        let pe = sinusoidal_3d(&sub_center_mat, 6).unwrap();
        for o in 0..6 {
            let expect = pooled[o] + pe.data()[o];
            assert!((dense_vals.at2(0, o) - expect).abs() < 1e-12);
        }

        // the sparse token sits between the clusters and pools both: its
        // receptive field contains points of both signatures
        let sparse_vals = tape.value(sparse_tokens).clone();
        assert_eq!(sparse_vals.shape(), &[1, 6]);
        let center = plan.centers.row(0);
        assert!(center[0] > -0.2 && center[0] < 1.2);
    }

    #[test]
    fn sinusoidal_3d_is_deterministic_and_bounded() {
        let mut rng = rng_from_seed(3);
        let centers = T64::rand_uniform(vec![7, 3], -10.0, 10.0, &mut rng);
        let a = sinusoidal_3d(&centers, 16).unwrap();
        let b = sinusoidal_3d(&centers, 16).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        // remainder column (16 = 3*5 + 1) stays zero
        for i in 0..7 {
            assert_eq!(a.at2(i, 15), 0.0);
        }
    }
}
