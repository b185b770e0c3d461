//! Loop-based reference reimplementation of the full forward pass, used as
//! the independent oracle for the acceptance suite. No tensors, no tape —
//! plain `Vec<f64>` and explicit loops, mirroring the documented operation
//! order (row-major, ascending accumulation) of the production kernels.

#![allow(dead_code)]

use std::collections::HashMap;

use scene_magnifier::config::ModelConfig;
use scene_magnifier::model::ParamStore;

/// Raw scene view: positions (M×3) and features (M×d_f), row-major.
pub struct RawField {
    pub m: usize,
    pub d_f: usize,
    pub pos: Vec<f64>,
    pub feat: Vec<f64>,
}

impl RawField {
    pub fn from_scene(field: &scene_magnifier::pointcloud::SceneField<f64>) -> Self {
        RawField {
            m: field.len(),
            d_f: field.feature_dim(),
            pos: field.positions().data().to_vec(),
            feat: field.features().data().to_vec(),
        }
    }

    fn p(&self, i: usize) -> [f64; 3] {
        [self.pos[i * 3], self.pos[i * 3 + 1], self.pos[i * 3 + 2]]
    }

    fn subset(&self, idx: &[usize]) -> RawField {
        let mut pos = Vec::with_capacity(idx.len() * 3);
        let mut feat = Vec::with_capacity(idx.len() * self.d_f);
        for &i in idx {
            pos.extend_from_slice(&self.pos[i * 3..i * 3 + 3]);
            feat.extend_from_slice(&self.feat[i * self.d_f..(i + 1) * self.d_f]);
        }
        RawField { m: idx.len(), d_f: self.d_f, pos, feat }
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn fps(field: &RawField, n: usize, seed: usize) -> Vec<usize> {
    let mut chosen = vec![seed];
    let mut min_d: Vec<f64> = (0..field.m).map(|i| dist2(field.p(i), field.p(seed))).collect();
    while chosen.len() < n {
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..field.m {
            let d = dist2(field.p(i), field.p(best));
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    chosen
}

fn ball(field: &RawField, center: [f64; 3], radius: f64, max_points: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut hits: Vec<(f64, usize)> = Vec::new();
    let mut nearest = (f64::INFINITY, 0usize);
    for i in 0..field.m {
        let d = dist2(field.p(i), center);
        if d <= r2 {
            hits.push((d, i));
        }
        if d < nearest.0 {
            nearest = (d, i);
        }
    }
    if hits.is_empty() {
        return vec![nearest.1];
    }
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    hits.truncate(max_points);
    hits.into_iter().map(|(_, i)| i).collect()
}

fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (v + 0.044715 * v * v * v);
    0.5 * v * (1.0 + u.tanh())
}

/// row-major matrix in a named parameter map
#[derive(Clone)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub d: Vec<f64>,
}

impl Mat {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.cols + j]
    }
}

pub fn snapshot_params(params: &ParamStore<f64>) -> HashMap<String, Mat> {
    params
        .iter()
        .map(|(name, t)| {
            let (rows, cols) = match t.shape() {
                [r, c] => (*r, *c),
                [n] => (1, *n),
                other => panic!("unexpected rank {other:?}"),
            };
            (name.clone(), Mat { rows, cols, d: t.data().to_vec() })
        })
        .collect()
}

/// mat × mat with ascending-p accumulation (mirrors the production order)
fn matmul(a: &[Vec<f64>], w: &Mat) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; w.cols]; a.len()];
    for (i, row) in a.iter().enumerate() {
        for (p, &x) in row.iter().enumerate() {
            for j in 0..w.cols {
                out[i][j] += x * w.at(p, j);
            }
        }
    }
    out
}

fn sinusoid_3d(center: [f64; 3], d_model: usize) -> Vec<f64> {
    let scale = scene_magnifier::tokenizer::POSENC_SCALE;
    let d_axis = d_model / 3;
    let mut out = vec![0.0; d_model];
    for (axis, &coord) in center.iter().enumerate() {
        for j in 0..d_axis {
            let pair = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d_axis as f64);
            let angle = coord * freq;
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            out[axis * d_axis + j] = scale * v;
        }
    }
    out
}

fn sinusoid_1d(pos: usize, d_model: usize) -> Vec<f64> {
    let scale = scene_magnifier::tokenizer::POSENC_SCALE;
    let mut out = vec![0.0; d_model];
    for j in 0..d_model {
        let pair = (j / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / d_model as f64);
        let angle = pos as f64 * freq;
        let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        out[j] = scale * v;
    }
    out
}

/// shared pointwise map + per-group column max of one set-abstraction stage
fn sa_tokens(
    field: &RawField,
    centers: &[[f64; 3]],
    radius: f64,
    group_size: usize,
    w1: &Mat,
    b1: &Mat,
    w2: &Mat,
    b2: &Mat,
    d_model: usize,
) -> Vec<Vec<f64>> {
    let mut tokens = Vec::with_capacity(centers.len());
    for &center in centers {
        let mut members = ball(field, center, radius, group_size);
        while members.len() < group_size {
            members.push(members[0]);
        }
        let mut pooled = vec![f64::NEG_INFINITY; d_model];
        for &i in &members {
            let p = field.p(i);
            let mut input = vec![p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            input.extend_from_slice(&field.feat[i * field.d_f..(i + 1) * field.d_f]);
            let mut hidden = vec![0.0; w1.cols];
            for (h, hv) in hidden.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &x) in input.iter().enumerate() {
                    acc += x * w1.at(k, h);
                }
                *hv = gelu(acc + b1.d[h]);
            }
            for o in 0..d_model {
                let mut acc = 0.0;
                for (h, &hv) in hidden.iter().enumerate() {
                    acc += hv * w2.at(h, o);
                }
                acc += b2.d[o];
                if acc > pooled[o] {
                    pooled[o] = acc;
                }
            }
        }
        tokens.push(pooled);
    }
    tokens
}

fn layer_norm(x: &[Vec<f64>], gamma: &Mat, beta: &Mat) -> Vec<Vec<f64>> {
    let n = gamma.cols;
    let eps = 1e-5;
    x.iter()
        .map(|row| {
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            (0..n).map(|j| (row[j] - mean) * inv * gamma.d[j] + beta.d[j]).collect()
        })
        .collect()
}

fn normalize_u8(raw: &[f64]) -> Vec<u8> {
    let mut lo = raw[0];
    let mut hi = raw[0];
    for &v in raw {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return vec![0; raw.len()];
    }
    raw.iter()
        .map(|&v| (255.0 * ((v - lo) / (hi - lo))).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Full forward pass at teacher-forcing phase; returns T×vocab logits.
pub fn naive_forward(
    field: &RawField,
    params: &HashMap<String, Mat>,
    cfg: &ModelConfig,
    text_ids: &[u32],
    instruction_len: usize,
) -> Vec<Vec<f64>> {
    let s = cfg.vision_token_num;
    let d = cfg.d_model;
    let g = |name: &str| params.get(name).unwrap_or_else(|| panic!("missing {name}"));

    // coarse tier: downsample, sample centers, pool
    let keep = cfg.downsample_points.min(field.m).max(s);
    let down = if keep == field.m {
        field.subset(&(0..field.m).collect::<Vec<_>>())
    } else {
        field.subset(&fps(field, keep, 0))
    };
    let center_idx = fps(&down, s, 0);
    let centers: Vec<[f64; 3]> = center_idx.iter().map(|&i| down.p(i)).collect();
    let mut sparse = sa_tokens(
        &down,
        &centers,
        cfg.region_radius,
        cfg.sparse_group_size,
        g("sa_sparse.w1"),
        g("sa_sparse.b1"),
        g("sa_sparse.w2"),
        g("sa_sparse.b2"),
        d,
    );
    for (tok, &c) in sparse.iter_mut().zip(&centers) {
        for (v, pe) in tok.iter_mut().zip(sinusoid_3d(c, d)) {
            *v += pe;
        }
    }

    // text embedding
    let embed = g("embed.tok");
    let mut h: Vec<Vec<f64>> = sparse;
    for (k, &tid) in text_ids.iter().enumerate() {
        let mut row: Vec<f64> =
            embed.d[tid as usize * d..(tid as usize + 1) * d].to_vec();
        for (v, pe) in row.iter_mut().zip(sinusoid_1d(s + k, d)) {
            *v += pe;
        }
        h.push(row);
    }
    let t = h.len();

    let mut prev_sliced: Vec<Vec<f64>> = Vec::new(); // T×S of the last layer
    for layer in 0..cfg.n_layers {
        let p = |stem: &str| format!("layer{layer}.{stem}");
        let ln1 = layer_norm(&h, g(&p("ln1.gamma")), g(&p("ln1.beta")));

        // magnifier layers read the previous layer's sliced map
        let (dense_tokens, owners, selected): (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) =
            if layer >= cfg.n_sa && cfg.dense_token_num > 0 {
                let qpos = s + instruction_len - 1;
                let scores = normalize_u8(&prev_sliced[qpos]);
                let mut selected: Vec<usize> = scores
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &v)| (v >= cfg.threshold).then_some(i))
                    .collect();
                if selected.is_empty() {
                    let mut argmax = 0usize;
                    for (i, &v) in scores.iter().enumerate() {
                        if v > scores[argmax] {
                            argmax = i;
                        }
                    }
                    selected.push(argmax);
                }
                let k = cfg.dense_token_num;
                let mut dense = Vec::new();
                let mut owners = Vec::new();
                for &region in &selected {
                    let members =
                        ball(field, centers[region], cfg.dense_radius, cfg.dense_ball_max_points);
                    let region_field = field.subset(&members);
                    let n_sub = k.min(region_field.m);
                    let picked = fps(&region_field, n_sub, 0);
                    let mut subs: Vec<[f64; 3]> =
                        picked.iter().map(|&i| region_field.p(i)).collect();
                    while subs.len() < k {
                        let repeat = subs[subs.len() % n_sub];
                        subs.push(repeat);
                    }
                    let mut toks = sa_tokens(
                        &region_field,
                        &subs,
                        cfg.dense_radius * 0.5,
                        cfg.dense_group_size,
                        g("sa_dense.w1"),
                        g("sa_dense.b1"),
                        g("sa_dense.w2"),
                        g("sa_dense.b2"),
                        d,
                    );
                    for (tok, &c) in toks.iter_mut().zip(&subs) {
                        for (v, pe) in tok.iter_mut().zip(sinusoid_3d(c, d)) {
                            *v += pe;
                        }
                    }
                    dense.extend(toks);
                    owners.extend(std::iter::repeat(region).take(k));
                }
                (dense, owners, selected)
            } else {
                (Vec::new(), Vec::new(), Vec::new())
            };

        // multi-head attention with the combined mask
        let rk = dense_tokens.len();
        // multiply by the reciprocal root, exactly as the production scale op
        let inv_sqrt = 1.0 / (cfg.d_k as f64).sqrt();
        let mut merged = vec![vec![0.0; d]; t];
        let mut head_weights: Vec<Vec<Vec<f64>>> = Vec::new();
        for head in 0..cfg.heads {
            let q = matmul(&ln1, g(&p(&format!("attn.q{head}"))));
            let mut km = matmul(&ln1, g(&p(&format!("attn.k{head}"))));
            let mut vm = matmul(&ln1, g(&p(&format!("attn.v{head}"))));
            if rk > 0 {
                km.extend(matmul(&dense_tokens, g(&p(&format!("attn.dk{head}")))));
                vm.extend(matmul(&dense_tokens, g(&p(&format!("attn.dv{head}")))));
            }
            let mut weights = vec![vec![0.0; t + rk]; t];
            for i in 0..t {
                let mut logits = vec![f64::MIN; t + rk];
                for j in 0..t + rk {
                    let visible = if j < t {
                        j <= i
                    } else if i < s {
                        false
                    } else {
                        selected.contains(&owners[j - t])
                    };
                    if visible {
                        let mut dot = 0.0;
                        for pp in 0..cfg.d_k {
                            dot += q[i][pp] * km[j][pp];
                        }
                        logits[j] = dot * inv_sqrt;
                    }
                }
                let max = logits.iter().cloned().fold(f64::MIN, f64::max);
                let mut sum = 0.0;
                for j in 0..t + rk {
                    weights[i][j] = (logits[j] - max).exp();
                    sum += weights[i][j];
                }
                for j in 0..t + rk {
                    weights[i][j] /= sum;
                }
                for j in 0..t + rk {
                    for pp in 0..cfg.d_k {
                        merged[i][head * cfg.d_k + pp] += weights[i][j] * vm[j][pp];
                    }
                }
            }
            head_weights.push(weights);
        }
        // record the head-mean sliced map for the next layer's selector
        let inv = 1.0 / (cfg.heads as f64);
        prev_sliced = (0..t)
            .map(|i| {
                (0..s)
                    .map(|j| {
                        let mut acc = 0.0;
                        for w in &head_weights {
                            acc += w[i][j];
                        }
                        acc * inv
                    })
                    .collect()
            })
            .collect();
        let att_out = matmul(&merged, g(&p("attn.o")));
        for i in 0..t {
            for j in 0..d {
                h[i][j] += att_out[i][j];
            }
        }

        let ln2 = layer_norm(&h, g(&p("ln2.gamma")), g(&p("ln2.beta")));
        let mut f1 = matmul(&ln2, g(&p("ffn.w1")));
        let b1 = g(&p("ffn.b1"));
        for row in f1.iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = gelu(*v + b1.d[j]);
            }
        }
        let mut f2 = matmul(&f1, g(&p("ffn.w2")));
        let b2 = g(&p("ffn.b2"));
        for row in f2.iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += b2.d[j];
            }
        }
        for i in 0..t {
            for j in 0..d {
                h[i][j] += f2[i][j];
            }
        }
    }

    let hf = layer_norm(&h, g("final_ln.gamma"), g("final_ln.beta"));
    matmul(&hf, g("head.lm"))
}
