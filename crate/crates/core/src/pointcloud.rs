//! Spatial primitives over raw scenes: deterministic sampling, neighborhood
//! queries, and set-abstraction feature pooling.
//!
//! All distance comparisons use squared Euclidean distance accumulated in
//! coordinate order, so independent reimplementations reproduce the exact
//! tie-break behavior: FPS breaks argmax ties by lowest index, neighbor lists
//! sort by (distance², index).

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Dense per-point positions and features for one scene: the substrate both
/// token tiers are built from. Positions are meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneField<T: Scalar> {
    scene_id: String,
    /// M×3 coordinates.
    positions: Tensor<T>,
    /// M×d_f per-point feature vectors.
    features: Tensor<T>,
}

impl<T: Scalar> SceneField<T> {
    pub fn new(scene_id: impl Into<String>, positions: Tensor<T>, features: Tensor<T>) -> Result<Self> {
        if positions.rank() != 2
            || positions.shape()[1] != 3
            || features.rank() != 2
            || positions.shape()[0] != features.shape()[0]
            || positions.shape()[0] == 0
        {
            return Err(Error::ShapeMismatch {
                op: "scene_field",
                lhs: positions.shape().to_vec(),
                rhs: features.shape().to_vec(),
            });
        }
        Ok(SceneField { scene_id: scene_id.into(), positions, features })
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    /// Point count M.
    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // M >= 1 by construction
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn positions(&self) -> &Tensor<T> {
        &self.positions
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn position(&self, i: usize) -> [T; 3] {
        let r = self.positions.row(i);
        [r[0], r[1], r[2]]
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bbox(&self) -> ([T; 3], [T; 3]) {
        let mut lo = self.position(0);
        let mut hi = lo;
        for i in 1..self.len() {
            let p = self.position(i);
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    /// Restrict to a subset of point indices (new field, same scene id).
    pub fn subset(&self, indices: &[usize]) -> Result<SceneField<T>> {
        Ok(SceneField {
            scene_id: self.scene_id.clone(),
            positions: crate::tensor::gather_rows(&self.positions, indices)?,
            features: crate::tensor::gather_rows(&self.features, indices)?,
        })
    }
}

/// Spherical neighborhood request.
#[derive(Clone, Copy, Debug)]
pub struct RegionQuery<T> {
    pub center: [T; 3],
    pub radius: T,
    pub max_points: usize,
}

impl<T: Scalar> RegionQuery<T> {
    pub fn new(center: [T; 3], radius: T, max_points: usize) -> Result<Self> {
        if radius <= T::zero() {
            return Err(Error::Config("ball query radius must be positive".into()));
        }
        if max_points == 0 {
            return Err(Error::Config("ball query max_points must be >= 1".into()));
        }
        Ok(RegionQuery { center, radius, max_points })
    }
}

#[inline]
fn dist2<T: Scalar>(a: &[T], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Farthest-point sampling. The first index is `seed_index`; every following
/// index maximizes the minimum squared distance to the chosen set, ties
/// broken by lowest index.
pub fn farthest_point_sample<T: Scalar>(
    field: &SceneField<T>,
    n: usize,
    seed_index: usize,
) -> Result<Vec<usize>> {
    let m = field.len();
    if n > m {
        return Err(Error::Cardinality { op: "farthest_point_sample", requested: n, available: m });
    }
    if seed_index >= m {
        return Err(Error::IndexOutOfBounds { op: "farthest_point_sample", index: seed_index, len: m });
    }
    let mut chosen = Vec::with_capacity(n);
    if n == 0 {
        return Ok(chosen);
    }
    chosen.push(seed_index);
    let mut min_d2: Vec<T> = {
        let seed = field.position(seed_index);
        (0..m).map(|i| dist2(field.positions.row(i), &seed)).collect()
    };
    while chosen.len() < n {
        let mut best = 0usize;
        let mut best_d = T::neg_infinity();
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        let p = field.position(best);
        for i in 0..m {
            let d = dist2(field.positions.row(i), &p);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    Ok(chosen)
}

/// Indices of points within the query ball, sorted by ascending distance and
/// truncated at `max_points`. An empty ball falls back to the single nearest
/// point so sparse scenes never produce empty regions.
pub fn ball_query<T: Scalar>(field: &SceneField<T>, q: &RegionQuery<T>) -> Vec<usize> {
    let r2 = q.radius * q.radius;
    let mut hits: Vec<(T, usize)> = Vec::new();
    let mut nearest = (T::infinity(), 0usize);
    for i in 0..field.len() {
        let d = dist2(field.positions.row(i), &q.center);
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
    hits.truncate(q.max_points);
    hits.into_iter().map(|(_, i)| i).collect()
}

/// Parameters of the shared pointwise map inside a set-abstraction stage,
/// already registered on a tape. Input width is 3 + d_f (center-relative
/// coordinates concatenated with point features).
#[derive(Clone, Copy, Debug)]
pub struct SaParamVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

/// Set abstraction around explicit center coordinates: ball-query neighbors
/// (padded by repeating the nearest point up to `group_size`), subtract the
/// center, apply the shared two-layer pointwise map, and max-pool each group
/// into one token. Differentiable end-to-end with respect to the map
/// parameters.
///
/// Returns the (|centers| × d_out) token matrix on the tape.
pub fn sa_aggregate_at<T: Scalar>(
    tape: &mut Tape<T>,
    field: &SceneField<T>,
    centers: &[[T; 3]],
    radius: T,
    group_size: usize,
    params: &SaParamVars,
) -> Result<VarId> {
    let d_out = tape.value(params.w2).shape()[1];
    if d_out == 0 {
        return Err(Error::Config("set abstraction output width must be >= 1".into()));
    }
    if group_size == 0 {
        return Err(Error::Config("set abstraction group_size must be >= 1".into()));
    }
    let d_f = field.feature_dim();
    let in_dim = 3 + d_f;
    let expect_in = tape.value(params.w1).shape()[0];
    if expect_in != in_dim {
        return Err(Error::ShapeMismatch {
            op: "sa_aggregate",
            lhs: vec![in_dim],
            rhs: vec![expect_in],
        });
    }

    // One (C·G)×(3+d_f) group matrix; geometry is constant data, only the
    // pointwise map is differentiable. The ball-query distance scans are
    // 3 multiply-accumulates per point and are charged to the tape counter.
    tape.count_external_macs((centers.len() * field.len() * 3) as u64);
    let mut rows: Vec<T> = Vec::with_capacity(centers.len() * group_size * in_dim);
    for center in centers {
        let q = RegionQuery::new(*center, radius, group_size)?;
        let mut members = ball_query(field, &q);
        while members.len() < group_size {
            members.push(members[0]); // nearest-point padding
        }
        for &i in &members {
            let p = field.positions.row(i);
            rows.push(p[0] - center[0]);
            rows.push(p[1] - center[1]);
            rows.push(p[2] - center[2]);
            rows.extend_from_slice(field.features.row(i));
        }
    }
    let groups = tape.constant(Tensor::new(vec![centers.len() * group_size, in_dim], rows)?);
    let h = tape.matmul(groups, params.w1)?;
    let h = tape.add_bias(h, params.b1)?;
    let h = tape.gelu(h)?;
    let y = tape.matmul(h, params.w2)?;
    let y = tape.add_bias(y, params.b2)?;
    tape.group_max_rows(y, group_size)
}

/// [`sa_aggregate_at`] with centers given as point indices. Also returns the
/// |centers|×3 center-coordinate matrix.
pub fn sa_aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    field: &SceneField<T>,
    centers: &[usize],
    radius: T,
    group_size: usize,
    params: &SaParamVars,
) -> Result<(VarId, Tensor<T>)> {
    let coords: Vec<[T; 3]> = centers.iter().map(|&i| field.position(i)).collect();
    let tokens = sa_aggregate_at(tape, field, &coords, radius, group_size, params)?;
    let flat: Vec<T> = coords.iter().flat_map(|c| c.iter().copied()).collect();
    let centers_t = Tensor::new(vec![centers.len(), 3], flat)?;
    Ok((tokens, centers_t))
}

// ── Serialization ────────────────────────────────────────────────────
//
// Binary scene format: header {magic "SCNF", u32 M, u32 d_f}, then M records
// of (3 + d_f) little-endian f32 (x y z f_0..f_{d_f-1}). Values written from
// a wider dtype are rounded to f32.

const SCNF_MAGIC: &[u8; 4] = b"SCNF";

impl<T: Scalar> SceneField<T> {
    pub fn write_scnf(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(SCNF_MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.feature_dim() as u32).to_le_bytes())?;
        for i in 0..self.len() {
            for &v in self.positions.row(i) {
                w.write_all(&(v.to64() as f32).to_le_bytes())?;
            }
            for &v in self.features.row(i) {
                w.write_all(&(v.to64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_scnf(scene_id: impl Into<String>, r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)?;
        if &head[0..4] != SCNF_MAGIC {
            return Err(Error::Format { op: "scnf_read", detail: "bad magic".into() });
        }
        let m = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let d_f = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut pos = Vec::with_capacity(m * 3);
        let mut feat = Vec::with_capacity(m * d_f);
        let mut buf = [0u8; 4];
        for _ in 0..m {
            for _ in 0..3 {
                r.read_exact(&mut buf)?;
                pos.push(T::from64(f32::from_le_bytes(buf) as f64));
            }
            for _ in 0..d_f {
                r.read_exact(&mut buf)?;
                feat.push(T::from64(f32::from_le_bytes(buf) as f64));
            }
        }
        SceneField::new(scene_id, Tensor::new(vec![m, 3], pos)?, Tensor::new(vec![m, d_f], feat)?)
    }

    pub fn save_scnf(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_scnf(&mut f)
    }

    pub fn load_scnf(scene_id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_scnf(scene_id, &mut f)
    }

    /// Plain-text reader for hand-made fixtures: one `x,y,z,f...` line per
    /// point, `#` comments and blank lines ignored.
    pub fn from_csv(scene_id: impl Into<String>, r: impl Read) -> Result<Self> {
        let reader = std::io::BufReader::new(r);
        let mut pos = Vec::new();
        let mut feat = Vec::new();
        let mut d_f: Option<usize> = None;
        let mut m = 0usize;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format {
                    op: "scene_csv",
                    detail: format!("line {}: {}", lineno + 1, e),
                })?;
            if vals.len() < 3 {
                return Err(Error::Format {
                    op: "scene_csv",
                    detail: format!("line {}: need at least x,y,z", lineno + 1),
                });
            }
            let row_df = vals.len() - 3;
            if *d_f.get_or_insert(row_df) != row_df {
                return Err(Error::Format {
                    op: "scene_csv",
                    detail: format!("line {}: inconsistent feature width", lineno + 1),
                });
            }
            pos.extend(vals[..3].iter().map(|&v| T::from64(v)));
            feat.extend(vals[3..].iter().map(|&v| T::from64(v)));
            m += 1;
        }
        let d_f = d_f.unwrap_or(0);
        SceneField::new(scene_id, Tensor::new(vec![m, 3], pos)?, Tensor::new(vec![m, d_f], feat)?)
    }
}
