//! Procedural cross-room benchmark scenes with templated QA.
//!
//! Scenes are rows of rooms joined by corridors. Every object is a colored
//! point cluster (uniform box fill) whose per-point features carry a color
//! one-hot and a class one-hot plus Gaussian noise; colors are drawn
//! independently per object so color questions can only be answered by
//! binding color to class within a local neighborhood, never from dataset
//! priors. Questions are generated from fixed templates over a closed
//! vocabulary, only for objects whose class appears exactly once in the
//! scene, so every answer is computable from ground truth alone.
//!
//! Generation is a pure function of (seed, config). Structural choices
//! (rooms, classes, colors, placements) are drawn before any point
//! synthesis, so scenes at different point densities share their layout.
//! All coordinates and features are quantized through f32, which makes the
//! on-disk scene format lossless for any supported dtype.
//!
//! The "small" split collects questions whose target has a bounding-box
//! plan area of at most 0.05 m² — keyboard-sized and below.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::SceneField;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SMALL_AREA_THRESHOLD: f64 = 0.05;

// ── Catalog ──────────────────────────────────────────────────────────

pub const ROOM_TYPES: [&str; 6] =
    ["kitchen", "bedroom", "office", "bathroom", "livingroom", "diningroom"];

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "white", "black"];

#[derive(Clone, Copy, Debug)]
pub struct ClassInfo {
    pub name: &'static str,
    /// Bounding box extents [w, d, h] in meters.
    pub bbox: [f64; 3],
    /// Height of the box bottom above the floor.
    pub z_off: f64,
}

impl ClassInfo {
    pub fn plan_area(&self) -> f64 {
        self.bbox[0] * self.bbox[1]
    }

    pub fn is_small(&self) -> bool {
        self.plan_area() <= SMALL_AREA_THRESHOLD
    }
}

/// Four object classes per room type, disjoint across types; every room type
/// has at least one keyboard-scale class so the small split is never empty.
pub const INVENTORY: [[ClassInfo; 4]; 6] = [
    // kitchen
    [
        ClassInfo { name: "stove", bbox: [0.6, 0.6, 0.9], z_off: 0.0 },
        ClassInfo { name: "fridge", bbox: [0.7, 0.7, 1.8], z_off: 0.0 },
        ClassInfo { name: "sink", bbox: [0.5, 0.4, 0.2], z_off: 0.85 },
        ClassInfo { name: "kettle", bbox: [0.2, 0.2, 0.25], z_off: 0.9 },
    ],
    // bedroom
    [
        ClassInfo { name: "bed", bbox: [1.6, 2.0, 0.5], z_off: 0.0 },
        ClassInfo { name: "wardrobe", bbox: [1.2, 0.6, 2.0], z_off: 0.0 },
        ClassInfo { name: "lamp", bbox: [0.3, 0.3, 0.5], z_off: 0.55 },
        ClassInfo { name: "watch", bbox: [0.04, 0.04, 0.02], z_off: 0.57 },
    ],
    // office
    [
        ClassInfo { name: "desk", bbox: [1.4, 0.7, 0.75], z_off: 0.0 },
        ClassInfo { name: "bookshelf", bbox: [0.9, 0.3, 1.8], z_off: 0.0 },
        ClassInfo { name: "keyboard", bbox: [0.4, 0.12, 0.03], z_off: 0.76 },
        ClassInfo { name: "mouse", bbox: [0.06, 0.1, 0.04], z_off: 0.76 },
    ],
    // bathroom
    [
        ClassInfo { name: "bathtub", bbox: [1.6, 0.7, 0.55], z_off: 0.0 },
        ClassInfo { name: "mirror", bbox: [0.6, 0.05, 0.8], z_off: 1.0 },
        ClassInfo { name: "soap", bbox: [0.05, 0.08, 0.03], z_off: 0.86 },
        ClassInfo { name: "toothbrush", bbox: [0.02, 0.18, 0.02], z_off: 0.86 },
    ],
    // livingroom
    [
        ClassInfo { name: "sofa", bbox: [1.8, 0.8, 0.8], z_off: 0.0 },
        ClassInfo { name: "television", bbox: [1.1, 0.1, 0.65], z_off: 0.5 },
        ClassInfo { name: "remote", bbox: [0.05, 0.18, 0.03], z_off: 0.45 },
        ClassInfo { name: "vase", bbox: [0.15, 0.15, 0.3], z_off: 0.45 },
    ],
    // diningroom
    [
        ClassInfo { name: "cabinet", bbox: [1.0, 0.45, 1.2], z_off: 0.0 },
        ClassInfo { name: "chair", bbox: [0.45, 0.45, 0.9], z_off: 0.0 },
        ClassInfo { name: "plate", bbox: [0.22, 0.22, 0.03], z_off: 0.74 },
        ClassInfo { name: "bowl", bbox: [0.16, 0.16, 0.08], z_off: 0.74 },
    ],
];

/// Structural point classes appended after the object classes.
pub const STRUCTURAL_CLASSES: [&str; 2] = ["floor", "corridor"];

pub fn n_object_classes() -> usize {
    INVENTORY.len() * 4
}

pub fn n_classes() -> usize {
    n_object_classes() + STRUCTURAL_CLASSES.len()
}

/// Per-point feature width: color one-hot + class one-hot.
pub fn feature_dim() -> usize {
    COLORS.len() + n_classes()
}

pub fn class_index(name: &str) -> Option<usize> {
    for (t, inv) in INVENTORY.iter().enumerate() {
        for (i, c) in inv.iter().enumerate() {
            if c.name == name {
                return Some(t * 4 + i);
            }
        }
    }
    STRUCTURAL_CLASSES
        .iter()
        .position(|&s| s == name)
        .map(|i| n_object_classes() + i)
}

pub fn class_info(name: &str) -> Option<&'static ClassInfo> {
    INVENTORY.iter().flatten().find(|c| c.name == name)
}

/// Planning templates: (room type, task phrase, required classes).
pub const TASKS: [(&str, &str, [&str; 2]); 6] = [
    ("kitchen", "boil water", ["stove", "kettle"]),
    ("bedroom", "rest", ["bed", "lamp"]),
    ("office", "write a report", ["desk", "keyboard"]),
    ("bathroom", "wash up", ["bathtub", "soap"]),
    ("livingroom", "watch a film", ["sofa", "television"]),
    ("diningroom", "set the table", ["plate", "bowl"]),
];

// ── Domain types ─────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: String,
    pub color: String,
    /// Box center in scene coordinates.
    pub center: [f64; 3],
    /// Box extents [w, d, h].
    pub bbox: [f64; 3],
    pub points_per_object: usize,
    pub unique_in_scene: bool,
}

impl ObjectSpec {
    pub fn plan_area(&self) -> f64 {
        self.bbox[0] * self.bbox[1]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Plan-view offset of the room's min corner (meters).
    pub origin: [f64; 2],
    /// Plan extents [width, depth].
    pub extent: [f64; 2],
    pub room_type: String,
    pub objects: Vec<ObjectSpec>,
}

impl RoomSpec {
    pub fn plan_area(&self) -> f64 {
        self.extent[0] * self.extent[1]
    }
}

/// Sum of room plan areas (corridors excluded).
pub fn scene_plan_area(rooms: &[RoomSpec]) -> f64 {
    rooms.iter().map(|r| r.plan_area()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    QaAttribute,
    QaSpatial,
    Planning,
    Caption,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Standard,
    Small,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QASample {
    pub scene_id: String,
    pub task: TaskKind,
    pub question: String,
    pub answer: String,
    /// Flattened object index (room-major) of the question target.
    pub target_object: Option<usize>,
    /// Plan area of the target bounding box, m².
    pub target_area: Option<f64>,
    pub split: Split,
}

// ── Generator configuration ──────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_rooms: usize,
    /// Inclusive range of objects per room (drawn uniformly).
    pub objects_min: usize,
    pub objects_max: usize,
    /// Point budget for a medium object; large objects get 2x, small half.
    pub base_points_per_object: usize,
    /// Floor points per square meter.
    pub floor_density: f64,
    /// Scales every point budget; structure is unaffected.
    pub density_mult: f64,
    /// Top-up floor points until the scene has at least this many points.
    pub min_points: usize,
    /// Feature noise sigma.
    pub noise_sigma: f64,
    pub corridor_width: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_rooms: 4,
            objects_min: 3,
            objects_max: 4,
            base_points_per_object: 80,
            floor_density: 25.0,
            density_mult: 1.0,
            min_points: 4200,
            noise_sigma: 0.05,
            corridor_width: 1.2,
        }
    }
}

// ── Scene generation ─────────────────────────────────────────────────

fn q32(x: f64) -> f64 {
    x as f32 as f64
}

/// Deterministic multi-room scene: returns the point field and the ground
/// truth room/object layout. Same (seed, cfg) → bit-identical output.
pub fn generate_scene<T: Scalar>(
    seed: u64,
    n_rooms: usize,
    cfg: &GenConfig,
) -> Result<(SceneField<T>, Vec<RoomSpec>)> {
    if n_rooms == 0 {
        return Err(Error::Config("n_rooms must be >= 1".into()));
    }
    let scene_id = format!("xr{seed:05}_{n_rooms}r");
    let mut rng = crate::rng_from_seed(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));

    // structural pass: rooms, classes, colors, placements
    let mut rooms: Vec<RoomSpec> = Vec::with_capacity(n_rooms);
    let mut cursor_x = 0.0f64;
    for room_i in 0..n_rooms {
        let w = rng.gen_range(5.0..6.4);
        let d = rng.gen_range(4.6..6.0);
        let y = rng.gen_range(-0.5..0.5);
        let type_idx = rng.gen_range(0..ROOM_TYPES.len());
        let inventory = &INVENTORY[type_idx];
        let n_obj = rng.gen_range(cfg.objects_min..=cfg.objects_max).min(inventory.len());
        let rotation = rng.gen_range(0..inventory.len());
        // small objects sit next to the room's largest object (a keyboard
        // lives on a desk, a kettle on a stove): at coarse resolution their
        // neighborhoods merge with the host's, which is exactly the detail
        // loss the dense tier recovers
        let mut chosen: Vec<ClassInfo> =
            (0..n_obj).map(|j| inventory[(rotation + j) % inventory.len()]).collect();
        let host = chosen
            .iter()
            .filter(|c| !c.is_small())
            .max_by(|a, b| a.plan_area().partial_cmp(&b.plan_area()).unwrap())
            .copied();
        if let Some(h) = host {
            let pos = chosen.iter().position(|c| c.name == h.name).unwrap();
            chosen.swap(0, pos); // host placed first so companions can anchor
        }
        let mut host_xy: Option<[f64; 2]> = None;
        let mut objects = Vec::with_capacity(n_obj);
        for info in chosen {
            let margin_x = info.bbox[0] / 2.0 + 0.3;
            let margin_y = info.bbox[1] / 2.0 + 0.3;
            let (cx, cy) = {
                let free_x = cursor_x + rng.gen_range(margin_x..w - margin_x);
                let free_y = y + rng.gen_range(margin_y..d - margin_y);
                match (info.is_small(), host_xy) {
                    (true, Some([hx, hy])) => {
                        let ax = hx + rng.gen_range(-0.6..0.6);
                        let ay = hy + rng.gen_range(-0.6..0.6);
                        (
                            ax.clamp(cursor_x + margin_x, cursor_x + w - margin_x),
                            ay.clamp(y + margin_y, y + d - margin_y),
                        )
                    }
                    _ => (free_x, free_y),
                }
            };
            if host.map(|h| h.name) == Some(info.name) {
                host_xy = Some([cx, cy]);
            }
            let cz = info.z_off + info.bbox[2] / 2.0;
            let color = COLORS[rng.gen_range(0..COLORS.len())];
            let tier = if info.plan_area() > 0.5 {
                2.0
            } else if info.is_small() {
                0.5
            } else {
                1.0
            };
            let points = ((cfg.base_points_per_object as f64 * tier * cfg.density_mult).round()
                as usize)
                .max(8);
            objects.push(ObjectSpec {
                class: info.name.to_string(),
                color: color.to_string(),
                center: [q32(cx), q32(cy), q32(cz)],
                bbox: info.bbox,
                points_per_object: points,
                unique_in_scene: false, // filled below
            });
        }
        rooms.push(RoomSpec {
            origin: [q32(cursor_x), q32(y)],
            extent: [q32(w), q32(d)],
            room_type: ROOM_TYPES[type_idx].to_string(),
            objects,
        });
        if room_i + 1 < n_rooms {
            cursor_x += w + cfg.corridor_width;
        }
    }

    // uniqueness flags: class appears exactly once across the whole scene
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in &rooms {
        for o in &r.objects {
            *counts.entry(o.class.clone()).or_insert(0) += 1;
        }
    }
    for r in &mut rooms {
        for o in &mut r.objects {
            o.unique_in_scene = counts[&o.class] == 1;
        }
    }

    // point synthesis pass
    let d_f = feature_dim();
    let mut positions: Vec<T> = Vec::new();
    let mut features: Vec<T> = Vec::new();
    let push_point = |rng: &mut rand_chacha::ChaCha8Rng,
                          positions: &mut Vec<T>,
                          features: &mut Vec<T>,
                          p: [f64; 3],
                          color_idx: Option<usize>,
                          class_idx: usize| {
        positions.extend(p.iter().map(|&v| T::from64(q32(v))));
        for f in 0..d_f {
            let mut v = rng.gen_range(-1.0f64..1.0) * cfg.noise_sigma;
            if let Some(c) = color_idx {
                if f == c {
                    v += 1.0;
                }
            }
            if f == COLORS.len() + class_idx {
                v += 1.0;
            }
            features.push(T::from64(q32(v)));
        }
    };

    for (room_i, room) in rooms.iter().enumerate() {
        for obj in &room.objects {
            let color_idx = COLORS.iter().position(|&c| c == obj.color).unwrap();
            let class_idx = class_index(&obj.class).unwrap();
            for _ in 0..obj.points_per_object {
                let p = [
                    obj.center[0] + rng.gen_range(-0.5..0.5) * obj.bbox[0],
                    obj.center[1] + rng.gen_range(-0.5..0.5) * obj.bbox[1],
                    obj.center[2] + rng.gen_range(-0.5..0.5) * obj.bbox[2],
                ];
                push_point(&mut rng, &mut positions, &mut features, p, Some(color_idx), class_idx);
            }
        }
        let floor_class = class_index("floor").unwrap();
        let n_floor =
            ((room.plan_area() * cfg.floor_density * cfg.density_mult).round() as usize).max(16);
        for _ in 0..n_floor {
            let p = [
                room.origin[0] + rng.gen_range(0.0..1.0) * room.extent[0],
                room.origin[1] + rng.gen_range(0.0..1.0) * room.extent[1],
                rng.gen_range(0.0..0.02),
            ];
            push_point(&mut rng, &mut positions, &mut features, p, None, floor_class);
        }
        // corridor strip to the next room
        if room_i + 1 < rooms.len() {
            let next = &rooms[room_i + 1];
            let x0 = room.origin[0] + room.extent[0];
            let x1 = next.origin[0];
            let yc = (room.origin[1] + room.extent[1] / 2.0 + next.origin[1]
                + next.extent[1] / 2.0)
                / 2.0;
            let corridor_class = class_index("corridor").unwrap();
            let n_cor = (((x1 - x0) * cfg.corridor_width * cfg.floor_density * cfg.density_mult)
                .round() as usize)
                .max(8);
            for _ in 0..n_cor {
                let p = [
                    rng.gen_range(x0..x1.max(x0 + 1e-3)),
                    yc + rng.gen_range(-0.5..0.5) * cfg.corridor_width,
                    rng.gen_range(0.0..0.02),
                ];
                push_point(&mut rng, &mut positions, &mut features, p, None, corridor_class);
            }
        }
    }

    // top up with floor points until the downsample target is met
    let floor_class = class_index("floor").unwrap();
    while positions.len() / 3 < cfg.min_points {
        let room = &rooms[(positions.len() / 3) % rooms.len()];
        let p = [
            room.origin[0] + rng.gen_range(0.0..1.0) * room.extent[0],
            room.origin[1] + rng.gen_range(0.0..1.0) * room.extent[1],
            rng.gen_range(0.0..0.02),
        ];
        push_point(&mut rng, &mut positions, &mut features, p, None, floor_class);
    }

    let m = positions.len() / 3;
    let field = SceneField::new(
        scene_id,
        Tensor::new(vec![m, 3], positions)?,
        Tensor::new(vec![m, d_f], features)?,
    )?;
    Ok((field, rooms))
}

// ── QA generation ────────────────────────────────────────────────────

fn flat_objects(rooms: &[RoomSpec]) -> Vec<(usize, &RoomSpec, &ObjectSpec)> {
    let mut out = Vec::new();
    let mut id = 0usize;
    for r in rooms {
        for o in &r.objects {
            out.push((id, r, o));
            id += 1;
        }
    }
    out
}

fn split_for(area: f64) -> Split {
    if area <= SMALL_AREA_THRESHOLD {
        Split::Small
    } else {
        Split::Standard
    }
}

/// Attribute and spatial questions for every unique object. Answers are
/// validated against the ground truth as they are produced (closed-world
/// check); scenes without unique objects yield an empty list.
pub fn generate_qa<T: Scalar>(
    scene: &SceneField<T>,
    rooms: &[RoomSpec],
    _seed: u64,
    _cfg: &GenConfig,
) -> Vec<QASample> {
    let objects = flat_objects(rooms);
    let mut samples = Vec::new();
    for &(id, room, obj) in &objects {
        if !obj.unique_in_scene {
            continue;
        }
        let area = obj.plan_area();
        samples.push(QASample {
            scene_id: scene.scene_id().to_string(),
            task: TaskKind::QaAttribute,
            question: format!("what color is the {} in the {} ?", obj.class, room.room_type),
            answer: obj.color.clone(),
            target_object: Some(id),
            target_area: Some(area),
            split: split_for(area),
        });

        // nearest other object by center distance; ties by flat index
        let mut best: Option<(f64, usize)> = None;
        for &(oid, _, other) in &objects {
            if oid == id {
                continue;
            }
            let d2: f64 = (0..3).map(|k| (other.center[k] - obj.center[k]).powi(2)).sum();
            if best.map_or(true, |(bd, _)| d2 < bd) {
                best = Some((d2, oid));
            }
        }
        if let Some((_, nearest_id)) = best {
            let nearest = objects[nearest_id].2;
            samples.push(QASample {
                scene_id: scene.scene_id().to_string(),
                task: TaskKind::QaSpatial,
                question: format!("what is nearest to the {} ?", obj.class),
                answer: nearest.class.clone(),
                target_object: Some(id),
                target_area: Some(area),
                split: split_for(area),
            });
        }
    }
    debug_assert!(validate_samples(&samples, rooms));
    samples
}

/// Closed-world check: every sample's answer must be recomputable from the
/// room specs alone.
pub fn validate_samples(samples: &[QASample], rooms: &[RoomSpec]) -> bool {
    let objects = flat_objects(rooms);
    samples.iter().all(|s| match s.task {
        TaskKind::QaAttribute => s
            .target_object
            .and_then(|id| objects.get(id))
            .is_some_and(|(_, _, o)| o.color == s.answer && o.unique_in_scene),
        TaskKind::QaSpatial => s.target_object.and_then(|id| objects.get(id)).is_some(),
        TaskKind::Planning | TaskKind::Caption => true,
    })
}

/// Templated planning and caption samples for rooms whose type appears
/// exactly once (so the room reference is unambiguous).
pub fn generate_planning_caption<T: Scalar>(
    scene: &SceneField<T>,
    rooms: &[RoomSpec],
    _seed: u64,
) -> Vec<QASample> {
    let mut type_counts: HashMap<&str, usize> = HashMap::new();
    for r in rooms {
        *type_counts.entry(r.room_type.as_str()).or_insert(0) += 1;
    }
    let mut samples = Vec::new();
    for room in rooms {
        if type_counts[room.room_type.as_str()] != 1 {
            continue;
        }
        for (task_room, phrase, required) in TASKS {
            if task_room != room.room_type {
                continue;
            }
            let mut uses: Vec<&str> = Vec::new();
            for o in &room.objects {
                if required.contains(&o.class.as_str()) && !uses.contains(&o.class.as_str()) {
                    uses.push(&o.class);
                }
            }
            if uses.len() == required.len() {
                let steps: Vec<String> = uses.iter().map(|c| format!("use {c}")).collect();
                samples.push(QASample {
                    scene_id: scene.scene_id().to_string(),
                    task: TaskKind::Planning,
                    question: format!("how to {phrase} ?"),
                    answer: format!("go to {} ; {}", room.room_type, steps.join(" ; ")),
                    target_object: None,
                    target_area: None,
                    split: Split::Standard,
                });
            }
        }
        let inventory: Vec<&str> = room.objects.iter().map(|o| o.class.as_str()).collect();
        samples.push(QASample {
            scene_id: scene.scene_id().to_string(),
            task: TaskKind::Caption,
            question: format!("describe the {}", room.room_type),
            answer: format!("the {} contains {}", room.room_type, inventory.join(" ")),
            target_object: None,
            target_area: None,
            split: Split::Standard,
        });
    }
    samples
}

// ── Vocabulary ───────────────────────────────────────────────────────

/// Closed word-level vocabulary covering every template, class, color, and
/// room type. Token 0 is the end-of-sequence marker.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

pub const EOS: u32 = 0;

impl Vocab {
    pub fn build() -> Vocab {
        let mut set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        let template_words = [
            "what", "color", "is", "the", "in", "nearest", "to", "how", "describe", "contains",
            "go", "use", "?", ";",
        ];
        for w in template_words {
            set.insert(w.into());
        }
        for (_, phrase, _) in TASKS {
            for w in phrase.split_whitespace() {
                set.insert(w.into());
            }
        }
        for t in ROOM_TYPES {
            set.insert(t.into());
        }
        for c in COLORS {
            set.insert(c.into());
        }
        for inv in &INVENTORY {
            for c in inv {
                set.insert(c.name.into());
            }
        }
        let mut words = vec!["<eos>".to_string()];
        words.extend(set);
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::UnknownToken(w.to_string()))
            })
            .collect()
    }

    /// Encode and append the end-of-sequence marker (answer spans).
    pub fn encode_with_eos(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.encode(text)?;
        ids.push(EOS);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&t| t != EOS)
            .map(|&t| self.words.get(t as usize).map(String::as_str).unwrap_or("<bad>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ── Dataset directory ────────────────────────────────────────────────
//
// Layout: `scenes/<id>.scnf`, `qa/<id>.jsonl` (one QASample per line),
// `meta.json` (generator config + seeds + statistics + vocabulary).

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean_plan_area: f64,
    pub total_samples: usize,
    pub small_samples: usize,
    pub class_histogram: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: GenConfig,
    pub seed_start: u64,
    pub n_scenes: usize,
    pub feature_dim: usize,
    pub vocab: Vec<String>,
    pub stats: DatasetStats,
}

pub struct Dataset<T: Scalar> {
    pub meta: DatasetMeta,
    pub scenes: Vec<SceneField<T>>,
    /// Samples per scene, parallel to `scenes`.
    pub samples: Vec<Vec<QASample>>,
}

/// Generate `n_scenes` scenes from consecutive seeds and write the dataset
/// directory. QA, planning, and caption samples all land in the same
/// per-scene jsonl, tagged by task kind.
pub fn write_dataset<T: Scalar>(
    dir: impl AsRef<Path>,
    cfg: &GenConfig,
    seed_start: u64,
    n_scenes: usize,
) -> Result<DatasetMeta> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("scenes"))?;
    std::fs::create_dir_all(dir.join("qa"))?;
    let mut total_area = 0.0;
    let mut total_samples = 0usize;
    let mut small_samples = 0usize;
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..n_scenes {
        let seed = seed_start + i as u64;
        let (field, rooms) = generate_scene::<T>(seed, cfg.n_rooms, cfg)?;
        let mut samples = generate_qa(&field, &rooms, seed, cfg);
        samples.extend(generate_planning_caption(&field, &rooms, seed));
        total_area += scene_plan_area(&rooms);
        for s in &samples {
            total_samples += 1;
            if s.split == Split::Small {
                small_samples += 1;
            }
            if let Some(id) = s.target_object {
                let objects = flat_objects(&rooms);
                *histogram.entry(objects[id].2.class.clone()).or_insert(0) += 1;
            }
        }
        field.save_scnf(dir.join("scenes").join(format!("{}.scnf", field.scene_id())))?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(
            dir.join("qa").join(format!("{}.jsonl", field.scene_id())),
        )?);
        for s in &samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
    }
    let meta = DatasetMeta {
        generator: cfg.clone(),
        seed_start,
        n_scenes,
        feature_dim: feature_dim(),
        vocab: Vocab::build().words().to_vec(),
        stats: DatasetStats {
            mean_plan_area: total_area / n_scenes as f64,
            total_samples,
            small_samples,
            class_histogram: histogram,
        },
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

pub fn load_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let mut scenes = Vec::with_capacity(meta.n_scenes);
    let mut samples = Vec::with_capacity(meta.n_scenes);
    for i in 0..meta.n_scenes {
        let seed = meta.seed_start + i as u64;
        let id = format!("xr{seed:05}_{}r", meta.generator.n_rooms);
        let field = SceneField::<T>::load_scnf(&id, dir.join("scenes").join(format!("{id}.scnf")))?;
        let text = std::fs::read_to_string(dir.join("qa").join(format!("{id}.jsonl")))?;
        let scene_samples: Vec<QASample> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        scenes.push(field);
        samples.push(scene_samples);
    }
    Ok(Dataset { meta, scenes, samples })
}
