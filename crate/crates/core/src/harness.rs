//! Experiment orchestration: dataset preparation, training wrappers,
//! exact-match evaluation, the ablation grid, the complexity probe, and
//! attention-map export.
//!
//! Every run is a pure function of its [`ExperimentSpec`] and seed: dataset
//! generation, scene plans, batch shuffles, selection randomness, and
//! evaluation order all derive from seeds in the spec.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SelectStrategy, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{
    generate_with_stats, save_checkpoint, train, Forward, ParamStore, PreparedScene,
    SelectionOverride, SequenceLayout, StepMetrics, TrainOutcome, TrainSample,
};
use crate::scalar::Scalar;
use crate::scenegen::{
    generate_scene, load_dataset, write_dataset, Dataset, GenConfig, Split, TaskKind,
    Vocab, EOS,
};
use crate::selector::Phase;
use crate::tape::Tape;

// ── Experiment specification ─────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// Where the dataset comes from: an existing directory or the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    /// Load from this dataset directory when set; otherwise generate.
    pub path: Option<String>,
    pub generator: GenConfig,
    pub seed_start: u64,
    pub n_scenes: usize,
    /// Cap on QA samples used per scene (keeps desk-scale runs fast).
    pub qa_per_scene: Option<usize>,
    /// Fraction of scenes used for training; the rest evaluate.
    pub train_frac: f64,
    /// Task kinds used for training and evaluation.
    pub tasks: Vec<TaskKind>,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            path: None,
            generator: GenConfig::default(),
            seed_start: 0,
            n_scenes: 200,
            qa_per_scene: Some(4),
            train_frac: 0.8,
            tasks: vec![TaskKind::QaAttribute, TaskKind::QaSpatial],
        }
    }
}

/// One ablation axis and the values it sweeps (Table-style grids).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "kebab-case")]
pub enum AblationAxis {
    Threshold(Vec<u8>),
    DenseTokenNum(Vec<usize>),
    SelectStrategy(Vec<SelectStrategy>),
    VisionTokenNum(Vec<usize>),
    /// Three-way comparison: attention-guided magnifier, random-selection
    /// magnifier, and no magnifier (dense retrieval off).
    Magnifier(Vec<MagnifierVariant>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MagnifierVariant {
    AttentionMap,
    Random,
    Off,
}

impl AblationAxis {
    pub fn cells(&self) -> Vec<(String, CellPatch)> {
        match self {
            AblationAxis::Threshold(vs) => vs
                .iter()
                .map(|&v| (format!("threshold={v}"), CellPatch::Threshold(v)))
                .collect(),
            AblationAxis::DenseTokenNum(vs) => vs
                .iter()
                .map(|&v| (format!("dense_token_num={v}"), CellPatch::DenseTokenNum(v)))
                .collect(),
            AblationAxis::SelectStrategy(vs) => vs
                .iter()
                .map(|&v| {
                    let name = match v {
                        SelectStrategy::AttentionMap => "attention-map",
                        SelectStrategy::Random => "random",
                    };
                    (format!("select_strategy={name}"), CellPatch::Strategy(v))
                })
                .collect(),
            AblationAxis::VisionTokenNum(vs) => vs
                .iter()
                .map(|&v| (format!("vision_token_num={v}"), CellPatch::VisionTokenNum(v)))
                .collect(),
            AblationAxis::Magnifier(vs) => vs
                .iter()
                .map(|&v| {
                    let name = match v {
                        MagnifierVariant::AttentionMap => "attention-map",
                        MagnifierVariant::Random => "random",
                        MagnifierVariant::Off => "off",
                    };
                    (format!("magnifier={name}"), CellPatch::Magnifier(v))
                })
                .collect(),
        }
    }
}

/// A single-field change relative to the base model config.
#[derive(Clone, Copy, Debug)]
pub enum CellPatch {
    Threshold(u8),
    DenseTokenNum(usize),
    Strategy(SelectStrategy),
    VisionTokenNum(usize),
    Magnifier(MagnifierVariant),
}

impl CellPatch {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match *self {
            CellPatch::Threshold(v) => cfg.threshold = v,
            CellPatch::DenseTokenNum(v) => cfg.dense_token_num = v,
            CellPatch::Strategy(s) => cfg.select_strategy = s,
            CellPatch::VisionTokenNum(v) => {
                cfg.vision_token_num = v;
                cfg.downsample_points = cfg.downsample_points.max(v);
            }
            CellPatch::Magnifier(MagnifierVariant::AttentionMap) => {
                cfg.select_strategy = SelectStrategy::AttentionMap;
            }
            CellPatch::Magnifier(MagnifierVariant::Random) => {
                cfg.select_strategy = SelectStrategy::Random;
            }
            // dense retrieval off turns magnifier layers into standard ones
            // while keeping the parameter set and init stream identical
            CellPatch::Magnifier(MagnifierVariant::Off) => cfg.dense_token_num = 0,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub ablation: AblationAxis,
    /// Seed schedule shared by every ablation cell.
    pub seeds: Vec<u64>,
    pub dtype: Dtype,
    pub output_dir: String,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSpec::default(),
            ablation: AblationAxis::Magnifier(vec![
                MagnifierVariant::AttentionMap,
                MagnifierVariant::Random,
                MagnifierVariant::Off,
            ]),
            seeds: vec![0, 1, 2],
            dtype: Dtype::F32,
            output_dir: "out".into(),
        }
    }
}

// ── Dataset preparation ──────────────────────────────────────────────

pub struct EvalSample<T: Scalar> {
    pub scene: Arc<PreparedScene<T>>,
    pub question: Vec<u32>,
    /// Reference answer content tokens (no end marker).
    pub answer: Vec<u32>,
    pub split: Split,
}

pub struct PreparedData<T: Scalar> {
    pub train: Vec<TrainSample<T>>,
    pub eval: Vec<EvalSample<T>>,
    pub vocab: Vocab,
    pub feature_dim: usize,
}

/// Obtain the dataset named by the spec: load it if a path is given,
/// generate it in memory otherwise.
pub fn obtain_dataset<T: Scalar>(data: &DataSpec) -> Result<Dataset<T>> {
    if let Some(path) = &data.path {
        return load_dataset(path);
    }
    let mut scenes = Vec::with_capacity(data.n_scenes);
    let mut samples = Vec::with_capacity(data.n_scenes);
    let mut total_area = 0.0;
    let mut total_samples = 0usize;
    let mut small = 0usize;
    for i in 0..data.n_scenes {
        let seed = data.seed_start + i as u64;
        let (field, rooms) = generate_scene::<T>(seed, data.generator.n_rooms, &data.generator)?;
        let mut scene_samples = crate::scenegen::generate_qa(&field, &rooms, seed, &data.generator);
        scene_samples.extend(crate::scenegen::generate_planning_caption(&field, &rooms, seed));
        total_area += crate::scenegen::scene_plan_area(&rooms);
        total_samples += scene_samples.len();
        small += scene_samples.iter().filter(|s| s.split == Split::Small).count();
        scenes.push(field);
        samples.push(scene_samples);
    }
    Ok(Dataset {
        meta: crate::scenegen::DatasetMeta {
            generator: data.generator.clone(),
            seed_start: data.seed_start,
            n_scenes: data.n_scenes,
            feature_dim: crate::scenegen::feature_dim(),
            vocab: Vocab::build().words().to_vec(),
            stats: crate::scenegen::DatasetStats {
                mean_plan_area: total_area / data.n_scenes.max(1) as f64,
                total_samples,
                small_samples: small,
                class_histogram: BTreeMap::new(),
            },
        },
        scenes,
        samples,
    })
}

/// Fill the dataset-derived config fields (vocabulary size, feature width).
pub fn configure_for_dataset(cfg: &ModelConfig, data: &Dataset<impl Scalar>) -> ModelConfig {
    let mut cfg = cfg.clone();
    cfg.vocab_size = data.meta.vocab.len();
    cfg.feature_dim = data.meta.feature_dim;
    cfg
}

/// Split scenes into train/eval, prepare tokenization plans, and encode the
/// selected task samples.
pub fn prepare_data<T: Scalar>(
    dataset: &Dataset<T>,
    cfg: &ModelConfig,
    data_spec: &DataSpec,
) -> Result<PreparedData<T>> {
    let vocab = Vocab::build();
    let n_train = ((dataset.scenes.len() as f64) * data_spec.train_frac).ceil() as usize;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, field) in dataset.scenes.iter().enumerate() {
        let scene = Arc::new(PreparedScene::prepare(field.clone(), cfg)?);
        let mut kept = 0usize;
        for s in &dataset.samples[i] {
            if !data_spec.tasks.contains(&s.task) {
                continue;
            }
            if let Some(cap) = data_spec.qa_per_scene {
                if kept >= cap {
                    break;
                }
            }
            kept += 1;
            let question = vocab.encode(&s.question)?;
            if i < n_train {
                train.push(TrainSample {
                    scene: scene.clone(),
                    instruction: question,
                    answer: vocab.encode_with_eos(&s.answer)?,
                });
            } else {
                eval.push(EvalSample {
                    scene: scene.clone(),
                    question,
                    answer: vocab.encode(&s.answer)?,
                    split: s.split,
                });
            }
        }
    }
    Ok(PreparedData { train, eval, vocab, feature_dim: dataset.meta.feature_dim })
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Exact-match accuracy overall and on the small split, plus selector and
/// cost statistics from the evaluation forwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall_accuracy: f64,
    pub overall_count: usize,
    pub small_accuracy: f64,
    pub small_count: usize,
    /// Mean selected fraction per magnifier layer (empty without magnifier).
    pub mean_selected_frac: Vec<f64>,
    pub transformer_macs: u64,
    pub tokenize_macs: u64,
}

pub fn evaluate<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    eval: &[EvalSample<T>],
) -> Result<MetricReport> {
    if eval.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let max_len = eval.iter().map(|e| e.answer.len()).max().unwrap_or(1) + 1;
    let mut hits = 0usize;
    let mut small_hits = 0usize;
    let mut small_count = 0usize;
    let mut frac_sums: Vec<f64> = Vec::new();
    let mut frac_n = 0usize;
    let mut macs = (0u64, 0u64);
    for (i, sample) in eval.iter().enumerate() {
        let stats = generate_with_stats(
            &sample.scene,
            &sample.question,
            cfg,
            params,
            max_len,
            EOS,
        )?;
        if i == 0 {
            macs = (stats.transformer_macs, stats.tokenize_macs);
        }
        if !stats.selected_frac_per_layer.is_empty() {
            if frac_sums.is_empty() {
                frac_sums = vec![0.0; stats.selected_frac_per_layer.len()];
            }
            for (acc, f) in frac_sums.iter_mut().zip(&stats.selected_frac_per_layer) {
                *acc += f;
            }
            frac_n += 1;
        }
        let hit = stats.tokens == sample.answer;
        if hit {
            hits += 1;
        }
        if sample.split == Split::Small {
            small_count += 1;
            if hit {
                small_hits += 1;
            }
        }
    }
    for f in frac_sums.iter_mut() {
        *f /= frac_n.max(1) as f64;
    }
    Ok(MetricReport {
        overall_accuracy: hits as f64 / eval.len() as f64,
        overall_count: eval.len(),
        small_accuracy: if small_count > 0 { small_hits as f64 / small_count as f64 } else { 0.0 },
        small_count,
        mean_selected_frac: frac_sums,
        transformer_macs: macs.0,
        tokenize_macs: macs.1,
    })
}

// ── Training wrapper ─────────────────────────────────────────────────

/// Train one model per the spec's base config and write metrics/checkpoint
/// into `out_dir` when given.
pub fn train_model<T: Scalar>(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    prepared: &PreparedData<T>,
    out_dir: Option<&Path>,
    mut echo: Option<&mut dyn FnMut(&StepMetrics)>,
) -> Result<TrainOutcome<T>> {
    let outcome = train(&prepared.train, cfg, tcfg, echo.as_deref_mut().map(|e| e as _))?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
        for m in &outcome.metrics {
            serde_json::to_writer(&mut w, m)?;
            w.write_all(b"\n")?;
        }
        save_checkpoint(dir.join("model.ckpt"), cfg, &outcome.params)?;
    }
    Ok(outcome)
}

// ── Ablation grid ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub seed: u64,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub label: String,
    pub n_seeds: usize,
    pub mean_overall_accuracy: f64,
    pub mean_small_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub summary: Vec<AblationSummaryRow>,
}

impl AblationReport {
    pub fn summary_for(&self, label: &str) -> Option<&AblationSummaryRow> {
        self.summary.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,seed,overall_accuracy,overall_count,small_accuracy,small_count,error\n",
        );
        for c in &self.cells {
            let (oa, on, sa, sn) = c
                .report
                .as_ref()
                .map(|r| (r.overall_accuracy, r.overall_count, r.small_accuracy, r.small_count))
                .unwrap_or((0.0, 0, 0.0, 0));
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.label,
                c.seed,
                oa,
                on,
                sa,
                sn,
                c.error.as_deref().unwrap_or("")
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("label,n_seeds,mean_overall_accuracy,mean_small_accuracy\n");
        for r in &self.summary {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.label, r.n_seeds, r.mean_overall_accuracy, r.mean_small_accuracy
            ));
        }
        out
    }
}

/// Run every (axis value × seed) cell: train a model, evaluate it, record
/// the outcome. A failing cell is recorded as an error row; the grid
/// continues. Cells sharing a seed differ only in the patched field.
pub fn run_ablation<T: Scalar>(
    spec: &ExperimentSpec,
    mut echo: Option<&mut dyn FnMut(&str)>,
) -> Result<AblationReport> {
    let dataset = obtain_dataset::<T>(&spec.data)?;
    let base = configure_for_dataset(&spec.model, &dataset);
    let mut cells = Vec::new();
    for (label, patch) in spec.ablation.cells() {
        for &seed in &spec.seeds {
            if let Some(cb) = echo.as_deref_mut() {
                cb(&format!("cell {label} seed {seed}"));
            }
            let mut cfg = patch.apply(&base);
            cfg.seed = seed;
            let outcome = run_cell::<T>(&cfg, spec, &dataset);
            cells.push(match outcome {
                Ok(report) => {
                    if let Some(cb) = echo.as_deref_mut() {
                        cb(&format!(
                            "  overall {:.3} small {:.3}",
                            report.overall_accuracy, report.small_accuracy
                        ));
                    }
                    AblationCell { label: label.clone(), seed, report: Some(report), error: None }
                }
                Err(e) => AblationCell {
                    label: label.clone(),
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    let mut summary = Vec::new();
    for (label, _) in spec.ablation.cells() {
        let ok: Vec<&MetricReport> = cells
            .iter()
            .filter(|c| c.label == label)
            .filter_map(|c| c.report.as_ref())
            .collect();
        if !ok.is_empty() {
            summary.push(AblationSummaryRow {
                label,
                n_seeds: ok.len(),
                mean_overall_accuracy: ok.iter().map(|r| r.overall_accuracy).sum::<f64>()
                    / ok.len() as f64,
                mean_small_accuracy: ok.iter().map(|r| r.small_accuracy).sum::<f64>()
                    / ok.len() as f64,
            });
        }
    }
    Ok(AblationReport { cells, summary })
}

fn run_cell<T: Scalar>(
    cfg: &ModelConfig,
    spec: &ExperimentSpec,
    dataset: &Dataset<T>,
) -> Result<MetricReport> {
    cfg.validate()?;
    let prepared = prepare_data(dataset, cfg, &spec.data)?;
    if prepared.train.is_empty() || prepared.eval.is_empty() {
        return Err(Error::Config("dataset split produced an empty train or eval set".into()));
    }
    let outcome = train(&prepared.train, cfg, &spec.train, None)?;
    evaluate(cfg, &outcome.params, &prepared.eval)
}

/// Write the ablation report as CSV + JSON into the spec's output dir.
pub fn write_ablation_report(report: &AblationReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("ablation_cells.csv"), report.to_csv())?;
    std::fs::write(dir.join("ablation_summary.csv"), report.summary_csv())?;
    std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

// ── Complexity probe ─────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub scene_points: usize,
    pub transformer_macs: u64,
    pub tokenize_macs: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// One row per probed scene size, same model config throughout.
    pub rows: Vec<ComplexityRow>,
    /// Transformer MACs with the magnifier on vs off (same scene/text).
    pub magnifier_on_macs: u64,
    pub magnifier_off_macs: u64,
}

impl ComplexityReport {
    pub fn transformer_macs_constant(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].transformer_macs == w[1].transformer_macs)
    }

    pub fn magnifier_ratio(&self) -> f64 {
        self.magnifier_on_macs as f64 / self.magnifier_off_macs as f64
    }
}

/// Measure per-forward multiply-accumulate counts on the same scene layout
/// rendered at increasing point densities. Text input is a fixed synthetic
/// sequence and selection cardinality is pinned to the top 15% of regions,
/// so the only variable is raw scene size; tokenization cost is reported
/// separately from transformer cost.
pub fn complexity_probe<T: Scalar>(
    cfg: &ModelConfig,
    gen: &GenConfig,
    density_mults: &[f64],
) -> Result<ComplexityReport> {
    let mut cfg = cfg.clone();
    if cfg.vocab_size == 0 {
        cfg.vocab_size = Vocab::build().len();
    }
    if cfg.feature_dim == 0 {
        cfg.feature_dim = crate::scenegen::feature_dim();
    }
    cfg.validate()?;
    let instruction: Vec<u32> = (1..=10u32).collect();
    let answer = vec![1u32, EOS];

    let measure = |cfg: &ModelConfig, mult: f64| -> Result<(usize, u64, u64)> {
        let gen_cfg = GenConfig { density_mult: mult, min_points: 0, ..gen.clone() };
        let (field, _) = generate_scene::<T>(777, gen.n_rooms, &gen_cfg)?;
        let points = field.len();
        let scene = PreparedScene::prepare(field, cfg)?;
        let params = ParamStore::<T>::init(cfg)?;
        let layout =
            SequenceLayout::new(cfg.vision_token_num, instruction.clone(), answer.clone())?;
        let fwd = Forward { scene: &scene, cfg, params: &params };
        let mut tape = Tape::new();
        let mut rng = crate::rng_from_seed(0);
        let out = fwd.run(
            &mut tape,
            &layout,
            Phase::Training,
            &mut rng,
            SelectionOverride::TopK { frac: 0.15 },
        )?;
        Ok((points, out.transformer_macs, out.tokenize_macs))
    };

    let mut rows = Vec::new();
    for &mult in density_mults {
        let (points, tr, tok) = measure(&cfg, mult)?;
        rows.push(ComplexityRow { scene_points: points, transformer_macs: tr, tokenize_macs: tok });
    }
    let (_, on_macs, _) = measure(&cfg, density_mults.first().copied().unwrap_or(1.0))?;
    let off_cfg = ModelConfig { dense_token_num: 0, ..cfg.clone() };
    let (_, off_macs, _) = measure(&off_cfg, density_mults.first().copied().unwrap_or(1.0))?;
    Ok(ComplexityReport { rows, magnifier_on_macs: on_macs, magnifier_off_macs: off_macs })
}

pub fn write_complexity_report(report: &ComplexityReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("scene_points,transformer_macs,tokenize_macs\n");
    for r in &report.rows {
        csv.push_str(&format!("{},{},{}\n", r.scene_points, r.transformer_macs, r.tokenize_macs));
    }
    std::fs::write(dir.join("complexity.csv"), csv)?;
    std::fs::write(dir.join("complexity.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

// ── Attention export ─────────────────────────────────────────────────

/// Per magnifier layer: the sliced hidden→sparse map as a PGM heatmap and a
/// plan-view overlay CSV (sparse token center x, y, normalized score,
/// selected flag), plus one jsonl with every selection. Returns the written
/// paths.
pub fn export_attention<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    scene: &PreparedScene<T>,
    question: &[u32],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let layout = SequenceLayout::new(cfg.vision_token_num, question.to_vec(), vec![])?;
    let fwd = Forward { scene, cfg, params };
    let mut tape = Tape::new();
    let mut rng = crate::rng_from_seed(cfg.seed);
    let out = fwd.run(
        &mut tape,
        &layout,
        Phase::Decode { generated: 0 },
        &mut rng,
        SelectionOverride::Normal,
    )?;
    let mut written = Vec::new();
    let mut selection_lines = Vec::new();
    for (layer, (record, selection)) in out.records.iter().zip(&out.selections).enumerate() {
        let Some(selection) = selection else { continue };
        let pgm_path = out_dir.join(format!("attn_layer{layer}.pgm"));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&pgm_path)?);
        crate::attention::write_sliced_pgm(record, &mut w)?;
        written.push(pgm_path);

        let csv_path = out_dir.join(format!("overlay_layer{layer}.csv"));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
        writeln!(w, "x,y,score,selected")?;
        for i in 0..cfg.vision_token_num {
            let c = scene.plan.centers.row(i);
            writeln!(
                w,
                "{},{},{},{}",
                c[0].to64(),
                c[1].to64(),
                selection.scores_u8[i],
                selection.is_selected(i) as u8
            )?;
        }
        written.push(csv_path);
        selection_lines.push((layer, selection));
    }
    let sel_path = out_dir.join("selections.jsonl");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&sel_path)?);
    let refs: Vec<(usize, &crate::selector::SelectionMask)> =
        selection_lines.iter().map(|(l, s)| (*l, *s)).collect();
    crate::selector::write_selections_jsonl(&mut w, &refs)?;
    written.push(sel_path);
    Ok(written)
}

/// Regenerate and persist the spec's dataset directory.
pub fn generate_dataset_to_dir<T: Scalar>(spec: &ExperimentSpec) -> Result<PathBuf> {
    let dir = PathBuf::from(&spec.output_dir).join("dataset");
    write_dataset::<T>(&dir, &spec.data.generator, spec.data.seed_start, spec.data.n_scenes)?;
    Ok(dir)
}

/// Load an experiment spec from JSON or TOML (by extension).
pub fn load_spec(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(serde_json::from_str(&text)?),
        Some("toml") => toml::from_str(&text)
            .map_err(|e| Error::Format { op: "spec", detail: e.to_string() }),
        other => Err(Error::Format {
            op: "spec",
            detail: format!("unknown spec extension {other:?}, expected .json or .toml"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{HeadAgg, Sampler};
    use crate::scenegen::generate_qa;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_sa: 1,
            n_ma: 1,
            heads: 2,
            d_model: 8,
            d_k: 4,
            vision_token_num: 8,
            dense_token_num: 2,
            threshold: 96,
            downsample_points: 64,
            region_radius: 3.0,
            dense_radius: 1.5,
            head_agg: HeadAgg::Mean,
            sampler: Sampler::Fps,
            select_strategy: SelectStrategy::AttentionMap,
            seed: 0,
            sparse_group_size: 6,
            dense_group_size: 4,
            dense_ball_max_points: 24,
            sa_hidden: 6,
            ffn_mult: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_gen() -> GenConfig {
        GenConfig {
            n_rooms: 2,
            base_points_per_object: 12,
            floor_density: 3.0,
            min_points: 128,
            ..GenConfig::default()
        }
    }

    fn tiny_spec() -> ExperimentSpec {
        ExperimentSpec {
            model: tiny_model(),
            train: TrainConfig {
                steps: 2,
                batch_size: 2,
                log_every: 100,
                ..TrainConfig::default()
            },
            data: DataSpec {
                generator: tiny_gen(),
                n_scenes: 4,
                qa_per_scene: Some(2),
                train_frac: 0.5,
                ..DataSpec::default()
            },
            ablation: AblationAxis::Magnifier(vec![
                MagnifierVariant::AttentionMap,
                MagnifierVariant::Off,
            ]),
            seeds: vec![0],
            dtype: Dtype::F64,
            output_dir: "unused".into(),
        }
    }

    #[test]
    fn ablation_grid_runs_all_cells() {
        let spec = tiny_spec();
        let report = run_ablation::<f64>(&spec, None).unwrap();
        assert_eq!(report.cells.len(), 2);
        assert!(report.cells.iter().all(|c| c.report.is_some()), "{:?}", report.cells);
        assert_eq!(report.summary.len(), 2);
        for row in &report.summary {
            assert!((0.0..=1.0).contains(&row.mean_overall_accuracy));
        }
    }

    #[test]
    fn ablation_axis_cells_patch_single_field() {
        let base = tiny_model();
        for (label, patch) in AblationAxis::Threshold(vec![64, 96, 127]).cells() {
            let cfg = patch.apply(&base);
            assert!(label.starts_with("threshold="));
            let mut reset = cfg.clone();
            reset.threshold = base.threshold;
            assert_eq!(reset, base, "only threshold may differ");
        }
        let cells = AblationAxis::DenseTokenNum(vec![2, 4, 6]).cells();
        assert_eq!(cells.len(), 3);
        let cells = AblationAxis::SelectStrategy(vec![
            SelectStrategy::AttentionMap,
            SelectStrategy::Random,
        ])
        .cells();
        assert_eq!(cells.len(), 2);
    }

    #[test]
    fn ablation_report_is_reproducible() {
        let spec = tiny_spec();
        let a = run_ablation::<f64>(&spec, None).unwrap();
        let b = run_ablation::<f64>(&spec, None).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn failing_cell_is_recorded_and_grid_continues() {
        let mut spec = tiny_spec();
        // vision_token_num larger than any scene's point budget → cell error
        spec.ablation = AblationAxis::VisionTokenNum(vec![8, 100_000]);
        let report = run_ablation::<f64>(&spec, None).unwrap();
        assert_eq!(report.cells.len(), 2);
        assert!(report.cells[0].report.is_some());
        assert!(report.cells[1].report.is_none());
        assert!(report.cells[1].error.is_some());
        // summary keeps the healthy cell
        assert_eq!(report.summary.len(), 1);
    }

    #[test]
    fn probe_transformer_macs_constant_and_k0_identity() {
        let cfg = tiny_model();
        let report = complexity_probe::<f64>(&cfg, &tiny_gen(), &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(
            report.transformer_macs_constant(),
            "transformer MACs varied: {:?}",
            report.rows
        );
        // scene sizes must actually differ for the claim to mean anything
        assert!(report.rows[0].scene_points < report.rows[2].scene_points);
        // tokenization cost grows with scene size
        assert!(report.rows[0].tokenize_macs <= report.rows[2].tokenize_macs);
        assert!(report.magnifier_ratio() >= 1.0);

        // K = 0 reproduces the baseline count exactly: the off computation
        // is the on computation with zero dense rows
        let off = complexity_probe::<f64>(
            &ModelConfig { dense_token_num: 0, ..cfg },
            &tiny_gen(),
            &[1.0],
        )
        .unwrap();
        assert_eq!(off.magnifier_on_macs, off.magnifier_off_macs);
    }

    #[test]
    fn export_attention_writes_consistent_overlay() {
        let gen = tiny_gen();
        // first seed whose scene has a unique object to ask about
        let (field, qa) = (3u64..20)
            .find_map(|seed| {
                let (field, rooms) = generate_scene::<f64>(seed, 2, &gen).unwrap();
                let qa = generate_qa(&field, &rooms, seed, &gen);
                (!qa.is_empty()).then_some((field, qa))
            })
            .unwrap();
        let dataset_cfg = tiny_model();
        let mut cfg = dataset_cfg.clone();
        cfg.vocab_size = Vocab::build().len();
        cfg.feature_dim = crate::scenegen::feature_dim();
        let scene = PreparedScene::prepare(field, &cfg).unwrap();
        let params = ParamStore::<f64>::init(&cfg).unwrap();
        let vocab = Vocab::build();
        let question = vocab.encode(&qa[0].question).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_attention(&cfg, &params, &scene, &question, dir.path()).unwrap();
        assert!(files.iter().any(|p| p.extension().is_some_and(|e| e == "pgm")));

        // overlay coordinates match the sparse token centers bit-exactly and
        // the selected flags follow the threshold rule
        let overlay = files
            .iter()
            .find(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("overlay")))
            .unwrap();
        let text = std::fs::read_to_string(overlay).unwrap();
        for (i, line) in text.lines().skip(1).enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            let x: f64 = parts[0].parse().unwrap();
            let y: f64 = parts[1].parse().unwrap();
            let score: u8 = parts[2].parse().unwrap();
            let selected: u8 = parts[3].parse().unwrap();
            let c = scene.plan.centers.row(i);
            assert_eq!(x, c[0]);
            assert_eq!(y, c[1]);
            // fallback can select a below-threshold argmax, never drop an
            // above-threshold token
            if score >= cfg.threshold {
                assert_eq!(selected, 1);
            }
        }
    }

    #[test]
    fn spec_roundtrips_json_and_toml() {
        let spec = tiny_spec();
        let dir = tempfile::tempdir().unwrap();
        let jpath = dir.path().join("spec.json");
        std::fs::write(&jpath, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
        assert_eq!(load_spec(&jpath).unwrap(), spec);
        let tpath = dir.path().join("spec.toml");
        std::fs::write(&tpath, toml::to_string(&spec).unwrap()).unwrap();
        assert_eq!(load_spec(&tpath).unwrap(), spec);
    }

    #[test]
    fn evaluate_counts_small_split_separately() {
        let spec = tiny_spec();
        let dataset = obtain_dataset::<f64>(&spec.data).unwrap();
        let cfg = configure_for_dataset(&spec.model, &dataset);
        let prepared = prepare_data(&dataset, &cfg, &spec.data).unwrap();
        let params = ParamStore::<f64>::init(&cfg).unwrap();
        let report = evaluate(&cfg, &params, &prepared.eval).unwrap();
        assert!(report.overall_count > 0);
        assert!((0.0..=1.0).contains(&report.overall_accuracy));
        assert!(report.small_count <= report.overall_count);
        for f in &report.mean_selected_frac {
            assert!(*f > 0.0 && *f <= 1.0);
        }
    }
}
