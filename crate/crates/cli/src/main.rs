//! Command-line harness: dataset generation, training, evaluation, the
//! ablation grid, the complexity probe, and attention-map export.
//!
//! Every command is driven by one JSON or TOML experiment spec plus an
//! optional `--seed` override; no environment variables are read.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use scene_magnifier::harness::{
    self, complexity_probe, evaluate, export_attention, load_spec, run_ablation,
    write_ablation_report, write_complexity_report, Dtype, ExperimentSpec,
};
use scene_magnifier::model::{load_checkpoint, PreparedScene};
use scene_magnifier::scalar::Scalar;
use scene_magnifier::scenegen::{write_dataset, TaskKind, Vocab};

#[derive(Parser)]
#[command(
    name = "scene-magnifier",
    about = "Coarse-to-fine adaptive scene attention experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the benchmark dataset directory (scenes/, qa/, meta.json)
    GenData {
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the generator's starting seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model on the spec's dataset and write metrics + checkpoint
    Train {
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the model seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained checkpoint (exact-match accuracy, small split)
    Eval {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train/evaluate every ablation cell and emit the report table
    Ablate {
        #[arg(long)]
        spec: PathBuf,
        /// Replaces the spec's seed schedule with this single seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure multiply-accumulate counts across scene sizes
    ProbeFlops {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Density multipliers for the probed scene sizes
        #[arg(long, value_delimiter = ',', default_value = "2.4,9.5,38.0")]
        density_mults: Vec<f64>,
    },
    /// Export per-layer attention heatmaps and selection overlays
    ExportAttn {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene index within the spec's dataset
        #[arg(long, default_value_t = 0)]
        scene_index: usize,
        /// Question text; defaults to the scene's first QA question
        #[arg(long)]
        question: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let (spec_path, seed) = match &cli.cmd {
        Cmd::GenData { spec, seed }
        | Cmd::Train { spec, seed }
        | Cmd::Eval { spec, seed, .. }
        | Cmd::Ablate { spec, seed }
        | Cmd::ProbeFlops { spec, seed, .. }
        | Cmd::ExportAttn { spec, seed, .. } => (spec.clone(), *seed),
    };
    let mut spec = load_spec(&spec_path)
        .with_context(|| format!("loading spec {}", spec_path.display()))?;
    if let Some(seed) = seed {
        spec.model.seed = seed;
        spec.seeds = vec![seed];
        if matches!(cli.cmd, Cmd::GenData { .. }) {
            spec.data.seed_start = seed;
        }
    }
    match spec.dtype {
        Dtype::F32 => run::<f32>(&cli.cmd, &spec),
        Dtype::F64 => run::<f64>(&cli.cmd, &spec),
    }
}

fn run<T: Scalar>(cmd: &Cmd, spec: &ExperimentSpec) -> anyhow::Result<()> {
    let out_dir = PathBuf::from(&spec.output_dir);
    match cmd {
        Cmd::GenData { .. } => {
            let dir = out_dir.join("dataset");
            let meta = write_dataset::<T>(
                &dir,
                &spec.data.generator,
                spec.data.seed_start,
                spec.data.n_scenes,
            )?;
            println!(
                "wrote {} scenes to {} (mean plan area {:.1} m2, {} samples, {} small)",
                meta.n_scenes,
                dir.display(),
                meta.stats.mean_plan_area,
                meta.stats.total_samples,
                meta.stats.small_samples
            );
        }
        Cmd::Train { .. } => {
            let dataset = harness::obtain_dataset::<T>(&spec.data)?;
            let cfg = harness::configure_for_dataset(&spec.model, &dataset);
            cfg.validate()?;
            let prepared = harness::prepare_data(&dataset, &cfg, &spec.data)?;
            println!(
                "training on {} samples ({} eval held out), seed {}",
                prepared.train.len(),
                prepared.eval.len(),
                cfg.seed
            );
            let dir = out_dir.join("train");
            let mut echo = |m: &scene_magnifier::model::StepMetrics| {
                println!(
                    "step {:>5}  loss {:.4}  lr {:.2e}  selected {:.3}",
                    m.step, m.loss, m.lr, m.selected_frac_mean
                );
            };
            let outcome =
                harness::train_model(&cfg, &spec.train, &prepared, Some(&dir), Some(&mut echo))?;
            println!(
                "done: final loss {:.4}, checkpoint at {}",
                outcome.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN),
                dir.join("model.ckpt").display()
            );
            if !prepared.eval.is_empty() {
                let report = evaluate(&cfg, &outcome.params, &prepared.eval)?;
                println!(
                    "eval: overall {:.3} ({} samples), small {:.3} ({} samples)",
                    report.overall_accuracy,
                    report.overall_count,
                    report.small_accuracy,
                    report.small_count
                );
            }
        }
        Cmd::Eval { checkpoint, .. } => {
            let (cfg, params) = load_checkpoint::<T>(checkpoint)?;
            let dataset = harness::obtain_dataset::<T>(&spec.data)?;
            let prepared = harness::prepare_data(&dataset, &cfg, &spec.data)?;
            if prepared.eval.is_empty() {
                bail!("spec produced no evaluation samples");
            }
            let report = evaluate(&cfg, &params, &prepared.eval)?;
            std::fs::create_dir_all(&out_dir)?;
            let path = out_dir.join("eval_report.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!(
                "overall {:.3} ({}), small {:.3} ({}) -> {}",
                report.overall_accuracy,
                report.overall_count,
                report.small_accuracy,
                report.small_count,
                path.display()
            );
        }
        Cmd::Ablate { .. } => {
            let mut echo = |line: &str| println!("{line}");
            let report = run_ablation::<T>(spec, Some(&mut echo))?;
            write_ablation_report(&report, &out_dir)?;
            println!("{}", report.summary_csv());
            println!("report written to {}", out_dir.display());
        }
        Cmd::ProbeFlops { density_mults, .. } => {
            let report = complexity_probe::<T>(&spec.model, &spec.data.generator, density_mults)?;
            write_complexity_report(&report, &out_dir)?;
            for row in &report.rows {
                println!(
                    "{:>8} points: transformer {:>12} MACs, tokenize {:>12} MACs",
                    row.scene_points, row.transformer_macs, row.tokenize_macs
                );
            }
            println!(
                "transformer MACs constant across sizes: {}",
                report.transformer_macs_constant()
            );
            println!(
                "magnifier on/off MAC ratio: {:.3} ({} / {})",
                report.magnifier_ratio(),
                report.magnifier_on_macs,
                report.magnifier_off_macs
            );
        }
        Cmd::ExportAttn { checkpoint, scene_index, question, .. } => {
            let (cfg, params) = load_checkpoint::<T>(checkpoint)?;
            let dataset = harness::obtain_dataset::<T>(&spec.data)?;
            if *scene_index >= dataset.scenes.len() {
                bail!(
                    "scene index {} out of range ({} scenes)",
                    scene_index,
                    dataset.scenes.len()
                );
            }
            let vocab = Vocab::build();
            let question_text = match question {
                Some(q) => q.clone(),
                None => dataset.samples[*scene_index]
                    .iter()
                    .find(|s| matches!(s.task, TaskKind::QaAttribute | TaskKind::QaSpatial))
                    .map(|s| s.question.clone())
                    .context("scene has no QA samples; pass --question")?,
            };
            let ids = vocab.encode(&question_text)?;
            let scene = PreparedScene::prepare(dataset.scenes[*scene_index].clone(), &cfg)?;
            let dir = out_dir.join("attention");
            let files = export_attention(&cfg, &params, &scene, &ids, &dir)?;
            println!("question: {question_text}");
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}
