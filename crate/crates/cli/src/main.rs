use std::fs;
use std::path::PathBuf;

use amodal_core::dataset::Dataset;
use amodal_core::inference::{
    evaluate_detector, invariance_probe, run_ablation, visualize_scene, write_ablation_csv, AblationGrid, Detector,
    EvalConfig, EvalReport, InferenceOptions,
};
use amodal_core::model::{AblationVariant, AmodalModel};
use amodal_core::shape_prior::{amodal_shape_masks, build_codebook, train_autoencoder, AutoencoderConfig, ShapeCodebook};
use amodal_core::synth::{default_templates, generate_scenes, make_invariance_pairs, SceneSpec};
use amodal_core::training::{smoothed, train_to_dir, TrainConfig, CHECKPOINT_FILE, LOSS_CURVE_FILE};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "amodal", about = "Synthetic amodal instance segmentation with shape priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render train and val splits of synthetic occlusion scenes.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        categories: usize,
    },
    /// Train the mask autoencoder and cluster its embeddings per category.
    BuildCodebook {
        #[arg(long)]
        data: PathBuf,
        /// Clusters per category.
        #[arg(long, default_value_t = 64)]
        k: usize,
        /// Embedding size.
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write a PCA scatter (PNG + CSV) per category into this directory.
        #[arg(long)]
        projection_dir: Option<PathBuf>,
    },
    /// Train the detector; writes a checkpoint, loss curve and config.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        /// TOML training config; omitted keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<AblationVariant>,
        #[arg(long)]
        no_rescoring: bool,
        /// Append the metrics as one CSV row to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate every row of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Write overlay PNGs (image, GT amodal, coarse, refined) for one scene.
    Visualize {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        scene: usize,
        #[arg(long, default_value = "viz")]
        out: PathBuf,
    },
    /// Compare target predictions across occluder-swap scene pairs.
    Invariance {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 30)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        pair_seed: u64,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
}

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    AblationVariant::parse(s).map_err(|e| e.to_string())
}

fn load_codebook(path: &PathBuf) -> Result<ShapeCodebook> {
    ShapeCodebook::load(path).with_context(|| format!("loading codebook {}", path.display()))
}

fn load_split(dir: &PathBuf, split: &str) -> Result<Dataset> {
    Dataset::load(dir, split).with_context(|| format!("loading split `{split}` from {}", dir.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenerateData { out, n_train, n_val, seed, categories } => {
            if categories == 0 {
                bail!("--categories must be at least 1");
            }
            let templates = default_templates(categories);
            let spec = SceneSpec { seed, ..SceneSpec::default() };
            let train = Dataset::from_scenes(&templates, generate_scenes(&spec, &templates, 0, n_train)?);
            let val = Dataset::from_scenes(&templates, generate_scenes(&spec, &templates, n_train as u64, n_val)?);
            train.save(&out, "train")?;
            val.save(&out, "val")?;
            println!(
                "wrote {} train / {} val scenes ({} / {} instances) to {}",
                train.scenes.len(),
                val.scenes.len(),
                train.num_instances(),
                val.num_instances(),
                out.display()
            );
        }
        Command::BuildCodebook { data, k, dim, seed, epochs, out, projection_dir } => {
            let train = load_split(&data, "train")?;
            let masks = amodal_shape_masks(&train);
            let all: Vec<_> = masks.values().flatten().cloned().collect();
            let cfg = AutoencoderConfig { dim, seed, epochs, ..AutoencoderConfig::default() };
            let (ae, report) = train_autoencoder(&all, &cfg)?;
            let iou = ae.reconstruction_iou(&all)?;
            println!(
                "autoencoder: {} masks, final loss {:.4}, reconstruction IoU {iou:.4}",
                all.len(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
            let codebook = build_codebook(ae, &masks, k, seed)?;
            codebook.save(&out)?;
            println!("{}", serde_json::to_string_pretty(codebook.meta())?);
            if let Some(dir) = projection_dir {
                fs::create_dir_all(&dir)?;
                for cat in codebook.categories() {
                    codebook.write_projection(
                        cat,
                        &dir.join(format!("category{cat}.png")),
                        &dir.join(format!("category{cat}.csv")),
                    )?;
                }
            }
        }
        Command::Train { data, codebook, config, out } => {
            let train = load_split(&data, "train")?;
            let codebook = load_codebook(&codebook)?;
            let cfg = match config {
                Some(p) => TrainConfig::load(&p).with_context(|| format!("reading {}", p.display()))?,
                None => TrainConfig::default(),
            };
            let outcome = train_to_dir(&train, Some(&codebook), &cfg, &out)?;
            let curve = smoothed(&outcome.history.series("amodal_coarse").unwrap_or_default(), 50);
            if let (Some(first), Some(last)) = (curve.get(50.min(curve.len().saturating_sub(1))), curve.last()) {
                println!("smoothed coarse amodal BCE: {first:.4} at iteration 50 -> {last:.4} at the end");
            }
            println!("wrote {} and {} to {}", CHECKPOINT_FILE, LOSS_CURVE_FILE, out.display());
        }
        Command::Eval { model, variant, no_rescoring, csv } => {
            let ds = load_split(&model.data, &model.split)?;
            let codebook = load_codebook(&model.codebook)?;
            let (net, pipeline) = AmodalModel::load_checkpoint(&model.checkpoint)?;
            let eval = EvalConfig::default();
            let opts = InferenceOptions {
                variant,
                rescoring: no_rescoring.then_some(false),
                ..InferenceOptions::from_eval(&eval)
            };
            let detector = Detector::new(&net, &pipeline, Some(&codebook), opts)?;
            let (report, _) = evaluate_detector(&detector, &ds, &eval)?;
            println!("{}", report.pretty());
            println!("{}", EvalReport::CSV_HEADER);
            let row: Vec<String> = report.csv_fields().iter().map(|v| format!("{v:.6}")).collect();
            println!("{}", row.join(","));
            if let Some(path) = csv {
                let fresh = !path.exists();
                let mut text = if fresh { format!("{}\n", EvalReport::CSV_HEADER) } else { String::new() };
                text.push_str(&row.join(","));
                text.push('\n');
                use std::io::Write;
                fs::OpenOptions::new().create(true).append(true).open(&path)?.write_all(text.as_bytes())?;
            }
        }
        Command::Ablate { grid } => {
            let g = AblationGrid::load(&grid)?;
            let train = load_split(&g.data, "train")?;
            let val = load_split(&g.data, "val")?;
            let codebook = load_codebook(&g.codebook)?;
            let results = run_ablation(&train, &val, Some(&codebook), &g.train, &g.rows, &g.seeds, &g.eval)?;
            write_ablation_csv(&results, &g.out)?;
            for r in &results {
                println!("{:<24} AP {:.4}  AR {:.4}  AP(Occluded) {:.4}", r.row.name, r.mean.amodal.ap, r.mean.amodal.ar, r.mean.ap_occluded);
            }
            println!("wrote {}", g.out.display());
        }
        Command::Visualize { model, scene, out } => {
            let ds = load_split(&model.data, &model.split)?;
            let codebook = load_codebook(&model.codebook)?;
            let (net, pipeline) = AmodalModel::load_checkpoint(&model.checkpoint)?;
            let Some(sc) = ds.scenes.get(scene) else {
                bail!("scene {scene} out of range: split has {} scenes", ds.scenes.len());
            };
            let detector = Detector::new(&net, &pipeline, Some(&codebook), InferenceOptions::default())?;
            for p in visualize_scene(&detector, sc, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Invariance { model, pairs, pair_seed } => {
            let ds = load_split(&model.data, &model.split)?;
            let codebook = load_codebook(&model.codebook)?;
            let (net, pipeline) = AmodalModel::load_checkpoint(&model.checkpoint)?;
            let templates = default_templates(ds.num_categories());
            let spec = SceneSpec { seed: pair_seed, ..SceneSpec::default() };
            let pairs = make_invariance_pairs(&spec, &templates, pairs)?;
            let detector = Detector::new(&net, &pipeline, Some(&codebook), InferenceOptions::default())?;
            let report = invariance_probe(&detector, &pairs)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
