//! Command-line harness: dataset preparation, augmentation, training,
//! evaluation and the training-data-fraction experiment grid.

use clap::{Args, Parser, Subcommand};
use leafnet::augment as augment_op;
use leafnet::checkpoint;
use leafnet::error::{Error, Result};
use leafnet::gallery::{build_gallery, evaluate, EvalReport};
use leafnet::manifest::{
    format_count_table, fraction_split, kfold_split, make_split, scan_folder, DatasetManifest,
    SplitOutcome, SplitSpec,
};
use leafnet::net::NetworkParams;
use leafnet::synthetic;
use leafnet::train::{train, ImageStore, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Full description of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Path to the dataset manifest JSON.
    pub dataset: PathBuf,
    pub split: SplitSpec,
    /// Materialize the 7-transform augmentation before training.
    pub augmentation: bool,
    pub train: TrainConfig,
    pub gallery_seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    fn example() -> Self {
        ExperimentConfig {
            dataset: PathBuf::from("manifest.json"),
            split: SplitSpec::Fraction {
                train_fraction: 0.8,
                seed: 1,
            },
            augmentation: false,
            train: TrainConfig::default(),
            gallery_seed: 1,
            output_dir: PathBuf::from("out"),
        }
    }

    fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.train.validate()?;
        if !config.dataset.exists() {
            return Err(Error::Config(format!(
                "dataset manifest {} does not exist",
                config.dataset.display()
            )));
        }
        Ok(config)
    }
}

#[derive(Parser)]
#[command(
    name = "leafnet",
    about = "Siamese metric-learning toolkit for leaf images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a class-per-subdirectory image folder into a manifest.
    Prepare {
        /// Root folder with one subdirectory per class.
        root: PathBuf,
        /// Output manifest path.
        #[arg(long, default_value = "manifest.json")]
        out: PathBuf,
    },
    /// Materialize the 7 augmentations of every original sample.
    Augment {
        /// Manifest of original samples.
        manifest: PathBuf,
        /// Directory for augmented images and the enhanced manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with per-class signatures.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 60)]
        per_class: usize,
        /// Optional comma-separated per-class counts (overrides --classes/--per-class).
        #[arg(long)]
        counts: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone with contrastive pairs.
    Train(TrainArgs),
    /// Evaluate a checkpoint with majority-voting inference.
    Eval(EvalArgs),
    /// Run the 100%/75%/50% training-data grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, required_unless_present = "init")]
    config: Option<PathBuf>,
    /// Write a default config file (to --config, or stdout) and exit.
    #[arg(long)]
    init: bool,
    /// Override the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Split mode: fraction, kfold or dedicated.
    #[arg(long, default_value = "fraction")]
    mode: String,
    #[arg(long, default_value_t = 0.8)]
    fraction: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Evaluation manifest for dedicated mode.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    split_seed: u64,
    #[arg(long, default_value_t = 1)]
    gallery_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct CheckpointSidecar<'a> {
    train_config: &'a TrainConfig,
    dataset_fingerprint: String,
}

#[derive(Debug, Serialize)]
struct FoldSummary {
    fold_accuracies: Vec<f64>,
    mean_accuracy: f64,
    stddev_accuracy: f64,
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Prepare { root, out } => cmd_prepare(&root, &out),
        Command::Augment { manifest, out } => cmd_augment(&manifest, &out),
        Command::Synth {
            classes,
            per_class,
            counts,
            seed,
            out,
        } => cmd_synth(classes, per_class, counts.as_deref(), seed, &out),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Grid { config, out } => cmd_grid(&config, out.as_deref()),
    }
}

fn cmd_prepare(root: &Path, out: &Path) -> Result<()> {
    let (manifest, skipped) = scan_folder(root)?;
    manifest.save(out)?;
    print!("{}", format_count_table(&manifest));
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} unreadable entries");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_augment(manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let augmented = augment_op::materialize(&manifest, out)?;
    let out_manifest = out.join("manifest.json");
    augmented.save(&out_manifest)?;
    println!(
        "augmented {} originals into {} samples; wrote {}",
        manifest.len(),
        augmented.len(),
        out_manifest.display()
    );
    Ok(())
}

fn cmd_synth(
    classes: usize,
    per_class: usize,
    counts: Option<&str>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let counts: Vec<usize> = match counts {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid count {s:?}")))
            })
            .collect::<Result<_>>()?,
        None => vec![per_class; classes],
    };
    let manifest = synthetic::generate_with_counts(&counts, seed, out)?;
    let out_manifest = out.join("manifest.json");
    manifest.save(&out_manifest)?;
    print!("{}", format_count_table(&manifest));
    println!("wrote {}", out_manifest.display());
    Ok(())
}

/// Resolves the training split of an experiment config, applying the
/// optional augmentation step and the train-data subsampling fraction.
fn training_manifest(
    config: &ExperimentConfig,
    output_dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let mut manifest = DatasetManifest::load(&config.dataset)?;
    if config.augmentation
        && manifest
            .samples
            .iter()
            .all(|s| s.origin == leafnet::manifest::Origin::Original)
    {
        manifest = augment_op::materialize(&manifest, &output_dir.join("augmented"))?;
        manifest.save(&output_dir.join("augmented").join("manifest.json"))?;
    }
    let (mut train_manifest, eval_manifest) = match make_split(&manifest, &config.split)? {
        SplitOutcome::TrainEval { train, eval } => (train, eval),
        SplitOutcome::Folds(_) => {
            return Err(Error::Config(
                "k-fold splits apply to evaluation; use a fraction or dedicated-test split \
                 for training"
                    .into(),
            ))
        }
    };
    if config.train.train_fraction < 1.0 {
        let (sub, _) = fraction_split(
            &train_manifest,
            config.train.train_fraction,
            config.train.seed,
        )?;
        train_manifest = sub;
    }
    Ok((train_manifest, eval_manifest))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if args.init {
        let json = serde_json::to_string_pretty(&ExperimentConfig::example())? + "\n";
        match &args.config {
            Some(path) => {
                std::fs::write(path, &json)?;
                println!("wrote default config to {}", path.display());
            }
            None => print!("{json}"),
        }
        return Ok(());
    }
    let config_path = args.config.expect("clap enforces --config without --init");
    let mut config = ExperimentConfig::load(&config_path)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    std::fs::create_dir_all(&config.output_dir)?;
    let (train_manifest, _) = training_manifest(&config, &config.output_dir)?;
    train_manifest.save(&config.output_dir.join("train_manifest.json"))?;
    let store = ImageStore::load(&train_manifest)?;
    let output = train(
        &config.train,
        &train_manifest,
        &store,
        Some(&config.output_dir),
    )?;
    leafnet::train::write_loss_csv(&output.records, &config.output_dir.join("loss.csv"))?;
    let sidecar = CheckpointSidecar {
        train_config: &config.train,
        dataset_fingerprint: train_manifest.fingerprint(),
    };
    std::fs::write(
        config.output_dir.join("checkpoint_final.meta.json"),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    std::fs::write(
        config.output_dir.join("config_echo.json"),
        serde_json::to_string_pretty(&config)? + "\n",
    )?;
    let final_loss = output.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs over {} samples; final batch loss {final_loss:.6}",
        config.train.epochs,
        train_manifest.len()
    );
    println!(
        "checkpoint: {}",
        config.output_dir.join("checkpoint_final.bin").display()
    );
    Ok(())
}

fn evaluate_split(
    params: &NetworkParams<f32>,
    train_manifest: &DatasetManifest,
    eval_manifest: &DatasetManifest,
    gallery_seed: u64,
) -> Result<EvalReport> {
    let train_store = ImageStore::load(train_manifest)?;
    let gallery = build_gallery(params, train_manifest, &train_store, gallery_seed)?;
    let eval_store = ImageStore::load(eval_manifest)?;
    evaluate(&gallery, params, eval_manifest, &eval_store)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let params = checkpoint::load(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    std::fs::create_dir_all(&args.out)?;
    match args.mode.as_str() {
        "fraction" => {
            let (train_m, eval_m) = fraction_split(&manifest, args.fraction, args.split_seed)?;
            let report = evaluate_split(&params, &train_m, &eval_m, args.gallery_seed)?;
            report.save_json(&args.out.join("report.json"))?;
            report.save_csv(&args.out.join("report.csv"))?;
            println!("overall accuracy: {:.4}", report.overall_accuracy);
        }
        "dedicated" => {
            let test_path = args
                .test_manifest
                .ok_or_else(|| Error::Config("dedicated mode requires --test-manifest".into()))?;
            let eval_m = DatasetManifest::load(&test_path)?;
            let report = evaluate_split(&params, &manifest, &eval_m, args.gallery_seed)?;
            report.save_json(&args.out.join("report.json"))?;
            report.save_csv(&args.out.join("report.csv"))?;
            println!("overall accuracy: {:.4}", report.overall_accuracy);
        }
        "kfold" => {
            let folds = kfold_split(&manifest, args.k, args.split_seed);
            let mut accuracies = Vec::with_capacity(folds.len());
            for (i, (train_m, eval_m)) in folds.iter().enumerate() {
                let report = evaluate_split(&params, train_m, eval_m, args.gallery_seed)?;
                report.save_json(&args.out.join(format!("report_fold_{i:02}.json")))?;
                report.save_csv(&args.out.join(format!("report_fold_{i:02}.csv")))?;
                println!("fold {i}: accuracy {:.4}", report.overall_accuracy);
                accuracies.push(report.overall_accuracy);
            }
            let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
            let variance = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
                / accuracies.len() as f64;
            let summary = FoldSummary {
                fold_accuracies: accuracies,
                mean_accuracy: mean,
                stddev_accuracy: variance.sqrt(),
            };
            std::fs::write(
                args.out.join("summary.json"),
                serde_json::to_string_pretty(&summary)? + "\n",
            )?;
            println!(
                "mean accuracy {:.4} +/- {:.4}",
                summary.mean_accuracy, summary.stddev_accuracy
            );
        }
        other => {
            return Err(Error::Config(format!(
                "unknown eval mode {other:?}; expected fraction, kfold or dedicated"
            )))
        }
    }
    Ok(())
}

const GRID_FRACTIONS: [f64; 3] = [1.0, 0.75, 0.5];

fn cmd_grid(config_path: &Path, out_override: Option<&Path>) -> Result<()> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(out) = out_override {
        config.output_dir = out.to_path_buf();
    }
    std::fs::create_dir_all(&config.output_dir)?;
    // Base split is computed once; the evaluation set stays fixed while
    // the grid subsamples the training pool.
    let (base_train, eval_manifest) = training_manifest(
        &ExperimentConfig {
            train: TrainConfig {
                train_fraction: 1.0,
                ..config.train.clone()
            },
            ..config.clone()
        },
        &config.output_dir,
    )?;
    if eval_manifest.is_empty() {
        return Err(Error::Config(
            "grid needs a held-out evaluation set; use a fraction < 1 or dedicated-test split"
                .into(),
        ));
    }
    let dataset_name = config
        .dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut csv = String::from("dataset,fraction,overall_acc,per_class_json\n");
    let grid_csv = config.output_dir.join("grid.csv");
    for fraction in GRID_FRACTIONS {
        let leg_dir = config.output_dir.join(format!("leg_{fraction}"));
        std::fs::create_dir_all(&leg_dir)?;
        let train_manifest = if fraction < 1.0 {
            fraction_split(&base_train, fraction, config.train.seed)?.0
        } else {
            base_train.clone()
        };
        train_manifest.save(&leg_dir.join("train_manifest.json"))?;
        let store = ImageStore::load(&train_manifest)?;
        let output = train(&config.train, &train_manifest, &store, Some(&leg_dir))?;
        leafnet::train::write_loss_csv(&output.records, &leg_dir.join("loss.csv"))?;
        let report = evaluate_split(
            &output.params,
            &train_manifest,
            &eval_manifest,
            config.gallery_seed,
        )?;
        report.save_json(&leg_dir.join("report.json"))?;
        let per_class: Vec<serde_json::Value> = report
            .per_class_accuracy
            .iter()
            .map(|a| match a {
                Some(v) => serde_json::json!(v),
                None => serde_json::Value::Null,
            })
            .collect();
        csv.push_str(&format!(
            "{dataset_name},{fraction},{},\"{}\"\n",
            report.overall_accuracy,
            serde_json::Value::Array(per_class)
                .to_string()
                .replace('"', "\"\"")
        ));
        // completed legs survive a later failure
        std::fs::write(&grid_csv, &csv)?;
        println!(
            "fraction {fraction}: {} train samples, accuracy {:.4}",
            train_manifest.len(),
            report.overall_accuracy
        );
    }
    println!("wrote {}", grid_csv.display());
    Ok(())
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
