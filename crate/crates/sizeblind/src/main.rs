//! Command-line interface.
//!
//! Exit codes: 0 success, 1 verification failure (gap ordering, layer-table
//! check, gradient check), 2 usage or I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sizeblind::augment::{augment_dataset, AugmentationPolicy};
use sizeblind::harness::{
    build_verdict, emit_report, run_table_iv, write_verdict, ExperimentConfig,
};
use sizeblind::image::ImageBuffer;
use sizeblind::manifest::{DatasetManifest, Label, Split};
use sizeblind::metrics::class_size_stats;
use sizeblind::model::{
    check_reference_table, evaluate, grad_check, train, validate_config, Model, ModelConfig,
    TrainConfig,
};
use sizeblind::rng::derive_stream;
use sizeblind::synth::{generate_dataset, SynthConfig};
use sizeblind::Error;

#[derive(Parser)]
#[command(
    name = "sizeblind",
    version,
    about = "Deterministic lesion-image augmentation engine and generalization-gap experiment harness"
)]
struct Cli {
    /// Master seed; the sole source of randomness.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// JSON config file (generator config for `synth`, train config for
    /// `train`, experiment config for `experiment`, model config for
    /// `param-table`/`gradcheck`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic lesion dataset (images + manifest.csv).
    Synth {
        /// Split-count preset: `default` (600/100/100) or `paper`
        /// (1686/210/213).
        #[arg(long)]
        counts_preset: Option<String>,
    },
    /// Apply an augmentation policy to every image of a manifest.
    Augment {
        #[command(flatten)]
        manifest: ManifestArg,
        /// Policy preset (`none`, `table1`, `inverse`, `table2`) or
        /// `@policy.json`.
        #[arg(long, default_value = "table1")]
        policy: String,
        /// Epoch index keyed into the augmentation streams.
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        /// Worker threads (0 = one per core). Output bytes do not depend on
        /// this.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Lesion size / separability statistics for a manifest.
    Stats {
        #[command(flatten)]
        manifest: ManifestArg,
        /// Measure under this policy (applied at epoch 0) instead of the
        /// raw images.
        #[arg(long)]
        policy: Option<String>,
        /// Per-class, per-split measurement cap.
        #[arg(long, default_value_t = 400)]
        limit: usize,
    },
    /// Print per-layer output shapes and parameter counts for a model.
    ParamTable {
        /// Model preset: `vgg19` or `micro` (ignored when --config given).
        #[arg(long, default_value = "vgg19")]
        preset: String,
        /// Verify the vgg19 preset against the embedded reference table.
        #[arg(long)]
        check_table3: bool,
    },
    /// Finite-difference gradient verification on the `micro` model.
    Gradcheck {
        /// Number of randomly sampled parameters to verify.
        #[arg(long, default_value_t = 200)]
        checks: usize,
        /// Batch size of random probe images.
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Train a model on a manifest; writes model.bin and history.csv.
    Train {
        #[command(flatten)]
        manifest: ManifestArg,
        /// Training augmentation policy (preset name or `@policy.json`).
        #[arg(long, default_value = "none")]
        policy: String,
        /// Model config: preset name or `@model.json`.
        #[arg(long, default_value = "micro")]
        model: String,
    },
    /// Evaluate a trained model on one split of a manifest.
    Eval {
        #[command(flatten)]
        manifest: ManifestArg,
        /// Trained model file (`model.bin` from `train`).
        #[arg(long)]
        model_file: PathBuf,
        /// Model config the file was trained with.
        #[arg(long, default_value = "micro")]
        model: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluation-time policy (e.g. `table2`).
        #[arg(long)]
        policy: Option<String>,
    },
    /// Run the five-regime experiment, verify the gap ordering, and emit
    /// reports (table_iv.csv/.json, curves, charts, verdict.json).
    Experiment,
}

#[derive(Args)]
struct ManifestArg {
    /// Path to a manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(2)
        }
    }
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path, Error> {
    out.as_deref().ok_or_else(|| {
        Error::InvalidSynthConfig("--out is required for this command".into())
    })
}

fn parse_policy(arg: &str) -> Result<AugmentationPolicy, Error> {
    if let Some(p) = AugmentationPolicy::preset(arg) {
        return Ok(p);
    }
    if let Some(path) = arg.strip_prefix('@') {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return AugmentationPolicy::from_json(&text);
    }
    Err(Error::InvalidPolicy(format!(
        "`{arg}` is neither a preset (none|table1|inverse|table2) nor @file.json"
    )))
}

fn parse_model(arg: &str, config_file: &Option<PathBuf>) -> Result<ModelConfig, Error> {
    if let Some(path) = config_file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return Ok(serde_json::from_str(&text)?);
    }
    if let Some(m) = ModelConfig::preset(arg) {
        return Ok(m);
    }
    if let Some(path) = arg.strip_prefix('@') {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return Ok(serde_json::from_str(&text)?);
    }
    Err(Error::InvalidModelConfig(format!(
        "`{arg}` is neither a preset (vgg19|micro) nor @file.json"
    )))
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<T, Error> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(T::default()),
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.cmd {
        Cmd::Synth { counts_preset } => {
            let out = require_out(&cli.out)?;
            let mut config: SynthConfig = load_json_config(&cli.config)?;
            if let Some(name) = counts_preset {
                config.apply_counts_preset(&name)?;
            }
            let manifest = generate_dataset(&config, cli.seed, out)?;
            let c = manifest.counts();
            println!(
                "generated {} images under {} (train {}, validation {}, test {})",
                c.total(),
                out.display(),
                c.train,
                c.validation,
                c.test
            );
            Ok(0)
        }

        Cmd::Augment { manifest, policy, epoch, workers } => {
            let out = require_out(&cli.out)?;
            let policy = parse_policy(&policy)?;
            let input = DatasetManifest::load(&manifest.manifest)?;
            let result = augment_dataset(&input, &policy, cli.seed, epoch, out, workers)?;
            println!(
                "augmented {} images into {}",
                result.counts().total(),
                out.display()
            );
            Ok(0)
        }

        Cmd::Stats { manifest, policy, limit } => {
            let policy = policy.map(|p| parse_policy(&p)).transpose()?;
            let input = DatasetManifest::load(&manifest.manifest)?;
            let stats = class_size_stats(&input, policy.as_ref(), cli.seed, limit)?;
            #[derive(serde::Serialize)]
            struct StatsOut {
                benign_mean_px: f64,
                malignant_mean_px: f64,
                ks_d: f64,
                ks_p: f64,
                probe_train_acc: f64,
                probe_test_acc: Option<f64>,
                skipped: usize,
            }
            let out = StatsOut {
                benign_mean_px: stats.benign_mean_px,
                malignant_mean_px: stats.malignant_mean_px,
                ks_d: stats.ks_d,
                ks_p: stats.ks_p,
                probe_train_acc: stats.probe_train_acc,
                probe_test_acc: stats.probe_test_acc,
                skipped: stats.skipped,
            };
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(0)
        }

        Cmd::ParamTable { preset, check_table3 } => {
            let config = parse_model(&preset, &cli.config)?;
            let rows = validate_config(&config)?;
            println!("{:<16} {:<16} {:>12}", "Layer", "Output Shape", "Parameters");
            for (layer, row) in config.layers.iter().zip(&rows) {
                println!(
                    "{:<16} {:<16} {:>12}",
                    layer.kind_name(),
                    row.shape.describe(),
                    row.params
                );
            }
            let total: u64 = rows.iter().map(|r| r.params).sum();
            println!("{:<16} {:<16} {:>12}", "Total", "", total);
            if check_table3 {
                let mismatches = check_reference_table()?;
                if mismatches.is_empty() {
                    println!("reference table check: OK (29 rows, total {total})");
                    Ok(0)
                } else {
                    for m in &mismatches {
                        eprintln!("reference table mismatch: {m}");
                    }
                    Ok(1)
                }
            } else {
                Ok(0)
            }
        }

        Cmd::Gradcheck { checks, batch } => {
            let config = match &cli.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str(&text)?
                }
                None => ModelConfig::micro(),
            };
            let model = Model::init(&config, cli.seed)?;
            let (h, w, _) = config.input_shape()?;
            let batch: Vec<(ImageBuffer, Label)> = (0..batch.max(1))
                .map(|i| {
                    let mut rng = derive_stream(cli.seed, &format!("gradcheck-{i}"), 0, "synth")?;
                    let img = ImageBuffer::from_fn(w, h, |_, _| {
                        [
                            rng.uniform(0.0, 1.0).expect("valid"),
                            rng.uniform(0.0, 1.0).expect("valid"),
                            rng.uniform(0.0, 1.0).expect("valid"),
                        ]
                    });
                    let label = if i % 2 == 0 { Label::Benign } else { Label::Malignant };
                    Ok::<_, Error>((img, label))
                })
                .collect::<Result<_, _>>()?;
            let err = grad_check(&model, &batch, checks, cli.seed)?;
            println!("max relative gradient error over {checks} parameters: {err:.3e}");
            Ok(if err < 1e-4 { 0 } else { 1 })
        }

        Cmd::Train { manifest, policy, model } => {
            let out = require_out(&cli.out)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let policy = parse_policy(&policy)?;
            let model_config = parse_model(&model, &None)?;
            let mut tc: TrainConfig = load_json_config(&cli.config)?;
            tc.seed = cli.seed;
            let input = DatasetManifest::load(&manifest.manifest)?;
            let (trained, history) = train(&model_config, &input, &tc, &policy)?;
            trained.save(out.join("model.bin"))?;
            history.save_csv(out.join("history.csv"))?;
            let last = history.epochs.last().expect("epochs >= 1");
            println!(
                "trained {} epochs: train_acc {:.4}, val_acc {:.4}, loss {:.4}",
                history.epochs.len(),
                last.train_acc,
                last.val_acc,
                last.train_loss
            );
            Ok(0)
        }

        Cmd::Eval { manifest, model_file, model, split, policy } => {
            let model_config = parse_model(&model, &cli.config)?;
            let trained = Model::load(&model_config, &model_file)?;
            let split = Split::parse(&split)?;
            let policy = policy.map(|p| parse_policy(&p)).transpose()?;
            let input = DatasetManifest::load(&manifest.manifest)?;
            let accuracy = evaluate(&trained, &input, split, policy.as_ref(), cli.seed)?;
            println!(
                "{}",
                serde_json::json!({ "split": split.as_str(), "accuracy": accuracy })
            );
            Ok(0)
        }

        Cmd::Experiment => {
            let out = require_out(&cli.out)?;
            let mut config: ExperimentConfig = load_json_config(&cli.config)?;
            config.master_seed = cli.seed;
            let result = run_table_iv(&config, &out.join("datasets"))?;
            let verdict = build_verdict(&result);
            emit_report(&result, out)?;
            write_verdict(&verdict, out)?;

            println!("{:<14} {:>10} {:>10} {:>8}", "regime", "train", "test", "gap");
            for (i, name) in sizeblind::harness::REGIME_NAMES.iter().enumerate() {
                let train: f64 = result.replicates.iter().map(|r| r[i].train_accuracy).sum::<f64>()
                    / result.replicates.len() as f64;
                let test: f64 = result.replicates.iter().map(|r| r[i].test_accuracy).sum::<f64>()
                    / result.replicates.len() as f64;
                println!(
                    "{:<14} {:>10.4} {:>10.4} {:>8.4}",
                    name,
                    train,
                    test,
                    result.mean_gap(name)
                );
            }
            for p in &verdict.pairs {
                println!(
                    "gap({}) > gap({}): {}",
                    p.greater,
                    p.lesser,
                    if p.holds { "ok" } else { "VIOLATED" }
                );
            }
            println!(
                "gap(full) = {:.4} (< 0.05: {}), gap(none) - gap(full) = {:.4} (>= 0.05: {})",
                verdict.gap_full,
                verdict.full_gap_below_005,
                verdict.gap_none - verdict.gap_full,
                verdict.none_exceeds_full_by_005
            );
            for n in &verdict.neutralization {
                println!(
                    "size signal [{}]: KS D {:.4} ({:.2}x none), probe test acc {}",
                    n.regime,
                    n.ks_d,
                    n.d_ratio_vs_none,
                    n.probe_test_acc
                        .map(|a| format!("{a:.4}"))
                        .unwrap_or_else(|| "n/a".into())
                );
            }
            println!("verdict: {}", if verdict.pass { "PASS" } else { "FAIL" });
            Ok(if verdict.pass { 0 } else { 1 })
        }
    }
}
