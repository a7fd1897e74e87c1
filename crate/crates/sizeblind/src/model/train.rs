//! Minibatch SGD training loop and evaluation.
//!
//! Each epoch reshuffles the train split from its "shuffle" stream and
//! augments every sample with fresh per-epoch draws. Per-sample gradients
//! are computed in parallel and reduced in batch order, so the result does
//! not depend on worker count.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Label, LoadedSample, Split};
use crate::model::net::{Gradients, Mode, Model};
use crate::model::spec::ModelConfig;
use crate::rng::{derive_stream, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidModelConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidModelConfig("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidModelConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidModelConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Running accuracy over the epoch's augmented minibatches.
    pub train_acc: f64,
    /// Clean validation accuracy after the epoch.
    pub val_acc: f64,
    /// Mean training loss over the epoch.
    pub train_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// CSV with header `epoch,train_acc,val_acc,train_loss`.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("epoch,train_acc,val_acc,train_loss\n");
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                i + 1,
                e.train_acc,
                e.val_acc,
                e.train_loss
            ));
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct SampleResult {
    grads: Gradients,
    loss: f64,
    correct: bool,
}

fn argmax_label(probs: &[f64]) -> Label {
    // Strict comparison: a 0.5/0.5 tie resolves to benign (index 0).
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    if best == Label::Malignant.class_index() {
        Label::Malignant
    } else {
        Label::Benign
    }
}

/// Trains a fresh model on the train split, augmenting per sample per epoch
/// under `policy` and recording per-epoch statistics. Deterministic for a
/// fixed `(config, samples, train config, policy)`.
pub fn train_samples(
    config: &ModelConfig,
    samples: &[LoadedSample],
    tc: &TrainConfig,
    policy: &AugmentationPolicy,
) -> Result<(Model, TrainHistory)> {
    tc.validate()?;
    policy.validate()?;
    let train_idx: Vec<usize> = indices_of(samples, Split::Train);
    let val_idx: Vec<usize> = indices_of(samples, Split::Validation);
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val_idx.is_empty() {
        return Err(Error::EmptySplit("validation".into()));
    }

    let mut model = Model::init(config, tc.seed)?;
    let mut history = TrainHistory::default();

    for epoch in 0..tc.epochs {
        let mut order = train_idx.clone();
        derive_stream(tc.seed, "train", epoch as u64, "shuffle")?.shuffle(&mut order);

        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let results: Vec<Result<SampleResult>> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let (probs, cache) = if policy.is_empty() {
                        let mut drop_rng =
                            derive_stream(tc.seed, &s.id, epoch as u64, "dropout")?;
                        model.forward_sample(&s.image, Mode::Train, &mut drop_rng)?
                    } else {
                        let img = apply_augmentation(
                            &s.image,
                            &s.id,
                            s.label,
                            policy,
                            tc.seed,
                            epoch as u64,
                        )?;
                        let mut drop_rng =
                            derive_stream(tc.seed, &s.id, epoch as u64, "dropout")?;
                        model.forward_sample(&img, Mode::Train, &mut drop_rng)?
                    };
                    let grads = model.backward_sample(&cache, s.label);
                    Ok(SampleResult {
                        grads,
                        loss: -probs[s.label.class_index()].max(1e-12).ln(),
                        correct: argmax_label(&probs) == s.label,
                    })
                })
                .collect();

            let mut acc = Gradients::zeros_like(&model);
            for r in results {
                let r = r?;
                acc.add_assign(&r.grads);
                loss_sum += r.loss;
                if r.correct {
                    correct += 1;
                }
            }
            acc.scale(1.0 / chunk.len() as f64);
            model.sgd_step(&acc, tc.learning_rate, tc.momentum);
        }

        let val_acc = evaluate_indices(&model, samples, &val_idx, None, tc.seed)?;
        history.epochs.push(EpochStats {
            train_acc: correct as f64 / order.len() as f64,
            val_acc,
            train_loss: loss_sum / order.len() as f64,
        });
    }
    Ok((model, history))
}

/// Manifest-level wrapper around [`train_samples`].
pub fn train(
    config: &ModelConfig,
    manifest: &DatasetManifest,
    tc: &TrainConfig,
    policy: &AugmentationPolicy,
) -> Result<(Model, TrainHistory)> {
    let samples = manifest.load_images()?;
    train_samples(config, &samples, tc, policy)
}

fn indices_of(samples: &[LoadedSample], split: Split) -> Vec<usize> {
    samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == split)
        .map(|(i, _)| i)
        .collect()
}

fn evaluate_indices(
    model: &Model,
    samples: &[LoadedSample],
    idx: &[usize],
    policy: Option<&AugmentationPolicy>,
    seed: u64,
) -> Result<f64> {
    let correct: Vec<Result<bool>> = idx
        .par_iter()
        .map(|&i| {
            let s = &samples[i];
            let probs = match policy {
                Some(p) if !p.is_empty() => {
                    let img = apply_augmentation(&s.image, &s.id, s.label, p, seed, 0)?;
                    model.forward_sample(&img, Mode::Eval, &mut RngState::new(0))?.0
                }
                _ => model.forward_sample(&s.image, Mode::Eval, &mut RngState::new(0))?.0,
            };
            Ok(argmax_label(&probs) == s.label)
        })
        .collect();
    let mut n_correct = 0usize;
    for c in correct {
        if c? {
            n_correct += 1;
        }
    }
    Ok(n_correct as f64 / idx.len() as f64)
}

/// Accuracy of `model` on one split. When `policy` is given each image is
/// augmented deterministically (epoch 0) before evaluation.
pub fn evaluate_samples(
    model: &Model,
    samples: &[LoadedSample],
    split: Split,
    policy: Option<&AugmentationPolicy>,
    seed: u64,
) -> Result<f64> {
    if let Some(p) = policy {
        p.validate()?;
    }
    let idx = indices_of(samples, split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    evaluate_indices(model, samples, &idx, policy, seed)
}

/// Manifest-level wrapper around [`evaluate_samples`].
pub fn evaluate(
    model: &Model,
    manifest: &DatasetManifest,
    split: Split,
    policy: Option<&AugmentationPolicy>,
    seed: u64,
) -> Result<f64> {
    let samples = manifest.load_images()?;
    evaluate_samples(model, &samples, split, policy, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::SplitCounts;
    use crate::synth::{generate_in_memory, SynthConfig};

    fn tiny_net() -> ModelConfig {
        use crate::model::spec::{Activation, LayerSpec};
        ModelConfig {
            layers: vec![
                LayerSpec::Input { height: 32, width: 32, channels: 3 },
                LayerSpec::Conv2d { out_channels: 4 },
                LayerSpec::MaxPool2d,
                LayerSpec::Conv2d { out_channels: 8 },
                LayerSpec::MaxPool2d,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 16, activation: Activation::Relu },
                LayerSpec::Dense { units: 2, activation: Activation::Softmax },
            ],
        }
    }

    fn tiny_dataset(train: usize, val: usize, test: usize, seed: u64) -> Vec<LoadedSample> {
        let mut cfg = SynthConfig::default();
        cfg.image_size = 32;
        cfg.malignant_diameter_mean = 12.0;
        cfg.diameter_std = 1.0;
        cfg.center_jitter = 0.05;
        cfg.split_counts = SplitCounts::new(train, val, test);
        generate_in_memory(&cfg, seed).unwrap()
    }

    #[test]
    fn eight_sample_set_is_memorized() {
        let samples = tiny_dataset(8, 2, 2, 5);
        let tc = TrainConfig {
            epochs: 60,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let (model, history) =
            train_samples(&tiny_net(), &samples, &tc, &AugmentationPolicy::empty()).unwrap();
        let train_acc =
            evaluate_samples(&model, &samples, Split::Train, None, tc.seed).unwrap();
        assert_eq!(train_acc, 1.0, "history tail: {:?}", history.epochs.last());
    }

    #[test]
    fn training_is_deterministic() {
        let samples = tiny_dataset(8, 2, 2, 6);
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 4,
            ..TrainConfig::default()
        };
        let policy = AugmentationPolicy::table1();
        let (m1, h1) = train_samples(&tiny_net(), &samples, &tc, &policy).unwrap();
        let (m2, h2) = train_samples(&tiny_net(), &samples, &tc, &policy).unwrap();
        assert_eq!(h1, h2);
        for i in 0..m1.param_total() {
            assert_eq!(m1.param_get(i), m2.param_get(i), "param {i}");
        }
    }

    #[test]
    fn history_length_equals_epochs() {
        let samples = tiny_dataset(4, 2, 2, 7);
        let tc = TrainConfig {
            epochs: 20,
            batch_size: 4,
            seed: 1,
            ..TrainConfig::default()
        };
        let (_, history) =
            train_samples(&tiny_net(), &samples, &tc, &AugmentationPolicy::empty()).unwrap();
        assert_eq!(history.epochs.len(), 20);
    }

    #[test]
    fn empty_split_is_rejected() {
        let samples = tiny_dataset(4, 0, 2, 8);
        let tc = TrainConfig::default();
        assert!(matches!(
            train_samples(&tiny_net(), &samples, &tc, &AugmentationPolicy::empty()),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn zero_weight_model_predicts_majority_class() {
        // All-zero weights give 0.5/0.5 everywhere; ties resolve to benign.
        let samples = tiny_dataset(5, 2, 2, 9);
        let zeroed = Model::zeroed(&tiny_net()).unwrap();
        let acc = evaluate_samples(&zeroed, &samples, Split::Train, None, 0).unwrap();
        let benign = samples
            .iter()
            .filter(|s| s.split == Split::Train && s.label == Label::Benign)
            .count() as f64;
        assert_eq!(acc, benign / 5.0);
    }

    #[test]
    fn evaluation_is_repeatable() {
        let samples = tiny_dataset(4, 2, 4, 10);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 2,
            ..TrainConfig::default()
        };
        let (model, _) =
            train_samples(&tiny_net(), &samples, &tc, &AugmentationPolicy::empty()).unwrap();
        let policy = AugmentationPolicy::table2();
        let a = evaluate_samples(&model, &samples, Split::Test, Some(&policy), 3).unwrap();
        let b = evaluate_samples(&model, &samples, Split::Test, Some(&policy), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn history_csv_has_expected_header() {
        let history = TrainHistory {
            epochs: vec![EpochStats { train_acc: 0.5, val_acc: 0.25, train_loss: 0.7 }],
        };
        let path = std::env::temp_dir().join("sizeblind-history.csv");
        history.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_acc,val_acc,train_loss\n"));
        assert!(text.contains("1,0.500000,0.250000,0.700000"));
    }
}
