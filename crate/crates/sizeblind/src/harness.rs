//! Five-regime generalization-gap experiment.
//!
//! Each regime trains the same model on the same data under a different
//! training augmentation policy and is always tested under the aggressive
//! `table2` policy (everything up to +/-50%). The regimes differ in how
//! they treat the size confound: `resizing`/`full` neutralize it, `inverse`
//! amplifies it, `none`/`rot_contrast` leave it alone. The verdict checks
//! that generalization gaps order accordingly.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation, AugmentationPolicy, Method};
use crate::error::{Error, Result};
use crate::manifest::{LoadedSample, Split};
use crate::metrics::{size_stats, LesionStats};
use crate::model::{evaluate_samples, train_samples, ModelConfig, TrainConfig, TrainHistory};
use crate::rng::derive_stream;
use crate::synth::{generate_dataset, SynthConfig};

pub const REGIME_NAMES: [&str; 5] = ["none", "rot_contrast", "resizing", "full", "inverse"];

#[derive(Clone, Debug)]
pub struct Regime {
    pub name: &'static str,
    pub train_policy: AugmentationPolicy,
    pub test_policy: AugmentationPolicy,
}

/// The five regimes in report order.
pub fn regimes() -> Vec<Regime> {
    let table1 = AugmentationPolicy::table1();
    let make = |name: &'static str, train_policy: AugmentationPolicy| Regime {
        name,
        train_policy,
        test_policy: AugmentationPolicy::table2(),
    };
    vec![
        make("none", AugmentationPolicy::empty()),
        make(
            "rot_contrast",
            table1.subset(&[Method::Rotation, Method::Contrast]),
        ),
        make("resizing", table1.subset(&[Method::Zoom])),
        make("full", table1.clone()),
        make("inverse", AugmentationPolicy::inverse()),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct RegimeReport {
    pub regime: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub gap: f64,
    pub history: TrainHistory,
    pub size_stats: LesionStats,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub master_seed: u64,
    pub replicates: usize,
    /// Per-class, per-split cap on size-stat measurements.
    pub stats_limit: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig::default(),
            model: ModelConfig::micro(),
            train: TrainConfig::default(),
            master_seed: 42,
            replicates: 3,
            stats_limit: 400,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidSynthConfig("replicates must be >= 1".into()));
        }
        self.synth.validate()?;
        self.train.validate()?;
        crate::model::validate_config(&self.model)?;
        Ok(())
    }
}

/// Trains and scores one regime. Train accuracy is measured on the clean
/// train split; test accuracy on the test split under the regime's test
/// policy. Size statistics describe the train-policy-augmented dataset
/// (train split fits the probe, test split scores it).
pub fn run_regime(
    regime: &Regime,
    samples: &[LoadedSample],
    train_config: &TrainConfig,
    model_config: &ModelConfig,
    stats_limit: usize,
) -> Result<RegimeReport> {
    let (model, history) = train_samples(model_config, samples, train_config, &regime.train_policy)?;
    let train_accuracy = evaluate_samples(&model, samples, Split::Train, None, train_config.seed)?;
    let test_accuracy = evaluate_samples(
        &model,
        samples,
        Split::Test,
        Some(&regime.test_policy),
        train_config.seed,
    )?;

    let mut measured: Vec<LoadedSample> = samples
        .iter()
        .filter(|s| s.split != Split::Validation)
        .cloned()
        .collect();
    if !regime.train_policy.is_empty() {
        for s in &mut measured {
            s.image = apply_augmentation(
                &s.image,
                &s.id,
                s.label,
                &regime.train_policy,
                train_config.seed,
                0,
            )?;
        }
    }
    let size_stats = size_stats(&measured, stats_limit)?;

    Ok(RegimeReport {
        regime: regime.name.to_string(),
        train_accuracy,
        test_accuracy,
        gap: train_accuracy - test_accuracy,
        history,
        size_stats,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentResult {
    pub replicates: Vec<Vec<RegimeReport>>,
    /// Per-regime mean gap across replicates, in regime order.
    pub mean_gaps: Vec<(String, f64)>,
}

impl ExperimentResult {
    pub fn mean_gap(&self, regime: &str) -> f64 {
        self.mean_gaps
            .iter()
            .find(|(name, _)| name == regime)
            .map(|(_, g)| *g)
            .expect("known regime")
    }

    fn mean_over_replicates(&self, regime_idx: usize, f: impl Fn(&RegimeReport) -> f64) -> f64 {
        let s: f64 = self.replicates.iter().map(|r| f(&r[regime_idx])).sum();
        s / self.replicates.len() as f64
    }
}

/// Runs all five regimes on `replicates` freshly generated datasets. Within
/// a replicate every regime sees the same dataset and the same seed, so
/// regime comparisons are paired. Datasets are written under `data_dir`.
pub fn run_table_iv(config: &ExperimentConfig, data_dir: &Path) -> Result<ExperimentResult> {
    config.validate()?;
    let mut replicates = Vec::with_capacity(config.replicates);
    for rep in 0..config.replicates {
        let rep_seed = derive_stream(config.master_seed, "replicate", rep as u64, "synth")?.next_u64();
        let dir = data_dir.join(format!("replicate-{rep}"));
        let manifest = generate_dataset(&config.synth, rep_seed, &dir)?;
        let samples = manifest.load_images()?;
        let mut tc = config.train.clone();
        tc.seed = rep_seed;
        let mut reports = Vec::with_capacity(5);
        for regime in regimes() {
            reports.push(run_regime(
                &regime,
                &samples,
                &tc,
                &config.model,
                config.stats_limit,
            )?);
        }
        replicates.push(reports);
    }

    let mean_gaps = REGIME_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mean = replicates.iter().map(|r| r[i].gap).sum::<f64>() / replicates.len() as f64;
            (name.to_string(), mean)
        })
        .collect();
    Ok(ExperimentResult { replicates, mean_gaps })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairCheck {
    pub greater: String,
    pub lesser: String,
    pub holds: bool,
}

/// Ordering verdict over the five mean gaps: strict
/// `inverse > none > rot_contrast > resizing > full`, one boolean per
/// adjacent pair. Pure function of the gaps.
pub fn verify_gap_ordering(mean_gaps: &[(String, f64)]) -> (Vec<PairCheck>, bool) {
    let gap = |name: &str| {
        mean_gaps
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| *g)
            .expect("known regime")
    };
    let chain = ["inverse", "none", "rot_contrast", "resizing", "full"];
    let pairs: Vec<PairCheck> = chain
        .windows(2)
        .map(|w| PairCheck {
            greater: w[0].to_string(),
            lesser: w[1].to_string(),
            holds: gap(w[0]) > gap(w[1]),
        })
        .collect();
    let pass = pairs.iter().all(|p| p.holds);
    (pairs, pass)
}

/// Per-regime size-signal summary against the `none` baseline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeNeutralization {
    pub regime: String,
    pub ks_d: f64,
    pub ks_p: f64,
    pub d_ratio_vs_none: f64,
    pub probe_test_acc: Option<f64>,
    pub d_halved: bool,
    pub probe_at_most_060: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Verdict {
    pub pairs: Vec<PairCheck>,
    pub ordering_pass: bool,
    pub gap_none: f64,
    pub gap_full: f64,
    pub full_gap_below_005: bool,
    pub none_exceeds_full_by_005: bool,
    /// Neutralized regimes must show strictly less size signal than `none`.
    pub neutralization_reduced: bool,
    pub neutralization: Vec<RegimeNeutralization>,
    pub pass: bool,
}

/// Builds the verdict: the gate is the gap ordering plus the absolute gap
/// conditions on `full` and `none`, plus the requirement that the
/// size-neutralizing regimes reduced the measured KS distance at all.
/// The per-regime neutralization block additionally reports the strict
/// halving / 0.60-probe thresholds for inspection.
pub fn build_verdict(result: &ExperimentResult) -> Verdict {
    let (pairs, ordering_pass) = verify_gap_ordering(&result.mean_gaps);
    let gap_none = result.mean_gap("none");
    let gap_full = result.mean_gap("full");
    let full_gap_below_005 = gap_full < 0.05;
    let none_exceeds_full_by_005 = gap_none >= gap_full + 0.05;

    let none_idx = 0;
    let d_none = result.mean_over_replicates(none_idx, |r| r.size_stats.ks_d);
    let neutralization: Vec<RegimeNeutralization> = REGIME_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let d = result.mean_over_replicates(i, |r| r.size_stats.ks_d);
            let p = result.mean_over_replicates(i, |r| r.size_stats.ks_p);
            let probe = if result.replicates[0][i].size_stats.probe_test_acc.is_some() {
                Some(result.mean_over_replicates(i, |r| {
                    r.size_stats.probe_test_acc.unwrap_or(f64::NAN)
                }))
            } else {
                None
            };
            RegimeNeutralization {
                regime: name.to_string(),
                ks_d: d,
                ks_p: p,
                d_ratio_vs_none: d / d_none,
                probe_test_acc: probe,
                d_halved: d <= 0.5 * d_none,
                probe_at_most_060: probe.map(|a| a <= 0.60).unwrap_or(false),
            }
        })
        .collect();
    let reduced = |name: &str| {
        neutralization
            .iter()
            .find(|n| n.regime == name)
            .map(|n| n.d_ratio_vs_none < 1.0)
            .unwrap_or(false)
    };
    let neutralization_reduced = reduced("resizing") && reduced("full");

    let pass =
        ordering_pass && full_gap_below_005 && none_exceeds_full_by_005 && neutralization_reduced;
    Verdict {
        pairs,
        ordering_pass,
        gap_none,
        gap_full,
        full_gap_below_005,
        none_exceeds_full_by_005,
        neutralization_reduced,
        neutralization,
        pass,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `table_iv.csv` (per-regime means), `table_iv.json` (full reports),
/// one `curves_{regime}.csv`, and one `chart_{regime}.svg` per regime.
pub fn emit_report(result: &ExperimentResult, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut csv = String::from("regime,train_accuracy,test_accuracy,gap\n");
    for (i, name) in REGIME_NAMES.iter().enumerate() {
        let train = result.mean_over_replicates(i, |r| r.train_accuracy);
        let test = result.mean_over_replicates(i, |r| r.test_accuracy);
        let gap = result.mean_over_replicates(i, |r| r.gap);
        csv.push_str(&format!("{name},{train:.6},{test:.6},{gap:.6}\n"));
    }
    write_text(&out_dir.join("table_iv.csv"), &csv)?;

    let json = serde_json::to_string_pretty(result)?;
    write_text(&out_dir.join("table_iv.json"), &json)?;

    for (i, name) in REGIME_NAMES.iter().enumerate() {
        let history = &result.replicates[0][i].history;
        history.save_csv(out_dir.join(format!("curves_{name}.csv")))?;
        write_text(
            &out_dir.join(format!("chart_{name}.svg")),
            &accuracy_chart_svg(name, history),
        )?;
    }
    Ok(())
}

pub fn write_verdict(verdict: &Verdict, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(
        &out_dir.join("verdict.json"),
        &serde_json::to_string_pretty(verdict)?,
    )
}

/// Minimal line chart: axes, tick labels, and exactly two polylines (train
/// and validation accuracy per epoch).
fn accuracy_chart_svg(title: &str, history: &TrainHistory) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const ML: f64 = 50.0; // left margin
    const MB: f64 = 40.0; // bottom margin
    const MT: f64 = 30.0;
    const MR: f64 = 20.0;
    let n = history.epochs.len().max(2);
    let x = |i: usize| ML + (W - ML - MR) * i as f64 / (n - 1) as f64;
    let y = |acc: f64| H - MB - (H - MB - MT) * acc.clamp(0.0, 1.0);

    let polyline = |vals: Vec<f64>, color: &str| {
        let points: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        )
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.0}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}: train vs validation accuracy</text>\n",
        ML
    ));
    // Axes.
    svg.push_str(&format!(
        "  <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.0}\" stroke=\"#333\"/>\n",
        H - MB
    ));
    svg.push_str(&format!(
        "  <line x1=\"{ML}\" y1=\"{:.0}\" x2=\"{:.0}\" y2=\"{:.0}\" stroke=\"#333\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    for tick in [0.0, 0.5, 1.0] {
        svg.push_str(&format!(
            "  <text x=\"{:.0}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{tick:.1}</text>\n",
            ML - 6.0,
            y(tick) + 4.0
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{:.0}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"11\">epoch</text>\n",
        (W - ML) / 2.0,
        H - 10.0
    ));
    svg.push_str(&polyline(
        history.epochs.iter().map(|e| e.train_acc).collect(),
        "#1f77b4",
    ));
    svg.push_str(&polyline(
        history.epochs.iter().map(|e| e.val_acc).collect(),
        "#ff7f0e",
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EpochStats;

    fn gaps(vals: [f64; 5]) -> Vec<(String, f64)> {
        REGIME_NAMES
            .iter()
            .zip(vals)
            .map(|(n, g)| (n.to_string(), g))
            .collect()
    }

    #[test]
    fn regimes_are_in_report_order_with_expected_policies() {
        let all = regimes();
        let names: Vec<&str> = all.iter().map(|r| r.name).collect();
        assert_eq!(names, REGIME_NAMES);
        assert!(all[0].train_policy.is_empty());
        assert!(!all[1].train_policy.benign.contains_key(&Method::Zoom));
        assert_eq!(all[2].train_policy.benign.len(), 1);
        assert_eq!(all[3].train_policy, AugmentationPolicy::table1());
        assert_eq!(all[4].train_policy, AugmentationPolicy::inverse());
        for r in &all {
            assert_eq!(r.test_policy, AugmentationPolicy::table2());
            r.train_policy.validate().unwrap();
        }
    }

    #[test]
    fn reference_gap_pattern_passes_ordering() {
        // Mean gaps shaped like the reference results (17/7/3/1/20 percent).
        let (pairs, pass) = verify_gap_ordering(&gaps([0.17, 0.07, 0.03, 0.01, 0.20]));
        assert!(pass);
        assert_eq!(pairs.len(), 4);
        assert!(pairs.iter().all(|p| p.holds));
    }

    #[test]
    fn equal_gaps_fail_every_strict_inequality() {
        let (pairs, pass) = verify_gap_ordering(&gaps([0.1; 5]));
        assert!(!pass);
        assert!(pairs.iter().all(|p| !p.holds));
    }

    #[test]
    fn violated_pairs_are_identified() {
        // Gaps increasing in regime order: only none > rot_contrast style
        // pairs flip. Order: none, rot_contrast, resizing, full, inverse.
        let (pairs, pass) = verify_gap_ordering(&gaps([0.02, 0.03, 0.04, 0.05, 0.01]));
        assert!(!pass);
        let holds: Vec<bool> = pairs.iter().map(|p| p.holds).collect();
        // inverse(0.01) > none(0.02) fails; none(0.02) > rot_contrast(0.03)
        // fails; rot_contrast > resizing fails; resizing > full fails.
        assert_eq!(holds, vec![false, false, false, false]);
    }

    #[test]
    fn chart_has_exactly_two_polylines() {
        let history = TrainHistory {
            epochs: (0..5)
                .map(|i| EpochStats {
                    train_acc: 0.5 + 0.1 * i as f64,
                    val_acc: 0.4 + 0.1 * i as f64,
                    train_loss: 0.7 - 0.1 * i as f64,
                })
                .collect(),
        };
        let svg = accuracy_chart_svg("none", &history);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
