//! Lesion size measurement and class-separability statistics.
//!
//! `segment_lesion` + `equivalent_diameter` turn an image into one scalar
//! size estimate. Two complementary instruments then quantify how strongly
//! size separates the classes: a two-sample Kolmogorov-Smirnov test
//! (distribution level) and a one-dimensional threshold probe fit on
//! training diameters and scored on held-out ones (decision level).

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, CHANNELS};
use crate::manifest::{DatasetManifest, Label, LoadedSample, Split};

/// RGB distance from the estimated background above which a pixel counts as
/// lesion.
pub const SEGMENT_TAU: f64 = 0.10;

/// A component smaller than this fraction of the image is not a lesion.
pub const MIN_COMPONENT_FRACTION: f64 = 0.001;

/// Boolean lesion mask; exactly one 4-connected component is retained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LesionMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl LesionMask {
    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "mask length {} does not match {width}x{height}",
                bits.len()
            )));
        }
        Ok(LesionMask { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Segments the lesion with the default threshold [`SEGMENT_TAU`].
pub fn segment_lesion(img: &ImageBuffer) -> Result<LesionMask> {
    segment_lesion_with(img, SEGMENT_TAU)
}

/// Segments against a background color estimated as the per-channel median
/// of the one-pixel border ring, keeping the largest 4-connected component
/// of pixels farther than `tau` from the background.
pub fn segment_lesion_with(img: &ImageBuffer, tau: f64) -> Result<LesionMask> {
    let (w, h) = (img.width(), img.height());
    let bg = border_median(img);
    let tau2 = tau * tau;
    let mut marked = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let px = img.pixel(x, y);
            let mut d2 = 0.0;
            for c in 0..CHANNELS {
                let d = px[c] - bg[c];
                d2 += d * d;
            }
            marked[y * w + x] = d2 > tau2;
        }
    }

    // Largest 4-connected component, first-seen wins ties (row-major scan).
    let mut labels = vec![0u32; w * h];
    let mut best: Option<(usize, u32)> = None;
    let mut next_label = 1u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !marked[start] || labels[start] != 0 {
            continue;
        }
        let label = next_label;
        next_label += 1;
        let mut size = 0usize;
        labels[start] = label;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if marked[j] && labels[j] == 0 {
                    labels[j] = label;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if best.map_or(true, |(s, _)| size > s) {
            best = Some((size, label));
        }
    }

    let (size, label) = best.ok_or(Error::NoLesion)?;
    if (size as f64) < MIN_COMPONENT_FRACTION * (w * h) as f64 {
        return Err(Error::NoLesion);
    }
    let bits = labels.iter().map(|&l| l == label).collect();
    LesionMask::from_bits(w, h, bits)
}

fn border_median(img: &ImageBuffer) -> [f64; 3] {
    let (w, h) = (img.width(), img.height());
    let mut ring: [Vec<f64>; 3] = Default::default();
    let push = |px: [f64; 3], ring: &mut [Vec<f64>; 3]| {
        for c in 0..CHANNELS {
            ring[c].push(px[c]);
        }
    };
    for x in 0..w {
        push(img.pixel(x, 0), &mut ring);
        if h > 1 {
            push(img.pixel(x, h - 1), &mut ring);
        }
    }
    for y in 1..h.saturating_sub(1) {
        push(img.pixel(0, y), &mut ring);
        if w > 1 {
            push(img.pixel(w - 1, y), &mut ring);
        }
    }
    let mut out = [0.0; 3];
    for c in 0..CHANNELS {
        let v = &mut ring[c];
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        out[c] = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
    }
    out
}

/// Diameter of the circle with the same pixel area as the mask:
/// `2 * sqrt(area / pi)`.
pub fn equivalent_diameter(mask: &LesionMask) -> Result<f64> {
    let area = mask.area();
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(2.0 * (area as f64 / std::f64::consts::PI).sqrt())
}

/// Two-sample Kolmogorov-Smirnov test. Returns `(D, p)` where `D` is the
/// supremum distance between the empirical CDFs and `p` comes from the
/// asymptotic Kolmogorov distribution with effective
/// `n = |a||b| / (|a| + |b|)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    const MIN: usize = 5;
    if a.len() < MIN || b.len() < MIN {
        return Err(Error::SampleTooSmall {
            min: MIN,
            a: a.len(),
            b: b.len(),
        });
    }
    let d = ks_statistic(a, b);
    let n_eff = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
    let lambda = (n_eff.sqrt() + 0.12 + 0.11 / n_eff.sqrt()) * d;
    Ok((d, kolmogorov_survival(lambda)))
}

/// Supremum CDF distance, evaluated at every sample point.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.total_cmp(y));
    sb.sort_by(|x, y| x.total_cmp(y));
    let mut d: f64 = 0.0;
    for &x in sa.iter().chain(sb.iter()) {
        let fa = upper_bound(&sa, x) as f64 / sa.len() as f64;
        let fb = upper_bound(&sb, x) as f64 / sb.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

fn upper_bound(sorted: &[f64], x: f64) -> usize {
    sorted.partition_point(|&v| v <= x)
}

/// Survival function of the Kolmogorov distribution,
/// `Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2)`, truncated at
/// k = 100. Below lambda ~ 0.3 the alternating series needs far more terms
/// while the true value is 1 to within 1e-5, so 1 is returned directly;
/// above it the sum converges in a handful of terms. Clamped to [0, 1].
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100u32 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Diameters above the threshold predict malignant.
    MalignantAbove,
    /// Diameters at or below the threshold predict malignant.
    MalignantBelow,
}

/// One-dimensional threshold classifier on estimated diameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeProbe {
    pub threshold: f64,
    pub polarity: Polarity,
}

impl SizeProbe {
    pub fn predict(&self, diameter: f64) -> Label {
        let above = diameter > self.threshold;
        match (self.polarity, above) {
            (Polarity::MalignantAbove, true) | (Polarity::MalignantBelow, false) => Label::Malignant,
            _ => Label::Benign,
        }
    }
}

/// Fits the probe by enumerating every midpoint between consecutive distinct
/// diameters plus sentinels below the minimum and above the maximum, keeping
/// the candidate that maximizes training accuracy. Ties resolve to the
/// smallest threshold, then malignant-above polarity. Thresholds stay finite
/// and positive.
pub fn fit_size_probe(train: &[(f64, Label)]) -> Result<SizeProbe> {
    let n_mal = train.iter().filter(|(_, l)| *l == Label::Malignant).count();
    if n_mal == 0 || n_mal == train.len() || train.is_empty() {
        return Err(Error::OneClassOnly);
    }
    let mut values: Vec<f64> = train.iter().map(|(d, _)| *d).collect();
    values.sort_by(|a, b| a.total_cmp(b));
    values.dedup();
    let mut candidates = Vec::with_capacity(values.len() + 1);
    candidates.push(values[0] / 2.0);
    for pair in values.windows(2) {
        candidates.push(0.5 * (pair[0] + pair[1]));
    }
    candidates.push(values[values.len() - 1] + 1.0);

    let mut best: Option<(f64, SizeProbe)> = None;
    for &threshold in &candidates {
        for polarity in [Polarity::MalignantAbove, Polarity::MalignantBelow] {
            let probe = SizeProbe { threshold, polarity };
            let acc = eval_size_probe(&probe, train)?;
            // Strict improvement keeps the earliest (smallest-threshold,
            // above-polarity) candidate on ties.
            if best.map_or(true, |(b, _)| acc > b) {
                best = Some((acc, probe));
            }
        }
    }
    Ok(best.expect("nonempty candidates").1)
}

/// Fraction of correct predictions.
pub fn eval_size_probe(probe: &SizeProbe, data: &[(f64, Label)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::SampleTooSmall { min: 1, a: 0, b: 0 });
    }
    let correct = data
        .iter()
        .filter(|(d, l)| probe.predict(*d) == *l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Size statistics for one dataset. KS compares the train-split class
/// diameter lists; the probe is fit on the train split and scored on the
/// test split when one is present.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LesionStats {
    pub benign_diameters: Vec<f64>,
    pub malignant_diameters: Vec<f64>,
    pub benign_mean_px: f64,
    pub malignant_mean_px: f64,
    pub ks_d: f64,
    pub ks_p: f64,
    pub probe: SizeProbe,
    pub probe_train_acc: f64,
    pub probe_test_acc: Option<f64>,
    pub skipped: usize,
}

/// Measures diameters for up to `per_class_limit` samples per class within
/// each split (aggregation ordered by sample id; `NoLesion` images are
/// skipped and tallied) and assembles [`LesionStats`].
pub fn size_stats(samples: &[LoadedSample], per_class_limit: usize) -> Result<LesionStats> {
    let mut order: Vec<&LoadedSample> = samples.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    let mut skipped = 0usize;
    let mut train: Vec<(f64, Label)> = Vec::new();
    let mut test: Vec<(f64, Label)> = Vec::new();
    let mut taken = std::collections::HashMap::<(Split, Label), usize>::new();
    for s in order {
        let seen = taken.entry((s.split, s.label)).or_insert(0);
        if *seen >= per_class_limit {
            continue;
        }
        match segment_lesion(&s.image).and_then(|m| equivalent_diameter(&m)) {
            Ok(d) => {
                *seen += 1;
                match s.split {
                    Split::Train => train.push((d, s.label)),
                    Split::Test => test.push((d, s.label)),
                    Split::Validation => {}
                }
            }
            Err(Error::NoLesion) | Err(Error::EmptyMask) => skipped += 1,
            Err(e) => return Err(e),
        }
    }

    let benign: Vec<f64> = train
        .iter()
        .filter(|(_, l)| *l == Label::Benign)
        .map(|(d, _)| *d)
        .collect();
    let malignant: Vec<f64> = train
        .iter()
        .filter(|(_, l)| *l == Label::Malignant)
        .map(|(d, _)| *d)
        .collect();
    if benign.is_empty() || malignant.is_empty() {
        return Err(Error::OneClassOnly);
    }
    let (ks_d, ks_p) = ks_two_sample(&benign, &malignant)?;
    let probe = fit_size_probe(&train)?;
    let probe_train_acc = eval_size_probe(&probe, &train)?;
    let probe_test_acc = if test.is_empty() {
        None
    } else {
        Some(eval_size_probe(&probe, &test)?)
    };
    Ok(LesionStats {
        benign_mean_px: mean(&benign),
        malignant_mean_px: mean(&malignant),
        benign_diameters: benign,
        malignant_diameters: malignant,
        ks_d,
        ks_p,
        probe,
        probe_train_acc,
        probe_test_acc,
        skipped,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Loads a manifest's images and measures them; when `policy` is given, each
/// image is first augmented under it (epoch 0) so the statistics describe
/// the augmented distribution.
pub fn class_size_stats(
    manifest: &DatasetManifest,
    policy: Option<&AugmentationPolicy>,
    master_seed: u64,
    per_class_limit: usize,
) -> Result<LesionStats> {
    let mut samples = manifest.load_images()?;
    if let Some(policy) = policy {
        policy.validate()?;
        for s in &mut samples {
            s.image =
                crate::augment::apply_augmentation(&s.image, &s.id, s.label, policy, master_seed, 0)?;
        }
    }
    size_stats(&samples, per_class_limit)
}
