//! Procedural lesion-image generator.
//!
//! Renders soft-edged blobs over a skin-toned background. Lesion size is a
//! class confound by construction (benign diameters average 80% of malignant
//! ones), while a small class-conditional color shift provides a
//! size-independent signal, so neutralizing size must not erase all class
//! information. Border irregularity comes from low-order radial harmonics.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{write_image, ImageBuffer};
use crate::manifest::{DatasetManifest, Label, LoadedSample, Sample, Split, SplitCounts};
use crate::rng::{derive_stream, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Square image edge in pixels.
    pub image_size: usize,
    /// Mean malignant lesion diameter in pixels.
    pub malignant_diameter_mean: f64,
    /// Benign mean diameter as a fraction of the malignant mean.
    pub benign_diameter_ratio: f64,
    /// Diameter standard deviation (both classes), pixels.
    pub diameter_std: f64,
    /// Radial harmonic amplitude bound per class.
    pub benign_irregularity: f64,
    pub malignant_irregularity: f64,
    /// Base colors, RGB in [0, 1].
    pub lesion_color: [f64; 3],
    pub skin_color: [f64; 3],
    /// Class-conditional lesion color offsets: the size-independent signal.
    pub benign_color_shift: [f64; 3],
    pub malignant_color_shift: [f64; 3],
    /// Per-pixel Gaussian noise standard deviation.
    pub noise_std: f64,
    /// Center jitter bound as a fraction of the image size.
    pub center_jitter: f64,
    pub split_counts: SplitCounts,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            malignant_diameter_mean: 24.0,
            benign_diameter_ratio: 0.8,
            diameter_std: 2.5,
            benign_irregularity: 0.05,
            malignant_irregularity: 0.15,
            lesion_color: [0.45, 0.27, 0.22],
            skin_color: [0.80, 0.62, 0.55],
            benign_color_shift: [0.0, 0.0, 0.0],
            malignant_color_shift: [0.06, 0.0, 0.0],
            noise_std: 0.02,
            center_jitter: 0.10,
            split_counts: SplitCounts::new(600, 100, 100),
        }
    }
}

impl SynthConfig {
    /// Named split-count presets: `default` (600/100/100) and `paper`
    /// (1686/210/213).
    pub fn apply_counts_preset(&mut self, name: &str) -> Result<()> {
        self.split_counts = match name {
            "default" => SplitCounts::new(600, 100, 100),
            "paper" => SplitCounts::new(1686, 210, 213),
            other => {
                return Err(Error::InvalidSynthConfig(format!(
                    "unknown counts preset `{other}`"
                )))
            }
        };
        Ok(())
    }

    pub fn mean_diameter(&self, label: Label) -> f64 {
        match label {
            Label::Benign => self.malignant_diameter_mean * self.benign_diameter_ratio,
            Label::Malignant => self.malignant_diameter_mean,
        }
    }

    pub fn irregularity(&self, label: Label) -> f64 {
        match label {
            Label::Benign => self.benign_irregularity,
            Label::Malignant => self.malignant_irregularity,
        }
    }

    pub fn color_shift(&self, label: Label) -> [f64; 3] {
        match label {
            Label::Benign => self.benign_color_shift,
            Label::Malignant => self.malignant_color_shift,
        }
    }

    pub fn lesion_fill(&self, label: Label) -> [f64; 3] {
        let shift = self.color_shift(label);
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (self.lesion_color[c] + shift[c]).clamp(0.0, 1.0);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::InvalidSynthConfig("image_size below 16".into()));
        }
        if !(self.benign_diameter_ratio > 0.0 && self.benign_diameter_ratio <= 1.0) {
            return Err(Error::InvalidSynthConfig(
                "benign_diameter_ratio must lie in (0, 1]".into(),
            ));
        }
        if self.diameter_std < 0.0 || self.noise_std < 0.0 {
            return Err(Error::InvalidSynthConfig("negative std".into()));
        }
        for irr in [self.benign_irregularity, self.malignant_irregularity] {
            // Four harmonics, each bounded by irr: r > 0 needs 4 * irr < 1.
            if !(0.0..0.25).contains(&irr) {
                return Err(Error::InvalidSynthConfig(
                    "irregularity must lie in [0, 0.25)".into(),
                ));
            }
        }
        if !(0.0..=0.25).contains(&self.center_jitter) {
            return Err(Error::InvalidSynthConfig(
                "center_jitter must lie in [0, 0.25]".into(),
            ));
        }
        // Lesions must fit with >= 4 px margin at the 99th percentile.
        // Irregularity allowance uses the expected harmonic amplitude sum
        // (2 * irr for four uniform harmonics).
        let p99_radius = (self.malignant_diameter_mean + 2.326 * self.diameter_std) / 2.0
            * (1.0 + 2.0 * self.malignant_irregularity.max(self.benign_irregularity));
        let extent = p99_radius + self.center_jitter * self.image_size as f64;
        if extent > self.image_size as f64 / 2.0 - 4.0 {
            return Err(Error::InvalidSynthConfig(format!(
                "lesions do not fit: 99th-percentile extent {extent:.1} px exceeds frame margin"
            )));
        }
        Ok(())
    }
}

/// Star-shaped radial profile `r(theta) = R (1 + sum a_k cos(k theta + phi_k))`
/// for k = 2..=5.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialProfile {
    pub base_radius: f64,
    pub harmonics: [(f64, f64); 4],
}

impl RadialProfile {
    pub fn radius(&self, theta: f64) -> f64 {
        let mut m = 1.0;
        for (k, &(a, phi)) in (2..=5).zip(self.harmonics.iter()) {
            m += a * (k as f64 * theta + phi).cos();
        }
        self.base_radius * m
    }

    pub fn max_radius(&self) -> f64 {
        let slack: f64 = self.harmonics.iter().map(|(a, _)| a.abs()).sum();
        self.base_radius * (1.0 + slack)
    }

    pub fn min_radius(&self) -> f64 {
        let slack: f64 = self.harmonics.iter().map(|(a, _)| a.abs()).sum();
        self.base_radius * (1.0 - slack)
    }
}

/// Draws a profile: base radius from the class diameter distribution
/// (Gaussian truncated at three sigma), then amplitude and phase per
/// harmonic. Draw order is fixed: diameter, then (a_k, phi_k) pairs for
/// k = 2..=5.
pub fn sample_shape(rng: &mut RngState, config: &SynthConfig, label: Label) -> RadialProfile {
    let diameter = rng.normal_trunc3(config.mean_diameter(label), config.diameter_std);
    let irr = config.irregularity(label);
    let mut harmonics = [(0.0, 0.0); 4];
    for slot in harmonics.iter_mut() {
        let a = rng.uniform(-irr, irr).expect("valid range");
        let phi = rng.uniform(0.0, std::f64::consts::TAU).expect("valid range");
        *slot = (a, phi);
    }
    RadialProfile {
        base_radius: diameter / 2.0,
        harmonics,
    }
}

/// Rasterizes one lesion image from the given stream. All randomness
/// (shape, center jitter, pixel noise) comes from `rng`, in a fixed order.
pub fn render_image(config: &SynthConfig, label: Label, rng: &mut RngState) -> ImageBuffer {
    let shape = sample_shape(rng, config, label);
    let size = config.image_size;
    let jitter = config.center_jitter * size as f64;
    let c0 = (size - 1) as f64 / 2.0;
    let cx = c0 + rng.uniform(-jitter, jitter).expect("valid range");
    let cy = c0 + rng.uniform(-jitter, jitter).expect("valid range");

    let lesion = config.lesion_fill(label);
    let skin = config.skin_color;
    let r_out = shape.max_radius() + 0.75;
    let r_in = (shape.min_radius() - 0.75).max(0.0);
    let (r_out2, r_in2) = (r_out * r_out, r_in * r_in);

    let mut img = ImageBuffer::new(size, size);
    // 2x2 supersampling at offsets +/-0.25 around each pixel center.
    const SUB: [f64; 2] = [-0.25, 0.25];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let d2 = dx * dx + dy * dy;
            let coverage = if d2 >= r_out2 {
                0.0
            } else if d2 <= r_in2 {
                1.0
            } else {
                let mut inside = 0u32;
                for oy in SUB {
                    for ox in SUB {
                        let (sx, sy) = (dx + ox, dy + oy);
                        let rho2 = sx * sx + sy * sy;
                        let r = shape.radius(sy.atan2(sx));
                        if rho2 <= r * r {
                            inside += 1;
                        }
                    }
                }
                inside as f64 / 4.0
            };
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = skin[c] + coverage * (lesion[c] - skin[c]);
            }
            img.set_pixel(x, y, px);
        }
    }

    if config.noise_std > 0.0 {
        let data = img.data_mut();
        let mut i = 0;
        while i < data.len() {
            let (z0, z1) = rng.normal_pair();
            data[i] = (data[i] + config.noise_std * z0).clamp(0.0, 1.0);
            if i + 1 < data.len() {
                data[i + 1] = (data[i + 1] + config.noise_std * z1).clamp(0.0, 1.0);
            }
            i += 2;
        }
    }
    img
}

/// Renders one sample using its id-keyed stream.
pub fn render_sample(
    config: &SynthConfig,
    label: Label,
    split: Split,
    id: &str,
    master_seed: u64,
) -> Result<LoadedSample> {
    let mut rng = derive_stream(master_seed, id, 0, "synth")?;
    Ok(LoadedSample {
        id: id.to_string(),
        label,
        split,
        image: render_image(config, label, &mut rng),
    })
}

fn split_label(index: usize, count: usize) -> Label {
    // Balanced halves; an odd count gives the extra sample to benign.
    if index < count.div_ceil(2) {
        Label::Benign
    } else {
        Label::Malignant
    }
}

/// Generates the configured dataset under `out_dir` (one PPM per sample plus
/// `manifest.csv`) and returns the manifest. Ids are `synth-{split}-{n}`;
/// each split is class-balanced. Output depends only on `(config, seed)`.
pub fn generate_dataset(
    config: &SynthConfig,
    master_seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut plan = Vec::new();
    for split in Split::ALL {
        let count = config.split_counts.get(split);
        for n in 0..count {
            let id = format!("synth-{}-{}", split.as_str(), n);
            plan.push((id, split_label(n, count), split));
        }
    }

    let records: Vec<Result<Sample>> = plan
        .par_iter()
        .map(|(id, label, split)| {
            let run = || -> Result<Sample> {
                let sample = render_sample(config, *label, *split, id, master_seed)?;
                let filename = format!("{id}.ppm");
                write_image(&sample.image, out_dir.join(&filename))?;
                Ok(Sample {
                    id: id.clone(),
                    path: filename,
                    label: *label,
                    split: *split,
                })
            };
            run().map_err(|e| Error::for_record(id, e))
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(out_dir, records)?;
    manifest.save(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Generates the dataset directly in memory (no files). Byte-identical to
/// the images [`generate_dataset`] writes.
pub fn generate_in_memory(config: &SynthConfig, master_seed: u64) -> Result<Vec<LoadedSample>> {
    config.validate()?;
    let mut plan = Vec::new();
    for split in Split::ALL {
        let count = config.split_counts.get(split);
        for n in 0..count {
            let id = format!("synth-{}-{}", split.as_str(), n);
            plan.push((id, split_label(n, count), split));
        }
    }
    plan.par_iter()
        .map(|(id, label, split)| render_sample(config, *label, *split, id, master_seed))
        .collect()
}
