//! Layer-spec language: a declarative layer list drives both parameter
//! accounting and the trainable network.
//!
//! Fixed layer semantics: Conv2D is 3x3, stride 1, zero same-padding, ReLU;
//! MaxPool2D is 2x2, stride 2; Dense is fully connected with ReLU or
//! softmax; Dropout is inverted dropout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Input { height: usize, width: usize, channels: usize },
    Conv2d { out_channels: usize },
    MaxPool2d,
    Flatten,
    Dense { units: usize, activation: Activation },
    Dropout { rate: f64 },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "Input",
            LayerSpec::Conv2d { .. } => "Conv2D",
            LayerSpec::MaxPool2d => "MaxPooling2D",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Dense { activation: Activation::Relu, .. } => "Dense (ReLU)",
            LayerSpec::Dense { activation: Activation::Softmax, .. } => "Dense (SoftMax)",
            LayerSpec::Dropout { .. } => "Dropout",
        }
    }
}

/// Propagated activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shape {
    Map { height: usize, width: usize, channels: usize },
    Flat { units: usize },
}

impl Shape {
    pub fn describe(&self) -> String {
        match self {
            Shape::Map { height, width, channels } => format!("{height}, {width}, {channels}"),
            Shape::Flat { units } => format!("{units}"),
        }
    }
}

/// Output shape and parameter count for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LayerInfo {
    pub shape: Shape,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    /// The full-size reference stack: five 3x3 conv blocks (64, 128, 256,
    /// 512, 512 channels) on 224x224x3 input, then a descending ReLU dense
    /// head with dropout and a two-way softmax.
    pub fn vgg19() -> Self {
        let mut layers = vec![LayerSpec::Input { height: 224, width: 224, channels: 3 }];
        for (convs, channels) in [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)] {
            for _ in 0..convs {
                layers.push(LayerSpec::Conv2d { out_channels: channels });
            }
            layers.push(LayerSpec::MaxPool2d);
        }
        layers.push(LayerSpec::Flatten);
        for units in [256, 128, 64] {
            layers.push(LayerSpec::Dense { units, activation: Activation::Relu });
            layers.push(LayerSpec::Dropout { rate: 0.5 });
        }
        layers.push(LayerSpec::Dense { units: 2, activation: Activation::Softmax });
        ModelConfig { layers }
    }

    /// Desk-scale configuration preserving the same motifs (conv-conv-pool
    /// blocks, descending dense head, dropout, two-way softmax) on 64x64x3
    /// input.
    pub fn micro() -> Self {
        ModelConfig {
            layers: vec![
                LayerSpec::Input { height: 64, width: 64, channels: 3 },
                LayerSpec::Conv2d { out_channels: 8 },
                LayerSpec::Conv2d { out_channels: 8 },
                LayerSpec::MaxPool2d,
                LayerSpec::Conv2d { out_channels: 16 },
                LayerSpec::Conv2d { out_channels: 16 },
                LayerSpec::MaxPool2d,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 64, activation: Activation::Relu },
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { units: 32, activation: Activation::Relu },
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { units: 2, activation: Activation::Softmax },
            ],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vgg19" => Some(Self::vgg19()),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    pub fn input_shape(&self) -> Result<(usize, usize, usize)> {
        match self.layers.first() {
            Some(LayerSpec::Input { height, width, channels }) => Ok((*height, *width, *channels)),
            _ => Err(Error::InvalidModelConfig("first layer must be Input".into())),
        }
    }

    pub fn total_params(&self) -> Result<u64> {
        Ok(validate_config(self)?.iter().map(|i| i.params).sum())
    }
}

/// Trainable parameters a layer adds on the given input shape.
pub fn param_count(layer: &LayerSpec, input_shape: Shape) -> Result<u64> {
    match (layer, input_shape) {
        (LayerSpec::Conv2d { out_channels }, Shape::Map { channels, .. }) => {
            Ok((3 * 3 * channels * out_channels + out_channels) as u64)
        }
        (LayerSpec::Dense { units, .. }, Shape::Flat { units: fan_in }) => {
            Ok((fan_in * units + units) as u64)
        }
        (LayerSpec::Input { .. }, _)
        | (LayerSpec::MaxPool2d, Shape::Map { .. })
        | (LayerSpec::Flatten, Shape::Map { .. })
        | (LayerSpec::Dropout { .. }, _) => Ok(0),
        (layer, shape) => Err(Error::InvalidModelConfig(format!(
            "{} cannot follow shape {}",
            layer.kind_name(),
            shape.describe()
        ))),
    }
}

/// Propagates shapes layer by layer, checking structural invariants: Input
/// first (and only first), exactly one softmax Dense in last position,
/// Flatten before the first Dense, and pairwise shape compatibility.
/// Returns one `(output shape, parameter count)` row per layer, Input
/// included.
pub fn validate_config(config: &ModelConfig) -> Result<Vec<LayerInfo>> {
    let mismatch = |layer: usize, detail: String| Error::ShapeMismatch { layer, detail };
    let (h, w, c) = config.input_shape()?;
    if h == 0 || w == 0 || c == 0 {
        return Err(mismatch(0, "input dimensions must be positive".into()));
    }
    let mut shape = Shape::Map { height: h, width: w, channels: c };
    let mut rows = vec![LayerInfo { shape, params: 0 }];
    let mut softmax_seen = false;

    for (idx, layer) in config.layers.iter().enumerate().skip(1) {
        if softmax_seen {
            return Err(mismatch(idx, "softmax Dense must be the last layer".into()));
        }
        shape = match layer {
            LayerSpec::Input { .. } => {
                return Err(mismatch(idx, "Input may only appear first".into()));
            }
            LayerSpec::Conv2d { out_channels } => match shape {
                Shape::Map { height, width, .. } => {
                    if *out_channels == 0 {
                        return Err(mismatch(idx, "Conv2D needs at least one channel".into()));
                    }
                    Shape::Map { height, width, channels: *out_channels }
                }
                Shape::Flat { .. } => {
                    return Err(mismatch(idx, "Conv2D after Flatten".into()));
                }
            },
            LayerSpec::MaxPool2d => match shape {
                Shape::Map { height, width, channels } => {
                    if height < 2 || width < 2 {
                        return Err(mismatch(idx, format!("cannot pool {height}x{width}")));
                    }
                    Shape::Map { height: height / 2, width: width / 2, channels }
                }
                Shape::Flat { .. } => {
                    return Err(mismatch(idx, "MaxPool2D after Flatten".into()));
                }
            },
            LayerSpec::Flatten => match shape {
                Shape::Map { height, width, channels } => {
                    Shape::Flat { units: height * width * channels }
                }
                Shape::Flat { .. } => {
                    return Err(mismatch(idx, "Flatten after Flatten".into()));
                }
            },
            LayerSpec::Dense { units, activation } => match shape {
                Shape::Flat { .. } => {
                    if *units == 0 {
                        return Err(mismatch(idx, "Dense needs at least one unit".into()));
                    }
                    if *activation == Activation::Softmax {
                        softmax_seen = true;
                    }
                    Shape::Flat { units: *units }
                }
                Shape::Map { .. } => {
                    return Err(mismatch(idx, "Dense requires Flatten first".into()));
                }
            },
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(mismatch(idx, format!("dropout rate {rate} outside [0, 1)")));
                }
                shape
            }
        };
        let params = param_count(layer, rows[idx - 1].shape)?;
        rows.push(LayerInfo { shape, params });
    }

    if !softmax_seen {
        return Err(Error::InvalidModelConfig(
            "config must end with a softmax Dense layer".into(),
        ));
    }
    Ok(rows)
}

/// Reference layer table for the `vgg19` preset: 29 rows of
/// `(kind, output shape, parameter count)`, the Input row excluded. The
/// `param-table --check-table3` command verifies the preset against it.
pub const REFERENCE_LAYER_TABLE: [(&str, &str, u64); 29] = [
    ("Conv2D", "224, 224, 64", 1792),
    ("Conv2D", "224, 224, 64", 36928),
    ("MaxPooling2D", "112, 112, 64", 0),
    ("Conv2D", "112, 112, 128", 73856),
    ("Conv2D", "112, 112, 128", 147584),
    ("MaxPooling2D", "56, 56, 128", 0),
    ("Conv2D", "56, 56, 256", 295168),
    ("Conv2D", "56, 56, 256", 590080),
    ("Conv2D", "56, 56, 256", 590080),
    ("Conv2D", "56, 56, 256", 590080),
    ("MaxPooling2D", "28, 28, 256", 0),
    ("Conv2D", "28, 28, 512", 1180160),
    ("Conv2D", "28, 28, 512", 2359808),
    ("Conv2D", "28, 28, 512", 2359808),
    ("Conv2D", "28, 28, 512", 2359808),
    ("MaxPooling2D", "14, 14, 512", 0),
    ("Conv2D", "14, 14, 512", 2359808),
    ("Conv2D", "14, 14, 512", 2359808),
    ("Conv2D", "14, 14, 512", 2359808),
    ("Conv2D", "14, 14, 512", 2359808),
    ("MaxPooling2D", "7, 7, 512", 0),
    ("Flatten", "25088", 0),
    ("Dense (ReLU)", "256", 6422784),
    ("Dropout", "256", 0),
    ("Dense (ReLU)", "128", 32896),
    ("Dropout", "128", 0),
    ("Dense (ReLU)", "64", 8256),
    ("Dropout", "64", 0),
    ("Dense (SoftMax)", "2", 130),
];

/// Compares the `vgg19` preset row-for-row against
/// [`REFERENCE_LAYER_TABLE`], including the input anchor and the total.
/// Returns the list of mismatch descriptions (empty = exact match).
pub fn check_reference_table() -> Result<Vec<String>> {
    let config = ModelConfig::vgg19();
    let rows = validate_config(&config)?;
    let mut mismatches = Vec::new();
    if rows[0].shape != (Shape::Map { height: 224, width: 224, channels: 3 }) || rows[0].params != 0
    {
        mismatches.push(format!(
            "input row: got ({}, {})",
            rows[0].shape.describe(),
            rows[0].params
        ));
    }
    if rows.len() - 1 != REFERENCE_LAYER_TABLE.len() {
        mismatches.push(format!(
            "row count: got {} non-input rows, reference has {}",
            rows.len() - 1,
            REFERENCE_LAYER_TABLE.len()
        ));
        return Ok(mismatches);
    }
    for (i, ((kind, shape, params), (layer, row))) in REFERENCE_LAYER_TABLE
        .iter()
        .zip(config.layers.iter().skip(1).zip(rows.iter().skip(1)))
        .enumerate()
    {
        let got = (layer.kind_name(), row.shape.describe(), row.params);
        if got.0 != *kind || got.1 != *shape || got.2 != *params {
            mismatches.push(format!(
                "row {}: expected ({kind}, {shape}, {params}), got ({}, {}, {})",
                i + 1,
                got.0,
                got.1,
                got.2
            ));
        }
    }
    let expected_total: u64 = REFERENCE_LAYER_TABLE.iter().map(|(_, _, p)| p).sum();
    let got_total: u64 = rows.iter().map(|r| r.params).sum();
    if got_total != expected_total {
        mismatches.push(format!("total: expected {expected_total}, got {got_total}"));
    }
    Ok(mismatches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_and_dense_param_counts() {
        let map = Shape::Map { height: 224, width: 224, channels: 3 };
        assert_eq!(
            param_count(&LayerSpec::Conv2d { out_channels: 64 }, map).unwrap(),
            1792
        );
        let flat = Shape::Flat { units: 25088 };
        assert_eq!(
            param_count(&LayerSpec::Dense { units: 256, activation: Activation::Relu }, flat)
                .unwrap(),
            6_422_784
        );
        let flat64 = Shape::Flat { units: 64 };
        assert_eq!(
            param_count(&LayerSpec::Dense { units: 2, activation: Activation::Softmax }, flat64)
                .unwrap(),
            130
        );
        assert_eq!(param_count(&LayerSpec::MaxPool2d, map).unwrap(), 0);
    }

    #[test]
    fn shape_after_first_pool() {
        let rows = validate_config(&ModelConfig::vgg19()).unwrap();
        // Input, Conv, Conv, Pool.
        assert_eq!(
            rows[3].shape,
            Shape::Map { height: 112, width: 112, channels: 64 }
        );
    }

    #[test]
    fn dense_before_flatten_is_rejected() {
        let config = ModelConfig {
            layers: vec![
                LayerSpec::Input { height: 8, width: 8, channels: 3 },
                LayerSpec::Dense { units: 2, activation: Activation::Softmax },
            ],
        };
        assert!(matches!(
            validate_config(&config),
            Err(Error::ShapeMismatch { layer: 1, .. })
        ));
    }

    #[test]
    fn softmax_must_be_last() {
        let mut config = ModelConfig::micro();
        config.layers.push(LayerSpec::Dropout { rate: 0.1 });
        assert!(validate_config(&config).is_err());
    }

    #[test]
    fn micro_flatten_width() {
        let rows = validate_config(&ModelConfig::micro()).unwrap();
        let flatten = rows
            .iter()
            .find(|r| matches!(r.shape, Shape::Flat { .. }))
            .unwrap();
        assert_eq!(flatten.shape, Shape::Flat { units: 4096 });
    }

    #[test]
    fn model_config_json_round_trip() {
        let config = ModelConfig::micro();
        let json = serde_json::to_string(&config).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
    }
}
