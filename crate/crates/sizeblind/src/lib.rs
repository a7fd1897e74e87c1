//! Deterministic image-augmentation engine and experiment harness for
//! studying lesion size as a confounding feature in binary skin-lesion
//! classification.
//!
//! The crate generates synthetic lesion datasets in which apparent size is a
//! controllable class confound, applies class-conditional augmentation
//! policies (rotation, contrast, zoom) with bit-reproducible randomness,
//! measures how strongly size separates the classes, and trains a small
//! from-scratch convolutional network under five augmentation regimes to
//! compare train/test generalization gaps.
//!
//! Everything is a pure function of the master seed: per-sample,
//! per-epoch, per-operation random streams make outputs independent of
//! iteration order and worker count.

pub mod augment;
pub mod error;
pub mod harness;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
