//! The trainable network: 64-bit forward/backward passes, SGD with
//! momentum, finite-difference gradient verification, and flat binary
//! serialization.
//!
//! Determinism contract: initialization draws from per-layer "init"
//! streams, dropout masks from caller-provided streams, and every reduction
//! runs in a fixed order, so parameters and outputs are bit-reproducible
//! for a given seed regardless of thread count.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::manifest::Label;
use crate::model::spec::{validate_config, Activation, LayerSpec, ModelConfig};
use crate::rng::{derive_stream, RngState};

const MAGIC: &[u8; 5] = b"SBLD1";

/// Channel-major feature maps: `data[c][y][x]`.
#[derive(Clone, Debug, Default)]
pub struct Planes {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Planes {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Planes { c, h, w, data: vec![0.0; c * h * w] }
    }

    #[inline]
    fn plane(&self, i: usize) -> &[f64] {
        &self.data[i * self.h * self.w..(i + 1) * self.h * self.w]
    }

    #[inline]
    fn plane_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[i * n..(i + 1) * n]
    }
}

#[derive(Clone, Debug)]
enum Feat {
    Map(Planes),
    Flat(Vec<f64>),
}

impl Feat {
    fn flat(&self) -> &[f64] {
        match self {
            Feat::Flat(v) => v,
            Feat::Map(_) => panic!("expected flat feature"),
        }
    }

    fn map(&self) -> &Planes {
        match self {
            Feat::Map(p) => p,
            Feat::Flat(_) => panic!("expected map feature"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    kernel: Vec<f64>, // [cout][cin][3][3]
    bias: Vec<f64>,
    vel_kernel: Vec<f64>,
    vel_bias: Vec<f64>,
}

#[derive(Clone, Debug)]
struct DenseLayer {
    nin: usize,
    nout: usize,
    weight: Vec<f64>, // [nout][nin]
    bias: Vec<f64>,
    vel_weight: Vec<f64>,
    vel_bias: Vec<f64>,
    activation: Activation,
}

#[derive(Clone, Debug)]
enum Layer {
    Input,
    Conv(ConvLayer),
    Pool,
    Flatten,
    Dense(DenseLayer),
    Dropout { rate: f64 },
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    input: (usize, usize, usize), // h, w, c
    layers: Vec<Layer>,
}

/// Per-layer gradient buffers mirroring the model's parameter tensors.
#[derive(Clone, Debug)]
pub struct Gradients {
    slots: Vec<GradSlot>,
}

#[derive(Clone, Debug)]
enum GradSlot {
    None,
    Conv { kernel: Vec<f64>, bias: Vec<f64> },
    Dense { weight: Vec<f64>, bias: Vec<f64> },
}

/// Per-sample forward intermediates retained for the backward pass.
pub struct SampleCache {
    feats: Vec<Feat>,
    pool_idx: Vec<Option<Vec<u32>>>,
    drop_mask: Vec<Option<Vec<f64>>>,
}

pub struct BatchCache {
    samples: Vec<SampleCache>,
}

impl Model {
    /// He-uniform initialization: weights uniform in +/-sqrt(6/fan_in) drawn
    /// from the per-layer "init" stream, biases and velocities zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model> {
        validate_config(config)?;
        let mut model = Model::zeroed(config)?;
        for (idx, layer) in model.layers.iter_mut().enumerate() {
            let mut rng = derive_stream(seed, &idx.to_string(), 0, "init")?;
            match layer {
                Layer::Conv(conv) => {
                    let limit = (6.0 / (9 * conv.cin) as f64).sqrt();
                    for w in conv.kernel.iter_mut() {
                        *w = rng.uniform(-limit, limit).expect("valid range");
                    }
                }
                Layer::Dense(dense) => {
                    let limit = (6.0 / dense.nin as f64).sqrt();
                    for w in dense.weight.iter_mut() {
                        *w = rng.uniform(-limit, limit).expect("valid range");
                    }
                }
                _ => {}
            }
        }
        Ok(model)
    }

    /// All parameters zero; such a model predicts the uniform distribution.
    pub fn zeroed(config: &ModelConfig) -> Result<Model> {
        let rows = validate_config(config)?;
        let input = config.input_shape()?;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (idx, spec) in config.layers.iter().enumerate() {
            layers.push(match spec {
                LayerSpec::Input { .. } => Layer::Input,
                LayerSpec::Conv2d { out_channels } => {
                    let cin = match rows[idx - 1].shape {
                        crate::model::spec::Shape::Map { channels, .. } => channels,
                        _ => unreachable!("validated"),
                    };
                    let k = cin * out_channels * 9;
                    Layer::Conv(ConvLayer {
                        cin,
                        cout: *out_channels,
                        kernel: vec![0.0; k],
                        bias: vec![0.0; *out_channels],
                        vel_kernel: vec![0.0; k],
                        vel_bias: vec![0.0; *out_channels],
                    })
                }
                LayerSpec::MaxPool2d => Layer::Pool,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense { units, activation } => {
                    let nin = match rows[idx - 1].shape {
                        crate::model::spec::Shape::Flat { units } => units,
                        _ => unreachable!("validated"),
                    };
                    Layer::Dense(DenseLayer {
                        nin,
                        nout: *units,
                        weight: vec![0.0; nin * units],
                        bias: vec![0.0; *units],
                        vel_weight: vec![0.0; nin * units],
                        vel_bias: vec![0.0; *units],
                        activation: *activation,
                    })
                }
                LayerSpec::Dropout { rate } => Layer::Dropout { rate: *rate },
            });
        }
        Ok(Model { config: config.clone(), input, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Classes of the final softmax layer.
    pub fn output_units(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense(d)) => d.nout,
            _ => unreachable!("validated"),
        }
    }

    fn image_to_planes(&self, img: &ImageBuffer) -> Result<Planes> {
        let (h, w, c) = self.input;
        if img.height() != h || img.width() != w || c != 3 {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!(
                    "image {}x{} does not match input {h}x{w}",
                    img.height(),
                    img.width()
                ),
            });
        }
        let mut planes = Planes::zeros(c, h, w);
        for ch in 0..c {
            let plane = planes.plane_mut(ch);
            for y in 0..h {
                for x in 0..w {
                    // Center intensities around zero.
                    plane[y * w + x] = img.get(x, y, ch) - 0.5;
                }
            }
        }
        Ok(planes)
    }

    /// Runs one image through the network. Dropout draws (train mode only)
    /// come from `rng`.
    pub fn forward_sample(
        &self,
        img: &ImageBuffer,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<(Vec<f64>, SampleCache)> {
        let n = self.layers.len();
        let mut cache = SampleCache {
            feats: Vec::with_capacity(n),
            pool_idx: vec![None; n],
            drop_mask: vec![None; n],
        };
        cache.feats.push(Feat::Map(self.image_to_planes(img)?));
        for (idx, layer) in self.layers.iter().enumerate().skip(1) {
            let feat = match layer {
                Layer::Input => unreachable!("validated"),
                Layer::Conv(conv) => Feat::Map(conv_forward(cache.feats[idx - 1].map(), conv)),
                Layer::Pool => {
                    let (out, argmax) = pool_forward(cache.feats[idx - 1].map());
                    cache.pool_idx[idx] = Some(argmax);
                    Feat::Map(out)
                }
                Layer::Flatten => Feat::Flat(cache.feats[idx - 1].map().data.clone()),
                Layer::Dense(dense) => Feat::Flat(dense_forward(cache.feats[idx - 1].flat(), dense)),
                Layer::Dropout { rate } => {
                    let inp = cache.feats[idx - 1].flat();
                    if mode == Mode::Train && *rate > 0.0 {
                        let keep_scale = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..inp.len())
                            .map(|_| if rng.unit() >= *rate { keep_scale } else { 0.0 })
                            .collect();
                        let out = inp.iter().zip(&mask).map(|(v, m)| v * m).collect();
                        cache.drop_mask[idx] = Some(mask);
                        Feat::Flat(out)
                    } else {
                        Feat::Flat(inp.to_vec())
                    }
                }
            };
            cache.feats.push(feat);
        }
        let probs = cache.feats[n - 1].flat().to_vec();
        Ok((probs, cache))
    }

    /// Batch forward; samples are processed in order against a single
    /// dropout stream.
    pub fn forward(
        &self,
        batch: &[ImageBuffer],
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<(Vec<Vec<f64>>, BatchCache)> {
        let mut probs = Vec::with_capacity(batch.len());
        let mut caches = Vec::with_capacity(batch.len());
        for img in batch {
            let (p, c) = self.forward_sample(img, mode, rng)?;
            probs.push(p);
            caches.push(c);
        }
        Ok((probs, BatchCache { samples: caches }))
    }

    /// Gradient of the per-sample cross-entropy with respect to every
    /// parameter. The caller averages per-sample gradients over the batch.
    pub fn backward_sample(&self, cache: &SampleCache, label: Label) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        let n = self.layers.len();
        let probs = cache.feats[n - 1].flat();
        // Combined softmax + cross-entropy gradient at the logits.
        let mut g: Vec<f64> = probs.to_vec();
        g[label.class_index()] -= 1.0;

        let mut g_map: Option<Planes> = None;
        for idx in (1..n).rev() {
            match &self.layers[idx] {
                Layer::Input => unreachable!("validated"),
                Layer::Dense(dense) => {
                    if dense.activation == Activation::Relu {
                        let out = cache.feats[idx].flat();
                        for (gi, o) in g.iter_mut().zip(out) {
                            if *o <= 0.0 {
                                *gi = 0.0;
                            }
                        }
                    }
                    let inp = cache.feats[idx - 1].flat();
                    let (gw, gb) = grads.dense_mut(idx);
                    for (o, &go) in g.iter().enumerate() {
                        gb[o] += go;
                        axpy(&mut gw[o * dense.nin..(o + 1) * dense.nin], go, inp);
                    }
                    let mut gin = vec![0.0; dense.nin];
                    for (o, &go) in g.iter().enumerate() {
                        axpy(&mut gin, go, &dense.weight[o * dense.nin..(o + 1) * dense.nin]);
                    }
                    g = gin;
                }
                Layer::Dropout { .. } => {
                    if let Some(mask) = &cache.drop_mask[idx] {
                        for (gi, m) in g.iter_mut().zip(mask) {
                            *gi *= m;
                        }
                    }
                }
                Layer::Flatten => {
                    let shape = cache.feats[idx - 1].map();
                    let mut planes = Planes::zeros(shape.c, shape.h, shape.w);
                    planes.data.copy_from_slice(&g);
                    g_map = Some(planes);
                }
                Layer::Pool => {
                    let inp = cache.feats[idx - 1].map();
                    let gout = g_map.take().expect("map gradient");
                    let idxs = cache.pool_idx[idx].as_ref().expect("pool cache");
                    let mut gin = Planes::zeros(inp.c, inp.h, inp.w);
                    for (&i, &gv) in idxs.iter().zip(gout.data.iter()) {
                        gin.data[i as usize] += gv;
                    }
                    g_map = Some(gin);
                }
                Layer::Conv(conv) => {
                    let out = cache.feats[idx].map();
                    let inp = cache.feats[idx - 1].map();
                    let mut gout = g_map.take().expect("map gradient");
                    // ReLU mask from the stored post-activation output.
                    for (gv, &o) in gout.data.iter_mut().zip(out.data.iter()) {
                        if o <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    let (gk, gb) = grads.conv_mut(idx);
                    let gin = conv_backward(inp, conv, &gout, gk, gb);
                    g_map = Some(gin);
                }
            }
        }
        grads
    }

    /// Batch gradient: per-sample gradients summed in order and averaged.
    pub fn backward(&self, cache: &BatchCache, labels: &[Label]) -> Gradients {
        assert_eq!(cache.samples.len(), labels.len());
        let mut grads = Gradients::zeros_like(self);
        for (sample, label) in cache.samples.iter().zip(labels) {
            grads.add_assign(&self.backward_sample(sample, *label));
        }
        grads.scale(1.0 / labels.len().max(1) as f64);
        grads
    }

    /// Momentum SGD update: `v <- momentum * v - lr * g; w <- w + v`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, momentum: f64) {
        for (layer, slot) in self.layers.iter_mut().zip(&grads.slots) {
            match (layer, slot) {
                (Layer::Conv(conv), GradSlot::Conv { kernel, bias }) => {
                    momentum_update(&mut conv.kernel, &mut conv.vel_kernel, kernel, lr, momentum);
                    momentum_update(&mut conv.bias, &mut conv.vel_bias, bias, lr, momentum);
                }
                (Layer::Dense(dense), GradSlot::Dense { weight, bias }) => {
                    momentum_update(&mut dense.weight, &mut dense.vel_weight, weight, lr, momentum);
                    momentum_update(&mut dense.bias, &mut dense.vel_bias, bias, lr, momentum);
                }
                _ => {}
            }
        }
    }

    pub fn param_total(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.kernel.len() + c.bias.len(),
                Layer::Dense(d) => d.weight.len() + d.bias.len(),
                _ => 0,
            })
            .sum()
    }

    pub fn param_get(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            for tensor in layer_tensors(layer) {
                if idx < tensor.len() {
                    return tensor[idx];
                }
                idx -= tensor.len();
            }
        }
        panic!("parameter index out of range");
    }

    pub fn param_add(&mut self, mut idx: usize, delta: f64) {
        for layer in &mut self.layers {
            for tensor in layer_tensors_mut(layer) {
                if idx < tensor.len() {
                    tensor[idx] += delta;
                    return;
                }
                idx -= tensor.len();
            }
        }
        panic!("parameter index out of range");
    }

    /// Flat binary format: magic `SBLD1`, tensor count, then per tensor a
    /// rank byte, u32 dims, and little-endian f64 values in layer order
    /// (conv kernel, conv bias, dense weight, dense bias).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let tensors = self.tensor_specs();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (dims, data) in tensors {
            out.push(dims.len() as u8);
            for d in &dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }

    fn tensor_specs(&self) -> Vec<(Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push((vec![c.cout, c.cin, 3, 3], c.kernel.as_slice()));
                    out.push((vec![c.cout], c.bias.as_slice()));
                }
                Layer::Dense(d) => {
                    out.push((vec![d.nout, d.nin], d.weight.as_slice()));
                    out.push((vec![d.nout], d.bias.as_slice()));
                }
                _ => {}
            }
        }
        out
    }

    pub fn load(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |d: &str| Error::InvalidModelFile(d.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..5] != MAGIC {
            return Err(bad("missing SBLD1 magic"));
        }
        let mut pos = 5;
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            let b: [u8; 4] = bytes
                .get(*pos..*pos + 4)
                .ok_or_else(|| bad("truncated"))?
                .try_into()
                .unwrap();
            *pos += 4;
            Ok(u32::from_le_bytes(b))
        };
        let count = read_u32(&mut pos)? as usize;

        let mut model = Model::zeroed(config)?;
        let expected = model.tensor_specs().len();
        if count != expected {
            return Err(bad(&format!("expected {expected} tensors, file has {count}")));
        }
        for layer in &mut model.layers {
            let mut fill = |dims_expect: &[usize], data: &mut [f64]| -> Result<()> {
                let rank = *bytes.get(pos).ok_or_else(|| bad("truncated"))? as usize;
                pos += 1;
                if rank != dims_expect.len() {
                    return Err(bad("tensor rank mismatch"));
                }
                for &d in dims_expect {
                    let got = {
                        let b: [u8; 4] = bytes
                            .get(pos..pos + 4)
                            .ok_or_else(|| bad("truncated"))?
                            .try_into()
                            .unwrap();
                        pos += 4;
                        u32::from_le_bytes(b) as usize
                    };
                    if got != d {
                        return Err(bad(&format!("tensor dim {got} does not match config {d}")));
                    }
                }
                for v in data.iter_mut() {
                    let b: [u8; 8] = bytes
                        .get(pos..pos + 8)
                        .ok_or_else(|| bad("truncated"))?
                        .try_into()
                        .unwrap();
                    pos += 8;
                    *v = f64::from_le_bytes(b);
                }
                Ok(())
            };
            match layer {
                Layer::Conv(c) => {
                    let (cout, cin) = (c.cout, c.cin);
                    fill(&[cout, cin, 3, 3], &mut c.kernel)?;
                    fill(&[cout], &mut c.bias)?;
                }
                Layer::Dense(d) => {
                    let (nout, nin) = (d.nout, d.nin);
                    fill(&[nout, nin], &mut d.weight)?;
                    fill(&[nout], &mut d.bias)?;
                }
                _ => {}
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }
}

fn layer_tensors(layer: &Layer) -> Vec<&[f64]> {
    match layer {
        Layer::Conv(c) => vec![&c.kernel, &c.bias],
        Layer::Dense(d) => vec![&d.weight, &d.bias],
        _ => vec![],
    }
}

fn layer_tensors_mut(layer: &mut Layer) -> Vec<&mut [f64]> {
    match layer {
        Layer::Conv(c) => vec![&mut c.kernel, &mut c.bias],
        Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
        _ => vec![],
    }
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Gradients {
        let slots = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => GradSlot::Conv {
                    kernel: vec![0.0; c.kernel.len()],
                    bias: vec![0.0; c.bias.len()],
                },
                Layer::Dense(d) => GradSlot::Dense {
                    weight: vec![0.0; d.weight.len()],
                    bias: vec![0.0; d.bias.len()],
                },
                _ => GradSlot::None,
            })
            .collect();
        Gradients { slots }
    }

    fn conv_mut(&mut self, idx: usize) -> (&mut [f64], &mut [f64]) {
        match &mut self.slots[idx] {
            GradSlot::Conv { kernel, bias } => (kernel, bias),
            _ => panic!("not a conv slot"),
        }
    }

    fn dense_mut(&mut self, idx: usize) -> (&mut [f64], &mut [f64]) {
        match &mut self.slots[idx] {
            GradSlot::Dense { weight, bias } => (weight, bias),
            _ => panic!("not a dense slot"),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            match (a, b) {
                (
                    GradSlot::Conv { kernel: ka, bias: ba },
                    GradSlot::Conv { kernel: kb, bias: bb },
                ) => {
                    add_slices(ka, kb);
                    add_slices(ba, bb);
                }
                (
                    GradSlot::Dense { weight: wa, bias: ba },
                    GradSlot::Dense { weight: wb, bias: bb },
                ) => {
                    add_slices(wa, wb);
                    add_slices(ba, bb);
                }
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for slot in &mut self.slots {
            match slot {
                GradSlot::Conv { kernel, bias } => {
                    kernel.iter_mut().for_each(|v| *v *= s);
                    bias.iter_mut().for_each(|v| *v *= s);
                }
                GradSlot::Dense { weight, bias } => {
                    weight.iter_mut().for_each(|v| *v *= s);
                    bias.iter_mut().for_each(|v| *v *= s);
                }
                GradSlot::None => {}
            }
        }
    }

    pub fn param_get(&self, mut idx: usize) -> f64 {
        for slot in &self.slots {
            let tensors: Vec<&[f64]> = match slot {
                GradSlot::Conv { kernel, bias } => vec![kernel, bias],
                GradSlot::Dense { weight, bias } => vec![weight, bias],
                GradSlot::None => vec![],
            };
            for t in tensors {
                if idx < t.len() {
                    return t[idx];
                }
                idx -= t.len();
            }
        }
        panic!("parameter index out of range");
    }
}

fn add_slices(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn momentum_update(w: &mut [f64], vel: &mut [f64], g: &[f64], lr: f64, momentum: f64) {
    for ((wi, vi), gi) in w.iter_mut().zip(vel.iter_mut()).zip(g) {
        *vi = momentum * *vi - lr * gi;
        *wi += *vi;
    }
}

#[inline]
fn axpy(dst: &mut [f64], s: f64, src: &[f64]) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

/// Dot product with eight-lane unrolled accumulation; the association is
/// fixed, so results are reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const L: usize = 8;
    let n = a.len() / L * L;
    let mut acc = [0.0f64; L];
    for (ca, cb) in a[..n].chunks_exact(L).zip(b[..n].chunks_exact(L)) {
        for i in 0..L {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in a[n..].iter().zip(&b[n..]) {
        s += x * y;
    }
    s
}

/// Accumulates a full 3x3 zero-padded correlation of `inp` with the nine
/// kernel taps `k` into `out`. One fused pass per output row.
fn add_conv3x3(out: &mut [f64], inp: &[f64], k: &[f64], h: usize, w: usize, zeros: &[f64]) {
    debug_assert!(k.len() == 9 && zeros.len() >= w);
    let (k0, k1, k2, k3, k4, k5, k6, k7, k8) =
        (k[0], k[1], k[2], k[3], k[4], k[5], k[6], k[7], k[8]);
    for y in 0..h {
        let above = if y > 0 { &inp[(y - 1) * w..y * w] } else { &zeros[..w] };
        let center = &inp[y * w..(y + 1) * w];
        let below = if y + 1 < h { &inp[(y + 1) * w..(y + 2) * w] } else { &zeros[..w] };
        let orow = &mut out[y * w..(y + 1) * w];

        orow[0] += k1 * above[0] + k4 * center[0] + k7 * below[0];
        if w > 1 {
            orow[0] += k2 * above[1] + k5 * center[1] + k8 * below[1];
            orow[w - 1] += k0 * above[w - 2]
                + k1 * above[w - 1]
                + k3 * center[w - 2]
                + k4 * center[w - 1]
                + k6 * below[w - 2]
                + k7 * below[w - 1];
        }
        if w < 2 {
            continue;
        }
        // Interior columns: nine shifted loads per output element, all from
        // rows that stay cache-resident. Window iterators keep the loop free
        // of bounds checks.
        let inner = &mut orow[1..w - 1];
        for (((o, a), c), b) in inner
            .iter_mut()
            .zip(above.windows(3))
            .zip(center.windows(3))
            .zip(below.windows(3))
        {
            *o += k0 * a[0]
                + k1 * a[1]
                + k2 * a[2]
                + k3 * c[0]
                + k4 * c[1]
                + k5 * c[2]
                + k6 * b[0]
                + k7 * b[1]
                + k8 * b[2];
        }
    }
}

/// Accumulates all nine 3x3 kernel-tap gradients for one (output gradient,
/// input) plane pair in a single fused pass:
/// `gk[ky][kx] += sum(gout[y][x] * inp[y + ky - 1][x + kx - 1])`.
fn conv3x3_weight_grad(gout: &[f64], inp: &[f64], h: usize, w: usize, zeros: &[f64], gk: &mut [f64]) {
    debug_assert!(gk.len() == 9 && zeros.len() >= w);
    let mut acc = [0.0f64; 9];
    for y in 0..h {
        let above = if y > 0 { &inp[(y - 1) * w..y * w] } else { &zeros[..w] };
        let center = &inp[y * w..(y + 1) * w];
        let below = if y + 1 < h { &inp[(y + 1) * w..(y + 2) * w] } else { &zeros[..w] };
        let grow = &gout[y * w..(y + 1) * w];

        let g0 = grow[0];
        acc[1] += g0 * above[0];
        acc[4] += g0 * center[0];
        acc[7] += g0 * below[0];
        if w > 1 {
            acc[2] += g0 * above[1];
            acc[5] += g0 * center[1];
            acc[8] += g0 * below[1];
            let gl = grow[w - 1];
            acc[0] += gl * above[w - 2];
            acc[1] += gl * above[w - 1];
            acc[3] += gl * center[w - 2];
            acc[4] += gl * center[w - 1];
            acc[6] += gl * below[w - 2];
            acc[7] += gl * below[w - 1];
        }
        if w < 2 {
            continue;
        }
        for (((g, a), c), b) in grow[1..w - 1]
            .iter()
            .zip(above.windows(3))
            .zip(center.windows(3))
            .zip(below.windows(3))
        {
            acc[0] += g * a[0];
            acc[1] += g * a[1];
            acc[2] += g * a[2];
            acc[3] += g * c[0];
            acc[4] += g * c[1];
            acc[5] += g * c[2];
            acc[6] += g * b[0];
            acc[7] += g * b[1];
            acc[8] += g * b[2];
        }
    }
    for (slot, a) in gk.iter_mut().zip(acc) {
        *slot += a;
    }
}

fn conv_forward(inp: &Planes, conv: &ConvLayer) -> Planes {
    let (h, w) = (inp.h, inp.w);
    let mut out = Planes::zeros(conv.cout, h, w);
    let zeros = vec![0.0; w];
    for co in 0..conv.cout {
        let oplane = out.plane_mut(co);
        oplane.fill(conv.bias[co]);
        for ci in 0..conv.cin {
            let iplane = inp.plane(ci);
            let kbase = (co * conv.cin + ci) * 9;
            add_conv3x3(oplane, iplane, &conv.kernel[kbase..kbase + 9], h, w, &zeros);
        }
        for v in oplane.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    out
}

/// Accumulates kernel/bias gradients and returns the input gradient.
/// `gout` must already carry the ReLU mask.
fn conv_backward(
    inp: &Planes,
    conv: &ConvLayer,
    gout: &Planes,
    gk: &mut [f64],
    gb: &mut [f64],
) -> Planes {
    let (h, w) = (inp.h, inp.w);
    let mut gin = Planes::zeros(conv.cin, h, w);
    let zeros = vec![0.0; w];
    for co in 0..conv.cout {
        let gplane = gout.plane(co);
        gb[co] += gplane.iter().sum::<f64>();
        for ci in 0..conv.cin {
            let iplane = inp.plane(ci);
            let kbase = (co * conv.cin + ci) * 9;
            conv3x3_weight_grad(gplane, iplane, h, w, &zeros, &mut gk[kbase..kbase + 9]);
            // Input gradient is the correlation of the output gradient with
            // the 180-degree-flipped kernel.
            let mut flipped = [0.0f64; 9];
            for (i, f) in flipped.iter_mut().enumerate() {
                *f = conv.kernel[kbase + 8 - i];
            }
            add_conv3x3(gin.plane_mut(ci), gplane, &flipped, h, w, &zeros);
        }
    }
    gin
}

/// 2x2 max pooling, stride 2; ties keep the first maximum in scan order.
fn pool_forward(inp: &Planes) -> (Planes, Vec<u32>) {
    let (oh, ow) = (inp.h / 2, inp.w / 2);
    let mut out = Planes::zeros(inp.c, oh, ow);
    let mut argmax = vec![0u32; inp.c * oh * ow];
    let plane_len = inp.h * inp.w;
    for c in 0..inp.c {
        let iplane = inp.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (2 * oy) * inp.w + 2 * ox;
                let mut best = iplane[base];
                let mut best_i = base;
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let i = base + dy * inp.w + dx;
                    if iplane[i] > best {
                        best = iplane[i];
                        best_i = i;
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out.data[o] = best;
                argmax[o] = (c * plane_len + best_i) as u32;
            }
        }
    }
    (out, argmax)
}

fn dense_forward(inp: &[f64], dense: &DenseLayer) -> Vec<f64> {
    let mut out: Vec<f64> = (0..dense.nout)
        .map(|o| dense.bias[o] + dot(&dense.weight[o * dense.nin..(o + 1) * dense.nin], inp))
        .collect();
    match dense.activation {
        Activation::Relu => {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Softmax => {
            let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in out.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
    }
    out
}

/// Mean over the batch of `-ln p[true class]`, probabilities clamped below
/// at 1e-12.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[Label]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, l)| -p[l.class_index()].max(1e-12).ln())
        .sum();
    total / probs.len() as f64
}

/// Compares analytic gradients against central finite differences
/// (epsilon = 1e-5) for `checks` randomly chosen parameters; returns the
/// maximum relative error `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`. Dropout
/// is inactive (eval-mode passes), as the check requires a deterministic
/// loss.
pub fn grad_check(
    model: &Model,
    batch: &[(ImageBuffer, Label)],
    checks: usize,
    seed: u64,
) -> Result<f64> {
    assert!(!batch.is_empty(), "grad_check needs a nonempty batch");
    const EPS: f64 = 1e-5;

    let scale = 1.0 / batch.len() as f64;
    let mut analytic = Gradients::zeros_like(model);
    for (img, label) in batch {
        let (_, cache) = model.forward_sample(img, Mode::Eval, &mut RngState::new(0))?;
        analytic.add_assign(&model.backward_sample(&cache, *label));
    }
    analytic.scale(scale);

    let total = model.param_total();
    let mut rng = derive_stream(seed, "gradcheck", 0, "init")?;
    let mut chosen = Vec::with_capacity(checks.min(total));
    let mut seen = std::collections::HashSet::new();
    while chosen.len() < checks.min(total) {
        let idx = (rng.next_u64() % total as u64) as usize;
        if seen.insert(idx) {
            chosen.push(idx);
        }
    }

    let errors: Vec<Result<f64>> = chosen
        .par_iter()
        .map(|&idx| {
            let mut probe = model.clone();
            let g_a = analytic.param_get(idx);
            probe.param_add(idx, EPS);
            let plus = batch_loss(&probe, batch)?;
            probe.param_add(idx, -2.0 * EPS);
            let minus = batch_loss(&probe, batch)?;
            let g_n = (plus - minus) / (2.0 * EPS);
            Ok((g_a - g_n).abs() / g_a.abs().max(g_n.abs()).max(1e-8))
        })
        .collect();
    let mut max_err: f64 = 0.0;
    for e in errors {
        max_err = max_err.max(e?);
    }
    Ok(max_err)
}

fn batch_loss(model: &Model, batch: &[(ImageBuffer, Label)]) -> Result<f64> {
    let mut probs = Vec::with_capacity(batch.len());
    for (img, _) in batch {
        let (p, _) = model.forward_sample(img, Mode::Eval, &mut RngState::new(0))?;
        probs.push(p);
    }
    let labels: Vec<Label> = batch.iter().map(|(_, l)| *l).collect();
    Ok(cross_entropy(&probs, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::ModelConfig;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = RngState::new(seed);
        ImageBuffer::from_fn(w, h, |_, _| {
            [
                rng.uniform(0.0, 1.0).unwrap(),
                rng.uniform(0.0, 1.0).unwrap(),
                rng.uniform(0.0, 1.0).unwrap(),
            ]
        })
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: vec![
                LayerSpec::Input { height: 8, width: 8, channels: 3 },
                LayerSpec::Conv2d { out_channels: 4 },
                LayerSpec::MaxPool2d,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 6, activation: Activation::Relu },
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { units: 2, activation: Activation::Softmax },
            ],
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
        let config = ModelConfig::micro();
        let a = Model::init(&config, 7).unwrap();
        let b = Model::init(&config, 7).unwrap();
        for i in 0..a.param_total() {
            assert_eq!(a.param_get(i), b.param_get(i));
        }
        for layer in &a.layers {
            match layer {
                Layer::Conv(c) => {
                    let limit = (6.0 / (9 * c.cin) as f64).sqrt();
                    assert!(c.bias.iter().all(|&v| v == 0.0));
                    assert!(c.kernel.iter().all(|&v| v.abs() <= limit));
                }
                Layer::Dense(d) => {
                    let limit = (6.0 / d.nin as f64).sqrt();
                    assert!(d.bias.iter().all(|&v| v == 0.0));
                    assert!(d.weight.iter().all(|&v| v.abs() <= limit));
                }
                _ => {}
            }
        }
    }

    #[test]
    fn zero_weights_predict_uniform() {
        let model = Model::zeroed(&tiny_config()).unwrap();
        let img = random_image(8, 8, 3);
        let (p, _) = model.forward_sample(&img, Mode::Eval, &mut RngState::new(0)).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_is_repeatable_and_rate_zero_matches_eval() {
        let mut config = tiny_config();
        let model = Model::init(&config, 5).unwrap();
        let img = random_image(8, 8, 4);
        let (a, _) = model.forward_sample(&img, Mode::Eval, &mut RngState::new(1)).unwrap();
        let (b, _) = model.forward_sample(&img, Mode::Eval, &mut RngState::new(2)).unwrap();
        assert_eq!(a, b);

        // Same layers with dropout disabled: train mode equals eval mode.
        for layer in config.layers.iter_mut() {
            if let LayerSpec::Dropout { rate } = layer {
                *rate = 0.0;
            }
        }
        let model0 = Model::init(&config, 5).unwrap();
        let (c, _) = model0.forward_sample(&img, Mode::Train, &mut RngState::new(9)).unwrap();
        let (d, _) = model0.forward_sample(&img, Mode::Eval, &mut RngState::new(1)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let model = Model::init(&ModelConfig::micro(), 11).unwrap();
        for s in 0..5 {
            let img = random_image(64, 64, 100 + s);
            let (p, _) = model.forward_sample(&img, Mode::Eval, &mut RngState::new(0)).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = vec![vec![0.5, 0.5]; 4];
        let labels = vec![Label::Benign; 4];
        assert!((cross_entropy(&uniform, &labels) - std::f64::consts::LN_2).abs() < 1e-12);

        let perfect = vec![vec![1.0, 0.0]];
        assert!(cross_entropy(&perfect, &[Label::Benign]) <= 1e-11);

        // p_true = {0.5, 0.25} -> (ln 2 + ln 4) / 2.
        let mixed = vec![vec![0.5, 0.5], vec![0.75, 0.25]];
        let expected = (2.0f64.ln() + 4.0f64.ln()) / 2.0;
        let got = cross_entropy(&mixed, &[Label::Benign, Label::Malignant]);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn softmax_logit_gradient_is_probability_minus_onehot() {
        // Linear softmax model: Input, Flatten, Dense softmax. The bias
        // gradient at the output equals (p - onehot) exactly.
        let config = ModelConfig {
            layers: vec![
                LayerSpec::Input { height: 2, width: 2, channels: 3 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2, activation: Activation::Softmax },
            ],
        };
        let model = Model::init(&config, 3).unwrap();
        let img = random_image(2, 2, 8);
        let (p, cache) = model.forward_sample(&img, Mode::Eval, &mut RngState::new(0)).unwrap();
        let grads = model.backward_sample(&cache, Label::Malignant);
        match &grads.slots[2] {
            GradSlot::Dense { bias, .. } => {
                assert!((bias[0] - p[0]).abs() < 1e-12);
                assert!((bias[1] - (p[1] - 1.0)).abs() < 1e-12);
            }
            _ => panic!("dense slot expected"),
        }
    }

    #[test]
    fn zero_momentum_is_plain_gradient_descent() {
        let config = tiny_config();
        let mut model = Model::init(&config, 1).unwrap();
        let before = model.param_get(0);
        let mut grads = Gradients::zeros_like(&model);
        if let GradSlot::Conv { kernel, .. } = &mut grads.slots[1] {
            kernel[0] = 2.0;
        }
        model.sgd_step(&grads, 0.1, 0.0);
        assert!((model.param_get(0) - (before - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn one_step_reduces_single_sample_loss() {
        let config = tiny_config();
        let mut model = Model::init(&config, 21).unwrap();
        let batch = vec![(random_image(8, 8, 9), Label::Malignant)];
        let before = batch_loss(&model, &batch).unwrap();
        let (_, cache) = model
            .forward_sample(&batch[0].0, Mode::Eval, &mut RngState::new(0))
            .unwrap();
        let grads = model.backward_sample(&cache, Label::Malignant);
        model.sgd_step(&grads, 1e-3, 0.0);
        let after = batch_loss(&model, &batch).unwrap();
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn grad_check_tiny_conv_network() {
        let model = Model::init(&tiny_config(), 13).unwrap();
        let batch: Vec<(ImageBuffer, Label)> = (0..3)
            .map(|i| {
                (
                    random_image(8, 8, 40 + i),
                    if i % 2 == 0 { Label::Benign } else { Label::Malignant },
                )
            })
            .collect();
        let err = grad_check(&model, &batch, 120, 77).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn grad_check_linear_model_is_tighter() {
        let config = ModelConfig {
            layers: vec![
                LayerSpec::Input { height: 4, width: 4, channels: 3 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2, activation: Activation::Softmax },
            ],
        };
        let model = Model::init(&config, 2).unwrap();
        let batch = vec![
            (random_image(4, 4, 1), Label::Benign),
            (random_image(4, 4, 2), Label::Malignant),
        ];
        let err = grad_check(&model, &batch, 98, 5).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn grad_check_zero_input_is_finite() {
        let model = Model::init(&tiny_config(), 4).unwrap();
        let black = ImageBuffer::new(8, 8);
        let err = grad_check(&model, &[(black, Label::Benign)], 50, 3).unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn dropout_expectation_matches_eval_output() {
        let config = ModelConfig {
            layers: vec![
                LayerSpec::Input { height: 4, width: 4, channels: 3 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 16, activation: Activation::Relu },
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { units: 2, activation: Activation::Softmax },
            ],
        };
        let model = Model::init(&config, 6).unwrap();
        let img = random_image(4, 4, 77);
        let (eval_p, _) = model.forward_sample(&img, Mode::Eval, &mut RngState::new(0)).unwrap();
        let mut rng = RngState::new(123);
        let n = 10_000;
        let mut mean = [0.0f64; 2];
        for _ in 0..n {
            let (p, _) = model.forward_sample(&img, Mode::Train, &mut rng).unwrap();
            mean[0] += p[0];
            mean[1] += p[1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        assert!((mean[0] - eval_p[0]).abs() < 0.02, "{mean:?} vs {eval_p:?}");
        assert!((mean[1] - eval_p[1]).abs() < 0.02);
    }

    #[test]
    fn save_load_round_trip() {
        let config = tiny_config();
        let model = Model::init(&config, 31).unwrap();
        let path = std::env::temp_dir().join("sizeblind-model-roundtrip.bin");
        model.save(&path).unwrap();
        let loaded = Model::load(&config, &path).unwrap();
        for i in 0..model.param_total() {
            assert_eq!(model.param_get(i), loaded.param_get(i));
        }
        // Mismatched config is rejected.
        let other = ModelConfig::micro();
        assert!(matches!(
            Model::load(&other, &path),
            Err(Error::InvalidModelFile(_))
        ));
    }

    #[test]
    fn micro_param_total_matches_spec_accounting() {
        let config = ModelConfig::micro();
        let model = Model::init(&config, 0).unwrap();
        assert_eq!(model.param_total() as u64, config.total_params().unwrap());
    }
}
