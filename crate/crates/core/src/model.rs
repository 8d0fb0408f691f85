//! Miniature one-stream embedding network with exact backpropagation.
//!
//! ```text
//! input 3xHxW
//!   -> conv3x3/2 (3->8)   -> ReLU
//!   -> conv3x3/2 (8->16)  -> ReLU
//!   -> conv3x3/2 (16->32) -> ReLU
//!   -> global average pool (32)
//!   -> fc_embed (32->D)          = embedding, used by the triplet loss and retrieval
//!   -> dropout (train only, inverted scaling)
//!   -> classifier (D->M)         = logits
//! ```
//!
//! Convolutions use zero padding 1. Each sample is processed independently
//! (in parallel when enabled); parameter gradients are summed in sample order.

use rand_distr::{Distribution, Normal};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::{ImageTensor, ValueDomain};
use crate::{par, rng, Error, Matrix, Result};

pub const CONV1_W: usize = 0;
pub const CONV1_B: usize = 1;
pub const CONV2_W: usize = 2;
pub const CONV2_B: usize = 3;
pub const CONV3_W: usize = 4;
pub const CONV3_B: usize = 5;
pub const EMBED_W: usize = 6;
pub const EMBED_B: usize = 7;
pub const CLS_W: usize = 8;
pub const CLS_B: usize = 9;
pub const NUM_TENSORS: usize = 10;

pub const TENSOR_NAMES: [&str; NUM_TENSORS] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "fc_embed.weight",
    "fc_embed.bias",
    "classifier.weight",
    "classifier.bias",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(height, width, channels)`.
    pub input_size: (usize, usize, usize),
    pub conv_channels: [usize; 3],
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub rng_seed: u64,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        ModelConfig {
            input_size: (64, 32, 3),
            conv_channels: [8, 16, 32],
            embedding_dim: 32,
            num_classes,
            dropout_rate: 0.5,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "model needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let (h, w, c) = self.input_size;
        if h == 0 || w == 0 || c == 0 || self.embedding_dim == 0 || self.conv_channels.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(())
    }

    /// Spatial size after each conv: `((h0, w0), (h1, w1), (h2, w2), (h3, w3))`.
    pub fn spatial_dims(&self) -> [(usize, usize); 4] {
        let (h, w, _) = self.input_size;
        let s1 = (conv_out(h), conv_out(w));
        let s2 = (conv_out(s1.0), conv_out(s1.1));
        let s3 = (conv_out(s2.0), conv_out(s2.1));
        [(h, w), s1, s2, s3]
    }

    /// Shapes of the parameter tensors, in [`TENSOR_NAMES`] order.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let c0 = self.input_size.2;
        let [c1, c2, c3] = self.conv_channels;
        let (d, m) = (self.embedding_dim, self.num_classes);
        vec![
            vec![c1, c0, 3, 3],
            vec![c1],
            vec![c2, c1, 3, 3],
            vec![c2],
            vec![c3, c2, 3, 3],
            vec![c3],
            vec![d, c3],
            vec![d],
            vec![m, d],
            vec![m],
        ]
    }
}

/// Output size of a 3x3, stride-2, padding-1 convolution.
pub fn conv_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    config: ModelConfig,
    tensors: Vec<ParamTensor>,
    /// Bumped on every mutable access; traces record it to detect staleness.
    version: u64,
}

/// Gradients aligned with the model's tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub tensors: Vec<Vec<f64>>,
}

impl ParameterGradients {
    pub fn zeros_like(model: &EmbeddingModel) -> Self {
        ParameterGradients {
            tensors: model.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    fn add_assign(&mut self, other: &ParameterGradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout active; masks are a pure function of the seed and sample index.
    Train { dropout_seed: u64 },
    Eval,
}

/// Per-sample activations cached for backpropagation.
#[derive(Debug, Clone)]
struct SampleTrace {
    col1: Vec<f64>,
    a1: Vec<f64>,
    col2: Vec<f64>,
    a2: Vec<f64>,
    col3: Vec<f64>,
    a3: Vec<f64>,
    pooled: Vec<f64>,
    /// Inverted-dropout multipliers (`0` or `1 / (1 - rate)`).
    mask: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    mode: ForwardMode,
    version: u64,
    samples: Vec<SampleTrace>,
}

impl ForwardTrace {
    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Dropout multipliers of sample `i`.
    pub fn dropout_mask(&self, i: usize) -> &[f64] {
        &self.samples[i].mask
    }

    /// Which ReLU units are active, over all samples and conv layers. Two
    /// traces with equal patterns lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.samples
            .iter()
            .flat_map(|t| t.a1.iter().chain(&t.a2).chain(&t.a3))
            .map(|&a| a > 0.0)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub embeddings: Matrix,
    pub logits: Matrix,
    pub trace: ForwardTrace,
}

/// Unrolls a CHW input into `(c * 9) x (oh * ow)` patch columns for a stride-2 3x3 conv.
fn im2col(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (conv_out(h), conv_out(w));
    let np = oh * ow;
    let mut col = vec![0.0; c * 9 * np];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ch * 9) + ky * 3 + kx) * np..][..np];
                for oy in 0..oh {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * ow..][..ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

/// Scatters patch-column gradients back onto a CHW input gradient.
fn col2im(dcol: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (conv_out(h), conv_out(w));
    let np = oh * ow;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcol[((ch * 9) + ky * 3 + kx) * np..][..np];
                for oy in 0..oh {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            out[ch * h * w + iy as usize * w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `out[oc, p] = bias[oc] + sum_k weight[oc, k] * col[k, p]`, followed by ReLU.
fn conv_relu(col: &[f64], weight: &[f64], bias: &[f64], out_c: usize, np: usize) -> Vec<f64> {
    let kdim = col.len() / np;
    let mut out = vec![0.0; out_c * np];
    for oc in 0..out_c {
        let dst = &mut out[oc * np..(oc + 1) * np];
        dst.fill(bias[oc]);
        let wrow = &weight[oc * kdim..(oc + 1) * kdim];
        for (k, &wv) in wrow.iter().enumerate() {
            let src = &col[k * np..(k + 1) * np];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
        for d in dst.iter_mut() {
            if *d < 0.0 {
                *d = 0.0;
            }
        }
    }
    out
}

/// Backward through conv + ReLU. `grad_act` is overwritten with the
/// pre-activation gradient. Returns the patch-column gradient when requested.
#[allow(clippy::too_many_arguments)]
fn conv_relu_backward(
    col: &[f64],
    act: &[f64],
    grad_act: &mut [f64],
    weight: &[f64],
    out_c: usize,
    np: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let kdim = col.len() / np;
    for (g, a) in grad_act.iter_mut().zip(act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
    for oc in 0..out_c {
        let dz = &grad_act[oc * np..(oc + 1) * np];
        grad_b[oc] += dz.iter().sum::<f64>();
        let gw = &mut grad_w[oc * kdim..(oc + 1) * kdim];
        for (k, g) in gw.iter_mut().enumerate() {
            let src = &col[k * np..(k + 1) * np];
            *g += dz.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    if !want_input {
        return None;
    }
    let mut dcol = vec![0.0; kdim * np];
    for oc in 0..out_c {
        let dz = &grad_act[oc * np..(oc + 1) * np];
        let wrow = &weight[oc * kdim..(oc + 1) * kdim];
        for (k, &wv) in wrow.iter().enumerate() {
            let dst = &mut dcol[k * np..(k + 1) * np];
            for (d, g) in dst.iter_mut().zip(dz) {
                *d += wv * g;
            }
        }
    }
    Some(dcol)
}

/// `y = W x + b` for a row-major `out x in` weight.
fn affine(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Accumulates `dW += g x^T`, `db += g` and returns `W^T g`.
fn affine_backward(weight: &[f64], x: &[f64], g: &[f64], grad_w: &mut [f64], grad_b: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = vec![0.0; n_in];
    for (o, &go) in g.iter().enumerate() {
        grad_b[o] += go;
        let wrow = &weight[o * n_in..(o + 1) * n_in];
        let gw = &mut grad_w[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            gw[i] += go * x[i];
            dx[i] += go * wrow[i];
        }
    }
    dx
}

impl EmbeddingModel {
    /// He-normal weights `N(0, 2 / fan_in)`, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let len: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![0.0; len]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    let mut r = rng::stream(config.rng_seed, &[0x3D, i as u64]);
                    (0..len).map(|_| normal.sample(&mut r)).collect()
                };
                ParamTensor {
                    name: TENSOR_NAMES[i].to_string(),
                    shape,
                    data,
                }
            })
            .collect();
        Ok(EmbeddingModel {
            config,
            tensors,
            version: 0,
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<ParamTensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, shape), name) in tensors.iter().zip(&shapes).zip(TENSOR_NAMES) {
            if t.name != name || &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("tensor {} has non-finite values", t.name)));
            }
        }
        Ok(EmbeddingModel {
            config,
            tensors,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    /// Mutable parameter access; invalidates outstanding traces.
    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        self.version += 1;
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn t(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let (h, w, c) = self.config.input_size;
        if x.len() != h * w * c {
            return Err(Error::Shape(format!(
                "input has {} values, model expects {c}x{h}x{w}",
                x.len()
            )));
        }
        Ok(())
    }

    /// Converts unit-float images into planar network inputs.
    pub fn prepare_inputs(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let (h, w, c) = self.config.input_size;
        images
            .iter()
            .map(|img| {
                if img.height() != h || img.width() != w || img.channels() != c {
                    return Err(Error::Shape(format!(
                        "image {}x{}x{} does not match model input {h}x{w}x{c}",
                        img.height(),
                        img.width(),
                        img.channels()
                    )));
                }
                if img.domain() != ValueDomain::UnitFloat {
                    return Err(Error::invalid("network inputs must be normalized to [0, 1]"));
                }
                Ok(img.to_planar())
            })
            .collect()
    }

    fn forward_sample(&self, x: &[f64], mode: ForwardMode, index: usize) -> (Vec<f64>, Vec<f64>, SampleTrace) {
        let [c1, c2, c3] = self.config.conv_channels;
        let [(h0, w0), (h1, w1), (h2, w2), _] = self.config.spatial_dims();
        let c0 = self.config.input_size.2;

        let (col1, oh1, ow1) = im2col(x, c0, h0, w0);
        let a1 = conv_relu(&col1, self.t(CONV1_W), self.t(CONV1_B), c1, oh1 * ow1);
        let (col2, oh2, ow2) = im2col(&a1, c1, h1, w1);
        let a2 = conv_relu(&col2, self.t(CONV2_W), self.t(CONV2_B), c2, oh2 * ow2);
        let (col3, oh3, ow3) = im2col(&a2, c2, h2, w2);
        let np3 = oh3 * ow3;
        let a3 = conv_relu(&col3, self.t(CONV3_W), self.t(CONV3_B), c3, np3);

        let pooled: Vec<f64> = a3
            .chunks_exact(np3)
            .map(|ch| ch.iter().sum::<f64>() / np3 as f64)
            .collect();
        let embedding = affine(self.t(EMBED_W), self.t(EMBED_B), &pooled);

        let d = embedding.len();
        let mask = match mode {
            ForwardMode::Eval => vec![1.0; d],
            ForwardMode::Train { dropout_seed } => {
                let rate = self.config.dropout_rate;
                let keep = 1.0 / (1.0 - rate);
                let mut r = rng::stream(dropout_seed, &[0xD0, index as u64]);
                (0..d)
                    .map(|_| if r.random::<f64>() < rate { 0.0 } else { keep })
                    .collect()
            }
        };
        let hidden: Vec<f64> = embedding.iter().zip(&mask).map(|(e, m)| e * m).collect();
        let logits = affine(self.t(CLS_W), self.t(CLS_B), &hidden);
        let trace = SampleTrace {
            col1,
            a1,
            col2,
            a2,
            col3,
            a3,
            pooled,
            mask,
            hidden,
        };
        (embedding, logits, trace)
    }

    /// Forward pass over planar `C x H x W` inputs.
    pub fn forward_planar(&self, inputs: &[Vec<f64>], mode: ForwardMode) -> Result<ForwardOutput> {
        if inputs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let results = par::map_range(inputs.len(), |i| self.forward_sample(&inputs[i], mode, i));
        let n = inputs.len();
        let (d, m) = (self.config.embedding_dim, self.config.num_classes);
        let mut emb = Vec::with_capacity(n * d);
        let mut logits = Vec::with_capacity(n * m);
        let mut samples = Vec::with_capacity(n);
        for (e, l, t) in results {
            emb.extend(e);
            logits.extend(l);
            samples.push(t);
        }
        Ok(ForwardOutput {
            embeddings: Matrix::from_vec(n, d, emb)?,
            logits: Matrix::from_vec(n, m, logits)?,
            trace: ForwardTrace {
                mode,
                version: self.version,
                samples,
            },
        })
    }

    /// Forward pass over normalized 3-channel images.
    pub fn forward(&self, images: &[ImageTensor], mode: ForwardMode) -> Result<ForwardOutput> {
        let inputs = self.prepare_inputs(images)?;
        self.forward_planar(&inputs, mode)
    }

    /// Eval-mode embeddings only, without caching activations.
    pub fn embed_planar(&self, inputs: &[Vec<f64>]) -> Result<Matrix> {
        for x in inputs {
            self.check_input(x)?;
        }
        let d = self.config.embedding_dim;
        let rows = par::map_range(inputs.len(), |i| self.forward_sample(&inputs[i], ForwardMode::Eval, i).0);
        Matrix::from_vec(inputs.len(), d, rows.into_iter().flatten().collect())
    }

    fn backward_sample(&self, t: &SampleTrace, grad_emb: &[f64], grad_logits: &[f64]) -> ParameterGradients {
        let [c1, c2, c3] = self.config.conv_channels;
        let [_, (h1, w1), (h2, w2), (h3, w3)] = self.config.spatial_dims();
        let mut g = ParameterGradients::zeros_like(self);
        let (head, tail) = g.tensors.split_at_mut(CLS_W);
        let (gcw, gcb) = tail.split_at_mut(1);

        let dhidden = affine_backward(self.t(CLS_W), &t.hidden, grad_logits, &mut gcw[0], &mut gcb[0]);
        let de: Vec<f64> = grad_emb
            .iter()
            .zip(dhidden.iter().zip(&t.mask))
            .map(|(a, (b, m))| a + b * m)
            .collect();
        let (conv, emb) = head.split_at_mut(EMBED_W);
        let (gew, geb) = emb.split_at_mut(1);
        let dpooled = affine_backward(self.t(EMBED_W), &t.pooled, &de, &mut gew[0], &mut geb[0]);

        let np3 = h3 * w3;
        let mut da3: Vec<f64> = dpooled
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v / np3 as f64, np3))
            .collect();
        let (g12, g3) = conv.split_at_mut(CONV3_W);
        let (g3w, g3b) = g3.split_at_mut(1);
        let dcol3 = conv_relu_backward(&t.col3, &t.a3, &mut da3, self.t(CONV3_W), c3, np3, &mut g3w[0], &mut g3b[0], true)
            .expect("input gradient requested");
        let mut da2 = col2im(&dcol3, c2, h2, w2);

        let (g1, g2) = g12.split_at_mut(CONV2_W);
        let (g2w, g2b) = g2.split_at_mut(1);
        let dcol2 = conv_relu_backward(&t.col2, &t.a2, &mut da2, self.t(CONV2_W), c2, h2 * w2, &mut g2w[0], &mut g2b[0], true)
            .expect("input gradient requested");
        let mut da1 = col2im(&dcol2, c1, h1, w1);

        let (g1w, g1b) = g1.split_at_mut(1);
        conv_relu_backward(&t.col1, &t.a1, &mut da1, self.t(CONV1_W), c1, h1 * w1, &mut g1w[0], &mut g1b[0], false);
        g
    }

    /// Parameter gradients given upstream gradients for embeddings (`N x D`) and logits (`N x M`).
    pub fn backward(&self, trace: &ForwardTrace, grad_embeddings: &Matrix, grad_logits: &Matrix) -> Result<ParameterGradients> {
        if trace.mode == ForwardMode::Eval {
            return Err(Error::invalid("backward needs a train-mode trace"));
        }
        if trace.version != self.version {
            return Err(Error::invalid(format!(
                "stale trace: recorded at parameter version {}, model is at {}",
                trace.version, self.version
            )));
        }
        let n = trace.samples.len();
        let (d, m) = (self.config.embedding_dim, self.config.num_classes);
        if grad_embeddings.rows() != n || grad_embeddings.cols() != d || grad_logits.rows() != n || grad_logits.cols() != m {
            return Err(Error::Shape(format!(
                "gradients {}x{} / {}x{} do not match trace of {n} samples (D={d}, M={m})",
                grad_embeddings.rows(),
                grad_embeddings.cols(),
                grad_logits.rows(),
                grad_logits.cols()
            )));
        }
        let per_sample = par::map_range(n, |i| {
            self.backward_sample(&trace.samples[i], grad_embeddings.row(i), grad_logits.row(i))
        });
        let mut total = ParameterGradients::zeros_like(self);
        for g in &per_sample {
            total.add_assign(g);
        }
        Ok(total)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(m: usize) -> ModelConfig {
        ModelConfig {
            input_size: (8, 4, 3),
            ..ModelConfig::new(m)
        }
    }

    fn random_inputs(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::from_seed(seed);
        (0..n).map(|_| (0..len).map(|_| r.random::<f64>()).collect()).collect()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let cfg = ModelConfig::new(5);
        let a = EmbeddingModel::new(cfg.clone()).unwrap();
        let b = EmbeddingModel::new(cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tensors()[CONV1_W].shape, vec![8, 3, 3, 3]);
        assert_eq!(a.tensors()[CLS_W].shape, vec![5, 32]);
        assert!(a.tensors()[CONV2_B].data.iter().all(|v| *v == 0.0));
        assert!(EmbeddingModel::new(ModelConfig::new(1)).is_err());
    }

    #[test]
    fn spatial_arithmetic() {
        assert_eq!(
            ModelConfig::new(2).spatial_dims(),
            [(64, 32), (32, 16), (16, 8), (8, 4)]
        );
    }

    #[test]
    fn zero_input_is_finite() {
        let model = EmbeddingModel::new(ModelConfig::new(3)).unwrap();
        let out = model.forward_planar(&vec![vec![0.0; 3 * 64 * 32]; 2], ForwardMode::Eval).unwrap();
        assert_eq!((out.embeddings.rows(), out.embeddings.cols()), (2, 32));
        assert!(out.embeddings.as_slice().iter().all(|v| v.is_finite()));
        // zero biases and zero input: every activation is zero
        assert!(out.embeddings.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn eval_is_deterministic_and_train_mask_is_seeded() {
        let model = EmbeddingModel::new(small_config(3)).unwrap();
        let x = random_inputs(3, 96, 1);
        let a = model.forward_planar(&x, ForwardMode::Eval).unwrap();
        let b = model.forward_planar(&x, ForwardMode::Eval).unwrap();
        assert_eq!(a.logits, b.logits);
        let t1 = model.forward_planar(&x, ForwardMode::Train { dropout_seed: 4 }).unwrap();
        let t2 = model.forward_planar(&x, ForwardMode::Train { dropout_seed: 4 }).unwrap();
        assert_eq!(t1.logits, t2.logits);
        assert_eq!(t1.embeddings, a.embeddings);
    }

    #[test]
    fn shape_errors() {
        let model = EmbeddingModel::new(small_config(3)).unwrap();
        assert!(model.forward_planar(&[vec![0.0; 10]], ForwardMode::Eval).is_err());
        let img = ImageTensor::from_u8(8, 4, 3, vec![0; 96]).unwrap();
        assert!(model.forward(&[img], ForwardMode::Eval).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let model = EmbeddingModel::new(small_config(3)).unwrap();
        let x = random_inputs(2, 96, 2);
        let out = model.forward_planar(&x, ForwardMode::Train { dropout_seed: 1 }).unwrap();
        let g = model
            .backward(&out.trace, &Matrix::zeros(2, 32), &Matrix::zeros(2, 3))
            .unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn classifier_gradient_zero_without_logit_gradient() {
        let model = EmbeddingModel::new(small_config(3)).unwrap();
        let x = random_inputs(2, 96, 3);
        let out = model.forward_planar(&x, ForwardMode::Train { dropout_seed: 1 }).unwrap();
        let mut ge = Matrix::zeros(2, 32);
        ge.set(0, 0, 1.0);
        let g = model.backward(&out.trace, &ge, &Matrix::zeros(2, 3)).unwrap();
        assert!(g.tensors[CLS_W].iter().all(|v| *v == 0.0));
        assert!(g.tensors[CLS_B].iter().all(|v| *v == 0.0));
        assert!(g.tensors[EMBED_B][0] != 0.0);
    }

    #[test]
    fn stale_or_eval_traces_rejected() {
        let mut model = EmbeddingModel::new(small_config(3)).unwrap();
        let x = random_inputs(2, 96, 3);
        let eval = model.forward_planar(&x, ForwardMode::Eval).unwrap();
        assert!(model.backward(&eval.trace, &Matrix::zeros(2, 32), &Matrix::zeros(2, 3)).is_err());
        let train = model.forward_planar(&x, ForwardMode::Train { dropout_seed: 0 }).unwrap();
        assert!(model.backward(&train.trace, &Matrix::zeros(3, 32), &Matrix::zeros(3, 3)).is_err());
        model.tensors_mut()[0].data[0] += 1.0;
        assert!(model.backward(&train.trace, &Matrix::zeros(2, 32), &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = Matrix::from_rows(&[vec![1000.0, 0.0, -5.0], vec![0.1, 0.2, 0.3]]).unwrap();
        let p = softmax_rows(&l);
        for i in 0..2 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 5, 4);
        let x = random_inputs(1, c * h * w, 9).remove(0);
        let (col, _, _) = im2col(&x, c, h, w);
        let y = random_inputs(1, col.len(), 10).remove(0);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, c, h, w);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
