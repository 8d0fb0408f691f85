//! Shared oracles and fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use cdp_core::dataset::Modality;
use cdp_core::imaging::{self, ImageTensor};
use cdp_core::losses::{self, LossConfig};
use cdp_core::model::{EmbeddingModel, ForwardMode, ModelConfig};
use cdp_core::sampler::{self, Original, SpectrumDistribution};
use cdp_core::{imaging::JitterConfig, Matrix};
use rand::Rng;

pub fn random_image<R: Rng>(r: &mut R, h: usize, w: usize, c: usize) -> ImageTensor {
    let data = (0..h * w * c).map(|_| r.random::<u8>()).collect();
    ImageTensor::from_u8(h, w, c, data).unwrap()
}

/// A paired P x K batch of random images, normalized and planar.
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_originals: usize,
}

pub fn paired_batch<R: Rng>(r: &mut R, p: usize, k: usize, h: usize, w: usize, classes: usize) -> Batch {
    let mut ids: Vec<usize> = (0..classes).collect();
    for i in 0..p {
        let j = r.random_range(i..classes);
        ids.swap(i, j);
    }
    let mut images = Vec::new();
    let mut meta = Vec::new();
    for &id in &ids[..p] {
        for _ in 0..k {
            let modality = if r.random_bool(0.5) { Modality::Visible } else { Modality::Infrared };
            images.push(random_image(r, h, w, modality.channels()));
            meta.push((id, modality));
        }
    }
    let originals: Vec<Original<'_>> = images
        .iter()
        .zip(&meta)
        .map(|(image, &(label, modality))| Original { image, label, modality })
        .collect();
    let batch = sampler::make_pairs(&originals, &SpectrumDistribution::uniform(), &JitterConfig::default(), r).unwrap();
    let all: Vec<_> = batch.originals.into_iter().chain(batch.generated).collect();
    Batch {
        inputs: all.iter().map(|b| imaging::normalize(&b.image).unwrap().to_planar()).collect(),
        labels: all.iter().map(|b| b.label).collect(),
        num_originals: p * k,
    }
}

pub fn small_model(classes: usize, seed: u64) -> EmbeddingModel {
    let cfg = ModelConfig {
        input_size: (16, 8, 3),
        rng_seed: seed,
        ..ModelConfig::new(classes)
    };
    EmbeddingModel::new(cfg).unwrap()
}

/// Loss plus the discrete choices it depends on: ReLU pattern and the
/// hardest positive/negative of every anchor.
pub fn pipeline_loss(model: &EmbeddingModel, b: &Batch, cfg: &LossConfig, dropout_seed: u64) -> (f64, Vec<bool>, Vec<(usize, usize)>) {
    let out = model.forward_planar(&b.inputs, ForwardMode::Train { dropout_seed }).unwrap();
    let loss = losses::total_loss(&out.logits, &out.embeddings, b.num_originals, &b.labels, cfg)
        .unwrap()
        .total;
    let originals = out.embeddings.select_rows(&(0..b.num_originals).collect::<Vec<_>>());
    let pairs = losses::hardest_pairs(&originals, &b.labels[..b.num_originals])
        .into_iter()
        .map(|((p, _), (n, _))| (p, n))
        .collect();
    (loss, out.trace.activation_pattern(), pairs)
}

pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    /// Parameters whose first step straddled a kink and needed a smaller one.
    pub refined: usize,
}

/// Relative error with a floor so that gradients at round-off level do not
/// dominate.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences against backprop for every parameter, with one
/// Richardson step (`(4 D(h/2) - D(h)) / 3`) to cancel the `h^2` term. The step starts
/// at `h`; when `x +- h` changes a ReLU state or a hardest-pair choice the
/// loss is not smooth over the stencil, so the step is divided by ten until
/// both sides stay on the same piece.
pub fn gradient_check(model: &EmbeddingModel, b: &Batch, cfg: &LossConfig, dropout_seed: u64, h: f64) -> GradCheck {
    let out = model.forward_planar(&b.inputs, ForwardMode::Train { dropout_seed }).unwrap();
    let loss = losses::total_loss(&out.logits, &out.embeddings, b.num_originals, &b.labels, cfg).unwrap();
    let grads = model.backward(&out.trace, &loss.grad_embeddings, &loss.grad_logits).unwrap();
    let (_, base_pattern, base_pairs) = pipeline_loss(model, b, cfg, dropout_seed);
    let mut probe = model.clone();
    let mut res = GradCheck { max_rel: 0.0, worst: String::new(), checked: 0, refined: 0 };
    for t in 0..model.tensors().len() {
        for j in 0..model.tensors()[t].data.len() {
            let orig = model.tensors()[t].data[j];
            let mut step = h;
            let mut central = |d: f64| {
                probe.tensors_mut()[t].data[j] = orig + d;
                let (up, pu, qu) = pipeline_loss(&probe, b, cfg, dropout_seed);
                probe.tensors_mut()[t].data[j] = orig - d;
                let (down, pd, qd) = pipeline_loss(&probe, b, cfg, dropout_seed);
                probe.tensors_mut()[t].data[j] = orig;
                let smooth = pu == base_pattern && pd == base_pattern && qu == base_pairs && qd == base_pairs;
                ((up - down) / (2.0 * d), smooth)
            };
            let numeric = loop {
                let (wide, smooth) = central(step);
                if smooth || step < h * 1e-4 {
                    let (narrow, _) = central(step / 2.0);
                    break (4.0 * narrow - wide) / 3.0;
                }
                step /= 10.0;
            };
            if step < h {
                res.refined += 1;
            }
            let e = rel_err(grads.tensors[t][j], numeric);
            if e > res.max_rel {
                res.max_rel = e;
                res.worst = format!(
                    "{}[{j}]: backprop {:e}, numeric {:e}, step {step:e}",
                    model.tensors()[t].name, grads.tensors[t][j], numeric
                );
            }
            res.checked += 1;
        }
    }
    res
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exhaustive batch-hard triplet: for each anchor, all positive/negative
/// pairs are enumerated and the worst hinge is kept.
pub fn brute_triplet(emb: &Matrix, labels: &[usize], margin: f64) -> f64 {
    let n = emb.rows();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                let v = margin + dist(emb.row(a), emb.row(p)) - dist(emb.row(a), emb.row(q));
                worst = worst.max(v);
            }
        }
        total += worst.max(0.0);
    }
    total / n as f64
}

/// Per-query AP and first-hit rank from the definition: sort the gallery,
/// then count precision at every relevant position.
pub fn brute_retrieval(dist: &Matrix, ql: &[usize], gl: &[usize]) -> (Vec<f64>, f64) {
    let (q, g) = (dist.rows(), dist.cols());
    let mut cmc = vec![0.0; g];
    let mut map = 0.0;
    for i in 0..q {
        let mut pairs: Vec<(f64, usize)> = (0..g).map(|j| (dist.get(i, j), j)).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let rel: Vec<bool> = pairs.iter().map(|&(_, j)| gl[j] == ql[i]).collect();
        let first = rel.iter().position(|&x| x).unwrap();
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
        let n_rel = rel.iter().filter(|&&x| x).count();
        let mut ap = 0.0;
        for (k, _) in rel.iter().enumerate().filter(|(_, &x)| x) {
            let hits = rel[..=k].iter().filter(|&&x| x).count();
            ap += hits as f64 / (k + 1) as f64;
        }
        map += ap / n_rel as f64;
    }
    (cmc.iter().map(|c| c / q as f64).collect(), map / q as f64)
}
