//! Classification cross-entropy over the whole paired batch, batch-hard
//! triplet loss over the originals, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::model::softmax_rows;
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeNormalization {
    /// Divide by the number of samples.
    MeanOverSamples,
    /// Divide by samples times classes.
    MeanOverSamplesAndClasses,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Triplet margin in embedding distance units.
    pub margin: f64,
    /// Weight of the triplet term.
    pub lambda: f64,
    pub ce_normalization: CeNormalization,
    /// When false the cross-entropy is reported but does not enter the total.
    #[serde(default = "default_true")]
    pub use_classification: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.3,
            lambda: 1.0,
            ce_normalization: CeNormalization::MeanOverSamples,
            use_classification: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::invalid(format!(
                "margin {} and lambda {} must be non-negative",
                self.margin, self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub grad_logits: Matrix,
    /// Softmax probability of each sample's own label.
    pub target_probs: Vec<f64>,
}

pub fn cross_entropy(logits: &Matrix, labels: &[usize], norm: CeNormalization) -> Result<CrossEntropy> {
    let (n, m) = (logits.rows(), logits.cols());
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= m) {
        return Err(Error::invalid(format!("label {l} of sample {i} outside 0..{m}")));
    }
    let z = match norm {
        CeNormalization::MeanOverSamples => n as f64,
        CeNormalization::MeanOverSamplesAndClasses => (n * m) as f64,
    };
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut target_probs = Vec::with_capacity(n);
    let mut grad = probs.clone();
    for (i, &t) in labels.iter().enumerate() {
        // log-softmax directly from the logits keeps tiny probabilities finite
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        target_probs.push(probs.get(i, t));
        let g = grad.row_mut(i);
        g[t] -= 1.0;
        for v in g.iter_mut() {
            *v /= z;
        }
    }
    Ok(CrossEntropy {
        loss: loss / z,
        grad_logits: grad,
        target_probs,
    })
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Checks that there are at least two labels and every label occurs twice.
pub fn check_triplet_labels(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::invalid("triplet loss needs at least two distinct labels"));
    }
    if let Some((l, _)) = counts.iter().find(|(_, c)| **c < 2) {
        return Err(Error::invalid(format!(
            "triplet loss needs at least two samples of label {l}"
        )));
    }
    Ok(())
}

/// Hardest positive and negative (index, distance) for every anchor.
/// Ties resolve to the first index in batch order.
pub fn hardest_pairs(embeddings: &Matrix, labels: &[usize]) -> Vec<((usize, f64), (usize, f64))> {
    let n = embeddings.rows();
    (0..n)
        .map(|a| {
            let mut pos = (usize::MAX, f64::NEG_INFINITY);
            let mut neg = (usize::MAX, f64::INFINITY);
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = euclidean(embeddings.row(a), embeddings.row(j));
                if labels[j] == labels[a] {
                    if d > pos.1 {
                        pos = (j, d);
                    }
                } else if d < neg.1 {
                    neg = (j, d);
                }
            }
            (pos, neg)
        })
        .collect()
}

/// Batch-hard triplet loss `mean_a [m + max_p D(a,p) - min_n D(a,n)]_+` and its
/// subgradient with respect to the embeddings.
pub fn batch_hard_triplet(embeddings: &Matrix, labels: &[usize], margin: f64) -> Result<(f64, Matrix)> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    check_triplet_labels(labels)?;
    let mut grad = Matrix::zeros(n, embeddings.cols());
    let mut loss = 0.0;
    let scale = 1.0 / n as f64;
    for (a, ((p, dp), (q, dn))) in hardest_pairs(embeddings, labels).into_iter().enumerate() {
        let term = margin + dp - dn;
        if term <= 0.0 {
            continue;
        }
        loss += term;
        // d/dx ||x - y|| = (x - y) / ||x - y||, zero at the singularity
        if dp > 0.0 {
            for c in 0..embeddings.cols() {
                let u = (embeddings.get(a, c) - embeddings.get(p, c)) / dp * scale;
                grad.set(a, c, grad.get(a, c) + u);
                grad.set(p, c, grad.get(p, c) - u);
            }
        }
        if dn > 0.0 {
            for c in 0..embeddings.cols() {
                let u = (embeddings.get(a, c) - embeddings.get(q, c)) / dn * scale;
                grad.set(a, c, grad.get(a, c) - u);
                grad.set(q, c, grad.get(q, c) + u);
            }
        }
    }
    Ok((loss / n as f64, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub cls: f64,
    pub tri: f64,
    pub grad_embeddings: Matrix,
    pub grad_logits: Matrix,
    pub per_sample_target_prob: Vec<f64>,
}

/// Combined loss. The cross-entropy sees every row; the triplet loss sees
/// only the first `num_originals` rows, and the remaining rows receive no
/// triplet gradient. The triplet term is skipped entirely when `lambda == 0`.
pub fn total_loss(
    logits: &Matrix,
    embeddings: &Matrix,
    num_originals: usize,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let n = logits.rows();
    if embeddings.rows() != n || num_originals > n || labels.len() != n {
        return Err(Error::Shape(format!(
            "loss inputs disagree: {n} logit rows, {} embedding rows, {} labels, {num_originals} originals",
            embeddings.rows(),
            labels.len()
        )));
    }
    let ce = cross_entropy(logits, labels, cfg.ce_normalization)?;
    let mut grad_embeddings = Matrix::zeros(n, embeddings.cols());
    let mut tri = 0.0;
    if cfg.lambda > 0.0 {
        let idx: Vec<usize> = (0..num_originals).collect();
        let (t, g) = batch_hard_triplet(&embeddings.select_rows(&idx), &labels[..num_originals], cfg.margin)?;
        tri = t;
        for i in 0..num_originals {
            for (dst, src) in grad_embeddings.row_mut(i).iter_mut().zip(g.row(i)) {
                *dst = cfg.lambda * src;
            }
        }
    }
    let (cls_weight, grad_logits) = if cfg.use_classification {
        (1.0, ce.grad_logits)
    } else {
        (0.0, Matrix::zeros(n, logits.cols()))
    };
    let total = cls_weight * ce.loss + cfg.lambda * tri;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (cls {}, tri {tri})",
            ce.loss
        )));
    }
    Ok(LossOutput {
        total,
        cls: ce.loss,
        tri,
        grad_embeddings,
        grad_logits,
        per_sample_target_prob: ce.target_probs,
    })
}
