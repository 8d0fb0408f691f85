//! Adam, the step learning-rate schedule, and the epoch-level training loop
//! wiring sampler, model, losses and DHSM together.
//!
//! Every batch draws from its own seeded stream keyed by `(seed, epoch, batch)`,
//! so a run resumed from a checkpoint at epoch `e` replays exactly the batches
//! the uninterrupted run would have seen.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::dataset::DatasetManifest;
use crate::imaging::{self, ImageTensor, JitterConfig, Spectrum};
use crate::losses::{self, LossConfig};
use crate::model::{EmbeddingModel, ForwardMode, ModelConfig, ParamTensor, ParameterGradients};
use crate::sampler::{
    self, DhsmConfig, DhsmState, IdentityIndex, Original, PkItem, SamplerConfig, SpectrumSet,
    SpectrumStats,
};
use crate::{par, rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[ParamTensor]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update, applied in place.
pub fn adam_step(
    params: &mut [ParamTensor],
    grads: &ParameterGradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.tensors.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.tensors.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(&grads.tensors) {
        if p.data.len() != g.len() {
            return Err(Error::Shape(format!(
                "gradient for {} has {} values, parameter has {}",
                p.name,
                g.len(),
                p.data.len()
            )));
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {bad} for {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for ((x, g), (mi, vi)) in p.data.iter_mut().zip(&grads.tensors[i]).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Learning rate drops to `lr` once `epoch >= at_fraction * epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub at_fraction: f64,
    pub lr: f64,
}

/// Architecture settings; the class count comes from the training manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub input_size: (usize, usize, usize),
    pub conv_channels: [usize; 3],
    pub embedding_dim: usize,
    pub dropout_rate: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = ModelConfig::new(2);
        ModelSettings {
            input_size: c.input_size,
            conv_channels: c.conv_channels,
            embedding_dim: c.embedding_dim,
            dropout_rate: c.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` means `ceil(num_train_images / (P * K))`.
    pub batches_per_epoch: Option<usize>,
    pub base_lr: f64,
    pub lr_steps: Vec<LrStep>,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub dhsm: DhsmConfig,
    pub jitter: JitterConfig,
    pub model: ModelSettings,
    /// Pair each original with a generated counterpart (off: all-spectrum baseline).
    pub pairing: bool,
    /// Identity-balanced batches (off: uniform random draws of P*K images).
    pub pk_sampling: bool,
    /// Spectra eligible for generation.
    pub spectra: SpectrumSet,
    pub horizontal_flip: bool,
    pub rng_seed: u64,
    /// Write `checkpoint_epoch_NNNN.ckpt` every this many epochs (`None` = final only).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batches_per_epoch: None,
            base_lr: 1e-3,
            lr_steps: vec![
                LrStep { at_fraction: 0.5, lr: 1e-4 },
                LrStep { at_fraction: 0.75, lr: 1e-5 },
            ],
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            dhsm: DhsmConfig::default(),
            jitter: JitterConfig::default(),
            model: ModelSettings::default(),
            pairing: true,
            pk_sampling: true,
            spectra: SpectrumSet::default(),
            horizontal_flip: true,
            rng_seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::invalid("batches_per_epoch must be at least 1"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::invalid(format!("base_lr {} must be positive", self.base_lr)));
        }
        let mut prev = (0.0, self.base_lr);
        for s in &self.lr_steps {
            if !(s.lr > 0.0 && s.lr < prev.1 && s.at_fraction > prev.0 && s.at_fraction <= 1.0) {
                return Err(Error::invalid(format!(
                    "learning-rate steps must have increasing fractions in (0, 1] and decreasing positive rates: {:?}",
                    self.lr_steps
                )));
            }
            prev = (s.at_fraction, s.lr);
        }
        if self.pk_sampling {
            self.sampler.validate()?;
        } else if self.loss.lambda > 0.0 {
            return Err(Error::invalid("the triplet loss requires PK sampling"));
        }
        self.loss.validate()?;
        self.dhsm.validate()?;
        self.jitter.validate()?;
        if self.spectra.count() == 0 {
            return Err(Error::invalid("at least one spectrum must be enabled"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint_every must be at least 1"));
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_size: self.model.input_size,
            conv_channels: self.model.conv_channels,
            embedding_dim: self.model.embedding_dim,
            num_classes,
            dropout_rate: self.model.dropout_rate,
            rng_seed: rng::derive(self.rng_seed, &[0x30DE1]),
        }
    }

    pub fn batches_for(&self, num_images: usize) -> usize {
        self.batches_per_epoch
            .unwrap_or_else(|| num_images.div_ceil(self.sampler.batch_originals()))
    }
}

pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let mut lr = cfg.base_lr;
    for s in &cfg.lr_steps {
        if epoch as f64 >= s.at_fraction * cfg.epochs as f64 {
            lr = s.lr;
        }
    }
    lr
}

/// Training manifest with its images loaded.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageTensor>,
    identities: IdentityIndex,
}

impl TrainingData {
    pub fn new(manifest: DatasetManifest, images: Vec<ImageTensor>) -> Result<Self> {
        if images.len() != manifest.len() {
            return Err(Error::Shape(format!(
                "{} images for {} records",
                images.len(),
                manifest.len()
            )));
        }
        for (r, img) in manifest.records().iter().zip(&images) {
            if img.channels() != r.modality.channels() {
                return Err(Error::Manifest(format!(
                    "{} image {} has {} channels",
                    r.modality,
                    r.image_path.display(),
                    img.channels()
                )));
            }
        }
        let identities = IdentityIndex::new(&manifest);
        Ok(TrainingData {
            manifest,
            images,
            identities,
        })
    }

    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let images = manifest.load_images()?;
        Self::new(manifest, images)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochMetrics {
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_tri: f64,
    pub batches: usize,
}

/// Per-batch network inputs assembled from sampled originals.
struct BatchInputs {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_originals: usize,
    /// Spectrum of every generated visible-derived item, by batch row.
    spectra: Vec<(usize, Spectrum)>,
}

fn assemble_batch<R: Rng>(
    data: &TrainingData,
    items: &[PkItem],
    dist: &sampler::SpectrumDistribution,
    cfg: &TrainConfig,
    r: &mut R,
) -> Result<BatchInputs> {
    let records = data.manifest.records();
    let flipped: Vec<ImageTensor> = items
        .iter()
        .map(|it| {
            let img = &data.images[it.record];
            if cfg.horizontal_flip && r.random_bool(0.5) {
                imaging::flip_horizontal(img)
            } else {
                img.clone()
            }
        })
        .collect();
    let originals: Vec<Original<'_>> = items
        .iter()
        .zip(&flipped)
        .map(|(it, image)| Original {
            image,
            label: it.label,
            modality: records[it.record].modality,
        })
        .collect();
    let num_originals = originals.len();
    let images: Vec<sampler::BatchImage> = if cfg.pairing {
        let batch = sampler::make_pairs(&originals, dist, &cfg.jitter, r)?;
        batch.originals.into_iter().chain(batch.generated).collect()
    } else {
        originals.iter().map(sampler::expand_original).collect::<Result<_>>()?
    };
    let spectra = images
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.tag.spectrum().map(|s| (i, s)))
        .collect();
    let labels = images.iter().map(|b| b.label).collect();
    let inputs = par::map_slice(&images, |b| imaging::normalize(&b.image).map(|n| n.to_planar()))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(BatchInputs {
        inputs,
        labels,
        num_originals,
        spectra,
    })
}

/// One pass of `batches_for(len)` batches at learning rate `lr`.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut EmbeddingModel,
    adam: &mut AdamState,
    data: &TrainingData,
    dist: &sampler::SpectrumDistribution,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<(EpochMetrics, SpectrumStats)> {
    let mut stats = SpectrumStats::default();
    let mut metrics = EpochMetrics::default();
    let n_batches = cfg.batches_for(data.manifest.len());
    let pk = cfg.sampler.batch_originals();
    for b in 0..n_batches {
        let mut r = rng::stream(cfg.rng_seed, &[0xE90C, epoch as u64, b as u64]);
        let items = if cfg.pk_sampling {
            sampler::pk_sample(&data.identities, &cfg.sampler, &mut r)?
        } else {
            sampler::random_sample(&data.manifest, pk, &mut r)
        };
        let batch = assemble_batch(data, &items, dist, cfg, &mut r)?;
        let dropout_seed: u64 = r.random();
        let out = model.forward_planar(&batch.inputs, ForwardMode::Train { dropout_seed })?;
        let loss = losses::total_loss(&out.logits, &out.embeddings, batch.num_originals, &batch.labels, &cfg.loss)
            .map_err(|e| Error::Numeric(format!("epoch {epoch} batch {b}: {e}")))?;
        let grads = model.backward(&out.trace, &loss.grad_embeddings, &loss.grad_logits)?;
        adam_step(model.tensors_mut(), &grads, adam, lr)
            .map_err(|e| Error::Numeric(format!("epoch {epoch} batch {b}: {e}")))?;
        for &(row, s) in &batch.spectra {
            stats.record(s, loss.per_sample_target_prob[row].clamp(0.0, 1.0))?;
        }
        metrics.loss_total += loss.total;
        metrics.loss_cls += loss.cls;
        metrics.loss_tri += loss.tri;
        metrics.batches += 1;
    }
    let n = metrics.batches.max(1) as f64;
    metrics.loss_total /= n;
    metrics.loss_cls /= n;
    metrics.loss_tri /= n;
    Ok((metrics, stats))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub metrics: EpochMetrics,
    /// Mean confidence per spectrum this epoch (NaN if unobserved and never seen).
    pub confidence: [f64; 4],
    /// Distribution to be used in the next epoch.
    pub dist: [f64; 4],
}

pub const LOG_HEADER: &str = "epoch,lr,loss_total,loss_cls,loss_tri,R_R,R_G,R_B,R_X,P_R,P_G,P_B,P_X";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{}",
            self.epoch, self.lr, self.metrics.loss_total, self.metrics.loss_cls, self.metrics.loss_tri
        );
        for v in self.confidence.iter().chain(&self.dist) {
            write!(s, ",{v}").expect("string write");
        }
        s
    }
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Directory for checkpoints, the training log and the serialized config.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: EmbeddingModel,
    pub adam: AdamState,
    pub dhsm: DhsmState,
    /// Rows produced by this run.
    pub log: Vec<EpochLog>,
}

impl FitOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig, epochs_done: usize) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            epoch: epochs_done,
            dhsm: self.dhsm,
            train_config: serde_json::to_value(cfg).ok(),
        }
    }
}

/// Trains for `cfg.epochs` epochs (or the remainder when resuming).
pub fn fit(data: &TrainingData, cfg: &TrainConfig, opts: FitOptions) -> Result<FitOutcome> {
    cfg.validate()?;
    let m = data.manifest.num_persons();
    if cfg.pk_sampling && m < cfg.sampler.p {
        return Err(Error::invalid(format!(
            "training manifest has {m} persons, fewer than P={}",
            cfg.sampler.p
        )));
    }
    let (mut model, mut adam, mut dhsm, start) = match opts.resume {
        Some(ck) => {
            if ck.model.config().num_classes != m {
                return Err(Error::invalid(format!(
                    "checkpoint has {} classes, manifest has {m} persons",
                    ck.model.config().num_classes
                )));
            }
            (ck.model, ck.adam, ck.dhsm, ck.epoch)
        }
        None => {
            let model = EmbeddingModel::new(cfg.model_config(m))?;
            let adam = AdamState::new(model.tensors());
            (model, adam, DhsmState::new(&cfg.spectra)?, 0)
        }
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&path, e))?;
    }
    let mut log = Vec::new();
    for epoch in start..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let (metrics, stats) = train_epoch(&mut model, &mut adam, data, &dhsm.dist, cfg, epoch, lr)?;
        let (update, next) = sampler::dhsm_update(&stats, &dhsm, &cfg.dhsm, &cfg.spectra)?;
        if cfg.dhsm.enabled {
            dhsm = next;
        } else {
            dhsm.confidence = next.confidence;
        }
        log::info!(
            "epoch {epoch} lr {lr:e} loss {:.4} (cls {:.4}, tri {:.4}) P {:?}",
            metrics.loss_total,
            metrics.loss_cls,
            metrics.loss_tri,
            dhsm.dist.probs()
        );
        log.push(EpochLog {
            epoch,
            lr,
            metrics,
            confidence: update.confidence,
            dist: dhsm.dist.probs(),
        });
        if !model.is_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite in epoch {epoch}")));
        }
        if let (Some(dir), Some(every)) = (&opts.out_dir, cfg.checkpoint_every) {
            if (epoch + 1) % every == 0 {
                let ck = Checkpoint {
                    model: model.clone(),
                    adam: adam.clone(),
                    epoch: epoch + 1,
                    dhsm,
                    train_config: serde_json::to_value(cfg).ok(),
                };
                checkpoint::save(&ck, &dir.join(format!("checkpoint_epoch_{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    let outcome = FitOutcome {
        model,
        adam,
        dhsm,
        log,
    };
    if let Some(dir) = &opts.out_dir {
        checkpoint::save(&outcome.checkpoint(cfg, cfg.epochs), &dir.join("final.ckpt"))?;
        write_log(&dir.join("train_log.csv"), start, &outcome.log)?;
    }
    Ok(outcome)
}

/// Writes the training log, keeping earlier rows of a resumed run.
fn write_log(path: &Path, start: usize, rows: &[EpochLog]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    if start > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
                if epoch.is_some_and(|e| e < start) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_closed_form() {
        let mut params = vec![ParamTensor {
            name: "w".into(),
            shape: vec![1],
            data: vec![0.0],
        }];
        let mut st = AdamState::new(&params);
        let g = ParameterGradients { tensors: vec![vec![1.0]] };
        adam_step(&mut params, &g, &mut st, 1e-3).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((params[0].data[0] - expected).abs() < 1e-18);
        assert!((params[0].data[0] + 9.99999995e-4).abs() < 1e-10);
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut params = vec![ParamTensor {
            name: "w".into(),
            shape: vec![3],
            data: vec![0.5, -1.0, 2.0],
        }];
        let mut st = AdamState::new(&params);
        let g = ParameterGradients { tensors: vec![vec![0.0; 3]] };
        for _ in 0..10 {
            adam_step(&mut params, &g, &mut st, 1e-3).unwrap();
        }
        assert_eq!(params[0].data, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = vec![ParamTensor {
            name: "conv9.weight".into(),
            shape: vec![1],
            data: vec![0.0],
        }];
        let mut st = AdamState::new(&params);
        let g = ParameterGradients { tensors: vec![vec![f64::NAN]] };
        let e = adam_step(&mut params, &g, &mut st, 1e-3).unwrap_err();
        assert!(e.to_string().contains("conv9.weight"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn lr_schedule_milestones() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0), 1e-3);
        assert_eq!(lr_at_epoch(&cfg, 49), 1e-3);
        assert_eq!(lr_at_epoch(&cfg, 50), 1e-4);
        assert_eq!(lr_at_epoch(&cfg, 60), 1e-4);
        assert_eq!(lr_at_epoch(&cfg, 90), 1e-5);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.sampler.p = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lr_steps = vec![LrStep { at_fraction: 0.5, lr: 1e-2 }];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.pk_sampling = false;
        assert!(c.validate().is_err());
        c.loss.lambda = 0.0;
        c.validate().unwrap();
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let e = serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "bogus": 1}"#);
        assert!(e.is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.sampler.p, 16);
    }
}
