//! Ablation configurations and the in-memory synthetic benchmark.

use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetManifest, SynthConfig};
use crate::eval::{self, Direction, EvalReport, EvalSet, GalleryMode, ProtocolConfig};
use crate::model::EmbeddingModel;
use crate::optim::{self, FitOptions, TrainConfig, TrainingData};
use crate::sampler::SamplerConfig;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Originals only: no generated spectra, no pairing.
    Baseline,
    /// Dual-subspace pairing with a fixed uniform spectrum distribution.
    Cdp,
    /// Pairing with dynamic hard spectrum mining.
    CdpDhsm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Cdp, Variant::CdpDhsm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cdp => "cdp",
            Variant::CdpDhsm => "cdp+dhsm",
        }
    }

    /// Applies this variant's switches to `base`.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.pairing = self != Variant::Baseline;
        cfg.dhsm.enabled = self == Variant::CdpDhsm;
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub synth: SynthConfig,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub train: TrainConfig,
    pub trials: usize,
    pub gallery_mode: GalleryMode,
    pub eval_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 100,
            sampler: SamplerConfig {
                p: 8,
                k: 4,
                rng_seed: 0,
            },
            rng_seed: 7,
            ..TrainConfig::default()
        };
        BenchmarkConfig {
            synth: SynthConfig::default(),
            train_fraction: 0.5,
            split_seed: 7,
            train,
            trials: 10,
            gallery_mode: GalleryMode::All,
            eval_seed: 7,
        }
    }
}

/// Rendered train and test sets.
pub struct BenchmarkData {
    pub train: TrainingData,
    pub test: EvalSet,
}

fn subset(all: &[(dataset::SampleRecord, crate::imaging::ImageTensor)], keep: &DatasetManifest) -> Vec<crate::imaging::ImageTensor> {
    let index: std::collections::HashMap<_, _> =
        all.iter().map(|(r, img)| (r.image_path.clone(), img)).collect();
    keep.records().iter().map(|r| index[&r.image_path].clone()).collect()
}

pub fn prepare(cfg: &BenchmarkConfig) -> Result<BenchmarkData> {
    let items = dataset::render_synthetic(&cfg.synth)?;
    let manifest = DatasetManifest::from_records(".", items.iter().map(|(r, _)| r.clone()).collect())?;
    let (train_m, test_m) = dataset::split(&manifest, cfg.train_fraction, cfg.split_seed)?;
    let train_images = subset(&items, &train_m);
    let test_images = subset(&items, &test_m);
    Ok(BenchmarkData {
        train: TrainingData::new(train_m, train_images)?,
        test: EvalSet::new(test_m, test_images)?,
    })
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub model: EmbeddingModel,
    /// Spectrum distribution after the last epoch.
    pub final_distribution: [f64; 4],
    pub reports: Vec<EvalReport>,
}

impl VariantResult {
    pub fn report(&self, d: Direction) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.direction == d)
    }
}

pub fn evaluate_both(model: &EmbeddingModel, test: &EvalSet, cfg: &BenchmarkConfig) -> Result<Vec<EvalReport>> {
    let embeddings = eval::extract_embeddings(model, &test.images)?;
    [Direction::V2t, Direction::T2v]
        .into_iter()
        .map(|d| {
            let pc = ProtocolConfig {
                num_trials: cfg.trials,
                gallery_mode: cfg.gallery_mode,
                rng_seed: cfg.eval_seed,
                ..ProtocolConfig::new(d)
            };
            eval::run_protocol_on_embeddings(&embeddings, &test.manifest, &pc)
        })
        .collect()
}

pub fn run_variant(data: &BenchmarkData, cfg: &BenchmarkConfig, variant: Variant) -> Result<VariantResult> {
    let train_cfg = variant.configure(&cfg.train);
    let outcome = optim::fit(&data.train, &train_cfg, FitOptions::default())?;
    let reports = evaluate_both(&outcome.model, &data.test, cfg)?;
    Ok(VariantResult {
        variant,
        final_distribution: outcome.dhsm.dist.probs(),
        model: outcome.model,
        reports,
    })
}
