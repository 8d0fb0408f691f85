//! Cross-modality retrieval evaluation: embedding extraction, Euclidean
//! distance matrices, CMC and mAP, and a repeated-trial protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Modality};
use crate::imaging::{self, ImageTensor};
use crate::losses::euclidean;
use crate::model::EmbeddingModel;
use crate::{par, rng, Error, Matrix, Result};

/// Ranks reported in tables, 1-based.
pub const REPORTED_RANKS: [usize; 3] = [1, 10, 20];

/// Eval-mode embeddings of raw images; infrared inputs are channel-expanded,
/// visible inputs go in as RGB.
pub fn extract_embeddings(model: &EmbeddingModel, images: &[ImageTensor]) -> Result<Matrix> {
    let inputs = par::map_slice(images, |img| -> Result<Vec<f64>> {
        let rgb = match img.channels() {
            1 => imaging::expand_channels(img)?,
            _ => img.clone(),
        };
        Ok(imaging::normalize(&rgb)?.to_planar())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (h, w, c) = model.config().input_size;
    if let Some(img) = images.iter().find(|i| i.height() != h || i.width() != w) {
        return Err(Error::Shape(format!(
            "image {}x{} does not match model input {h}x{w}x{c}",
            img.height(),
            img.width()
        )));
    }
    model.embed_planar(&inputs)
}

/// `d[i][j] = ||q_i - g_j||`.
pub fn distance_matrix(query: &Matrix, gallery: &Matrix) -> Result<Matrix> {
    if query.cols() != gallery.cols() {
        return Err(Error::Shape(format!(
            "query dim {} != gallery dim {}",
            query.cols(),
            gallery.cols()
        )));
    }
    let g = gallery.rows();
    let mut out = Matrix::zeros(query.rows(), g);
    if g == 0 {
        return Ok(out);
    }
    par::for_each_chunk_mut(out.as_mut_slice(), g, |i, row| {
        let q = query.row(i);
        for (j, d) in row.iter_mut().enumerate() {
            *d = euclidean(q, gallery.row(j));
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalScores {
    /// `cmc[r - 1]` is the fraction of queries matched within the top `r`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub average_precision: Vec<f64>,
}

impl RetrievalScores {
    pub fn cmc_at(&self, rank: usize) -> f64 {
        cmc_at(&self.cmc, rank)
    }
}

/// CMC at a 1-based rank, saturating at the curve length.
pub fn cmc_at(cmc: &[f64], rank: usize) -> f64 {
    if cmc.is_empty() || rank == 0 {
        return 0.0;
    }
    cmc[rank.min(cmc.len()) - 1]
}

/// Gallery order for one query: ascending distance, ties by index.
pub fn ranking(dist_row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist_row.len()).collect();
    order.sort_by(|&a, &b| dist_row[a].total_cmp(&dist_row[b]).then(a.cmp(&b)));
    order
}

/// CMC curve and non-interpolated mAP.
pub fn cmc_map(dist: &Matrix, query_labels: &[usize], gallery_labels: &[usize]) -> Result<RetrievalScores> {
    let (q, g) = (dist.rows(), dist.cols());
    if query_labels.len() != q || gallery_labels.len() != g {
        return Err(Error::Shape(format!(
            "{q}x{g} distances with {} query and {} gallery labels",
            query_labels.len(),
            gallery_labels.len()
        )));
    }
    if q == 0 {
        return Err(Error::invalid("no queries"));
    }
    let mut first_hit = vec![0usize; g];
    let mut aps = Vec::with_capacity(q);
    for (i, &label) in query_labels.iter().enumerate() {
        let order = ranking(dist.row(i));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (rank, &j) in order.iter().enumerate() {
            if gallery_labels[j] == label {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
                first.get_or_insert(rank);
            }
        }
        let first = first.ok_or_else(|| {
            Error::invalid(format!(
                "query {i} (label {label}) has no relevant gallery item"
            ))
        })?;
        first_hit[first] += 1;
        aps.push(precision_sum / hits as f64);
    }
    let mut cmc = Vec::with_capacity(g);
    let mut acc = 0usize;
    for h in first_hit {
        acc += h;
        cmc.push(acc as f64 / q as f64);
    }
    Ok(RetrievalScores {
        cmc,
        map: aps.iter().sum::<f64>() / q as f64,
        average_precision: aps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Visible queries against an infrared gallery.
    V2t,
    /// Infrared queries against a visible gallery.
    T2v,
}

impl Direction {
    pub fn query_modality(self) -> Modality {
        match self {
            Direction::V2t => Modality::Visible,
            Direction::T2v => Modality::Infrared,
        }
    }

    pub fn from_query(m: Modality) -> Self {
        match m {
            Modality::Visible => Direction::V2t,
            Modality::Infrared => Direction::T2v,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::V2t => "v2t",
            Direction::T2v => "t2v",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v2t" => Ok(Direction::V2t),
            "t2v" => Ok(Direction::T2v),
            o => Err(Error::invalid(format!("unknown direction {o:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryMode {
    /// Every gallery-modality image.
    All,
    /// One random image per (identity, camera) per trial.
    SingleShotPerIdPerCamera,
}

impl FromStr for GalleryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(GalleryMode::All),
            "single-shot" | "single_shot" | "single_shot_per_id_per_camera" => {
                Ok(GalleryMode::SingleShotPerIdPerCamera)
            }
            o => Err(Error::invalid(format!("unknown gallery mode {o:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub query_modality: Modality,
    pub num_trials: usize,
    pub gallery_mode: GalleryMode,
    pub rng_seed: u64,
}

impl ProtocolConfig {
    pub fn new(direction: Direction) -> Self {
        ProtocolConfig {
            query_modality: direction.query_modality(),
            num_trials: 10,
            gallery_mode: GalleryMode::All,
            rng_seed: 0,
        }
    }

    pub fn gallery_modality(&self) -> Modality {
        self.query_modality.other()
    }

    pub fn direction(&self) -> Direction {
        Direction::from_query(self.query_modality)
    }
}

/// Test manifest with its images loaded.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageTensor>,
}

impl EvalSet {
    pub fn new(manifest: DatasetManifest, images: Vec<ImageTensor>) -> Result<Self> {
        if images.len() != manifest.len() {
            return Err(Error::Shape(format!(
                "{} images for {} records",
                images.len(),
                manifest.len()
            )));
        }
        Ok(EvalSet { manifest, images })
    }

    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let images = manifest.load_images()?;
        Self::new(manifest, images)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialScores {
    pub cmc: Vec<f64>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub direction: Direction,
    pub trials: Vec<TrialScores>,
    pub mean_cmc: Vec<f64>,
    pub std_cmc: Vec<f64>,
    pub map_mean: f64,
    pub map_std: f64,
}

impl EvalReport {
    pub fn rank(&self, r: usize) -> f64 {
        cmc_at(&self.mean_cmc, r)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Gallery indices (into `records`) for one trial.
pub fn select_gallery(
    manifest: &DatasetManifest,
    modality: Modality,
    mode: GalleryMode,
    seed: u64,
    trial: usize,
) -> Vec<usize> {
    let candidates = manifest
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.modality == modality);
    match mode {
        GalleryMode::All => candidates.map(|(i, _)| i).collect(),
        GalleryMode::SingleShotPerIdPerCamera => {
            let mut groups: BTreeMap<(usize, u32), Vec<usize>> = BTreeMap::new();
            for (i, r) in candidates {
                groups.entry((r.label, r.camera_id)).or_default().push(i);
            }
            let mut r = rng::stream(seed, &[0x6A11, trial as u64]);
            groups
                .values()
                .map(|g| g[r.random_range(0..g.len())])
                .collect()
        }
    }
}

/// Scores precomputed embeddings of the whole test set under `cfg`.
pub fn run_protocol_on_embeddings(
    embeddings: &Matrix,
    manifest: &DatasetManifest,
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    if cfg.num_trials == 0 {
        return Err(Error::invalid("num_trials must be at least 1"));
    }
    if embeddings.rows() != manifest.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} records",
            embeddings.rows(),
            manifest.len()
        )));
    }
    let records = manifest.records();
    let query_idx: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].modality == cfg.query_modality)
        .collect();
    let queries = embeddings.select_rows(&query_idx);
    let query_labels: Vec<usize> = query_idx.iter().map(|&i| records[i].label).collect();
    let trials = par::map_range(cfg.num_trials, |t| -> Result<TrialScores> {
        let gallery_idx = select_gallery(manifest, cfg.gallery_modality(), cfg.gallery_mode, cfg.rng_seed, t);
        let gallery = embeddings.select_rows(&gallery_idx);
        let gallery_labels: Vec<usize> = gallery_idx.iter().map(|&i| records[i].label).collect();
        let dist = distance_matrix(&queries, &gallery)?;
        let s = cmc_map(&dist, &query_labels, &gallery_labels)?;
        Ok(TrialScores { cmc: s.cmc, map: s.map })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let len = trials.iter().map(|t| t.cmc.len()).max().unwrap_or(0);
    let mut mean_cmc = Vec::with_capacity(len);
    let mut std_cmc = Vec::with_capacity(len);
    for r in 1..=len {
        let vals: Vec<f64> = trials.iter().map(|t| cmc_at(&t.cmc, r)).collect();
        let (m, s) = mean_std(&vals);
        mean_cmc.push(m);
        std_cmc.push(s);
    }
    let maps: Vec<f64> = trials.iter().map(|t| t.map).collect();
    let (map_mean, map_std) = mean_std(&maps);
    Ok(EvalReport {
        direction: cfg.direction(),
        trials,
        mean_cmc,
        std_cmc,
        map_mean,
        map_std,
    })
}

pub fn run_protocol(model: &EmbeddingModel, test: &EvalSet, cfg: &ProtocolConfig) -> Result<EvalReport> {
    let embeddings = extract_embeddings(model, &test.images)?;
    run_protocol_on_embeddings(&embeddings, &test.manifest, cfg)
}
