//! PK identity-balanced sampling, dual-subspace pairing, and dynamic hard
//! spectrum mining (DHSM).
//!
//! DHSM keeps a categorical distribution over the four visible-derived spectra.
//! During an epoch the target-class probability of every generated R/G/B/X
//! image is accumulated per spectrum; at the epoch boundary the mean
//! confidence `R_q` turns into raw probabilities `(1 - R_q) / sum(1 - R_q)`,
//! which are blended with the previous distribution by `alpha`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Modality};
use crate::imaging::{self, ImageTensor, JitterConfig, Spectrum, SpectrumTag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Persons per batch.
    pub p: usize,
    /// Images per person.
    pub k: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            p: 16,
            k: 4,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::invalid(format!(
                "PK sampling needs P >= 2 and K >= 2 for the triplet loss, got P={} K={}",
                self.p, self.k
            )));
        }
        Ok(())
    }

    pub fn batch_originals(&self) -> usize {
        self.p * self.k
    }
}

/// Record indices grouped by class label.
#[derive(Debug, Clone)]
pub struct IdentityIndex {
    groups: Vec<Vec<usize>>,
}

impl IdentityIndex {
    pub fn new(manifest: &DatasetManifest) -> Self {
        IdentityIndex {
            groups: manifest.by_label(),
        }
    }

    pub fn from_groups(groups: Vec<Vec<usize>>) -> Result<Self> {
        if groups.iter().any(Vec::is_empty) {
            return Err(Error::invalid("every identity needs at least one image"));
        }
        Ok(IdentityIndex { groups })
    }

    pub fn num_persons(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, label: usize) -> &[usize] {
        &self.groups[label]
    }
}

/// One sampled original: a record index and its class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PkItem {
    pub record: usize,
    pub label: usize,
}

/// Draws P persons without replacement and K images each, grouped by person.
/// Persons with fewer than K images are sampled with replacement.
pub fn pk_sample<R: Rng + ?Sized>(
    identities: &IdentityIndex,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<PkItem>> {
    if cfg.p == 0 || cfg.k == 0 {
        return Err(Error::invalid("P and K must be positive"));
    }
    let m = identities.num_persons();
    if m < cfg.p {
        return Err(Error::invalid(format!(
            "cannot draw P={} persons from {m}",
            cfg.p
        )));
    }
    let mut out = Vec::with_capacity(cfg.p * cfg.k);
    for label in index::sample(rng, m, cfg.p).into_iter() {
        let group = identities.group(label);
        if group.len() >= cfg.k {
            for i in index::sample(rng, group.len(), cfg.k).into_iter() {
                out.push(PkItem {
                    record: group[i],
                    label,
                });
            }
        } else {
            for _ in 0..cfg.k {
                out.push(PkItem {
                    record: group[rng.random_range(0..group.len())],
                    label,
                });
            }
        }
    }
    Ok(out)
}

/// Uniform draw of `n` records regardless of identity (no PK structure).
pub fn random_sample<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    n: usize,
    rng: &mut R,
) -> Vec<PkItem> {
    let recs = manifest.records();
    (0..n)
        .map(|_| {
            let record = rng.random_range(0..recs.len());
            PkItem {
                record,
                label: recs[record].label,
            }
        })
        .collect()
}

/// Probabilities over `(R, G, B, X)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumDistribution {
    probs: [f64; 4],
}

impl Default for SpectrumDistribution {
    fn default() -> Self {
        Self::uniform()
    }
}

impl SpectrumDistribution {
    pub fn uniform() -> Self {
        SpectrumDistribution { probs: [0.25; 4] }
    }

    /// Uniform over the active spectra.
    pub fn uniform_over(active: &SpectrumSet) -> Result<Self> {
        let n = active.count();
        if n == 0 {
            return Err(Error::invalid("spectrum set is empty"));
        }
        let mut probs = [0.0; 4];
        for s in active.iter() {
            probs[s.index()] = 1.0 / n as f64;
        }
        Ok(SpectrumDistribution { probs })
    }

    pub fn new(probs: [f64; 4]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(format!("invalid spectrum probabilities {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "spectrum probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(SpectrumDistribution { probs })
    }

    pub fn probs(&self) -> [f64; 4] {
        self.probs
    }

    pub fn prob(&self, s: Spectrum) -> f64 {
        self.probs[s.index()]
    }

    /// Inverse-CDF draw over the fixed order `(R, G, B, X)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Spectrum {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = Spectrum::X;
        for s in Spectrum::ALL {
            let p = self.probs[s.index()];
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = s;
            if u < acc {
                return s;
            }
        }
        // u landed in the rounding slack above the cumulative sum
        last
    }
}

/// Draws one spectrum from `dist`.
pub fn dhsm_sample_spectrum<R: Rng + ?Sized>(dist: &SpectrumDistribution, rng: &mut R) -> Spectrum {
    dist.sample(rng)
}

/// Subset of the four spectra enabled for generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectrumSet([bool; 4]);

impl Default for SpectrumSet {
    fn default() -> Self {
        SpectrumSet([true; 4])
    }
}

impl SpectrumSet {
    pub fn from_spectra(spectra: &[Spectrum]) -> Self {
        let mut set = [false; 4];
        for s in spectra {
            set[s.index()] = true;
        }
        SpectrumSet(set)
    }

    pub fn contains(&self, s: Spectrum) -> bool {
        self.0[s.index()]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = Spectrum> + '_ {
        Spectrum::ALL.into_iter().filter(|s| self.contains(*s))
    }
}

/// An original image of a batch, before pairing.
#[derive(Debug, Clone, Copy)]
pub struct Original<'a> {
    pub image: &'a ImageTensor,
    pub label: usize,
    pub modality: Modality,
}

/// A 3-channel network input with its identity and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchImage {
    pub image: ImageTensor,
    pub label: usize,
    pub tag: SpectrumTag,
}

/// `2PK` training batch: originals first, their generated counterparts second.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub originals: Vec<BatchImage>,
    pub generated: Vec<BatchImage>,
    /// `origin_index[i]` is the original that `generated[i]` was derived from.
    pub origin_index: Vec<usize>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.originals.len() + self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All images in batch order.
    pub fn images(&self) -> impl Iterator<Item = &BatchImage> {
        self.originals.iter().chain(self.generated.iter())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images().map(|b| b.label).collect()
    }

    /// Checks the size, label and tag invariants for a `p x k` batch.
    pub fn check_invariants(&self, p: usize, k: usize) -> Result<()> {
        let n = p * k;
        if self.originals.len() != n || self.generated.len() != n || self.origin_index.len() != n {
            return Err(Error::invalid(format!(
                "paired batch sizes {}/{}/{} for PK={n}",
                self.originals.len(),
                self.generated.len(),
                self.origin_index.len()
            )));
        }
        let mut per_label = std::collections::BTreeMap::new();
        for o in &self.originals {
            *per_label.entry(o.label).or_insert(0usize) += 1;
            if o.image.channels() != 3 {
                return Err(Error::invalid("original not channel-expanded"));
            }
        }
        if per_label.len() != p || per_label.values().any(|&c| c != k) {
            return Err(Error::invalid(format!("label histogram {per_label:?}")));
        }
        for (g, &oi) in self.generated.iter().zip(&self.origin_index) {
            let o = &self.originals[oi];
            if g.label != o.label || g.image.channels() != 3 {
                return Err(Error::invalid("generated item mismatches its original"));
            }
            let ok = match o.tag {
                SpectrumTag::OriginalRgb => g.tag.spectrum().is_some(),
                SpectrumTag::OriginalIr => g.tag == SpectrumTag::IrJitter,
                _ => false,
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "original {:?} paired with {:?}",
                    o.tag, g.tag
                )));
            }
        }
        Ok(())
    }
}

/// Originals as 3-channel network inputs (infrared is channel-expanded).
pub fn expand_original(original: &Original<'_>) -> Result<BatchImage> {
    let (image, tag) = match original.modality {
        Modality::Visible => (original.image.clone(), SpectrumTag::OriginalRgb),
        Modality::Infrared => (imaging::expand_channels(original.image)?, SpectrumTag::OriginalIr),
    };
    if image.channels() != 3 {
        return Err(Error::invalid(format!(
            "{} original has {} channels",
            original.modality,
            original.image.channels()
        )));
    }
    Ok(BatchImage {
        image,
        label: original.label,
        tag,
    })
}

/// Pairs each original with a generated counterpart: a spectrum image drawn
/// from `dist` for visible originals, a brightness-jittered copy for infrared.
pub fn make_pairs<R: Rng + ?Sized>(
    originals: &[Original<'_>],
    dist: &SpectrumDistribution,
    jitter: &JitterConfig,
    rng: &mut R,
) -> Result<PairedBatch> {
    let mut out_orig = Vec::with_capacity(originals.len());
    let mut generated = Vec::with_capacity(originals.len());
    for o in originals {
        out_orig.push(expand_original(o)?);
        let (single, tag) = match o.modality {
            Modality::Visible => {
                let s = dist.sample(rng);
                imaging::generate_spectrum_image(o.image, s)?
            }
            Modality::Infrared => (
                imaging::jitter_infrared(o.image, jitter, rng)?,
                SpectrumTag::IrJitter,
            ),
        };
        generated.push(BatchImage {
            image: imaging::expand_channels(&single)?,
            label: o.label,
            tag,
        });
    }
    Ok(PairedBatch {
        originals: out_orig,
        generated,
        origin_index: (0..originals.len()).collect(),
    })
}

/// Per-spectrum accumulation of target-class probabilities over one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStats {
    pub sums: [f64; 4],
    pub counts: [u64; 4],
    pub total: u64,
}

impl SpectrumStats {
    pub fn record(&mut self, spectrum: Spectrum, target_prob: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&target_prob) {
            return Err(Error::invalid(format!(
                "target probability {target_prob} outside [0, 1]"
            )));
        }
        let i = spectrum.index();
        self.sums[i] += target_prob;
        self.counts[i] += 1;
        self.total += 1;
        Ok(())
    }

    /// Mean confidence of a spectrum, if it was observed.
    pub fn confidence(&self, spectrum: Spectrum) -> Option<f64> {
        let i = spectrum.index();
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }
}

/// Functional form of [`SpectrumStats::record`].
pub fn record_confidence(
    mut stats: SpectrumStats,
    spectrum: Spectrum,
    target_prob: f64,
) -> Result<SpectrumStats> {
    stats.record(spectrum, target_prob)?;
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhsmConfig {
    /// Weight of the previous distribution in the blend.
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for DhsmConfig {
    fn default() -> Self {
        DhsmConfig {
            alpha: 0.1,
            enabled: true,
        }
    }
}

impl DhsmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("DHSM alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Distribution plus the last known confidence per spectrum, carried across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhsmState {
    pub dist: SpectrumDistribution,
    pub confidence: [Option<f64>; 4],
}

impl DhsmState {
    pub fn new(active: &SpectrumSet) -> Result<Self> {
        Ok(DhsmState {
            dist: SpectrumDistribution::uniform_over(active)?,
            confidence: [None; 4],
        })
    }
}

/// Quantities produced at one epoch boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DhsmUpdate {
    /// `R_q` used for the update (NaN for inactive spectra).
    pub confidence: [f64; 4],
    /// Unsmoothed distribution from the confidences.
    pub raw: SpectrumDistribution,
    /// `alpha * prev + (1 - alpha) * raw`.
    pub smoothed: SpectrumDistribution,
}

/// Raw DHSM probabilities `(1 - R_q) / sum(1 - R_q)` over the active spectra;
/// uniform when every active confidence is 1.
pub fn raw_distribution(confidence: &[f64; 4], active: &SpectrumSet) -> Result<SpectrumDistribution> {
    let mut hardness = [0.0; 4];
    for s in active.iter() {
        let r = confidence[s.index()];
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("confidence {r} outside [0, 1]")));
        }
        hardness[s.index()] = 1.0 - r;
    }
    let total: f64 = hardness.iter().sum();
    if total <= 0.0 {
        return SpectrumDistribution::uniform_over(active);
    }
    Ok(SpectrumDistribution {
        probs: hardness.map(|h| h / total),
    })
}

/// One DHSM epoch-boundary update.
///
/// Spectra unobserved this epoch reuse their previous confidence; a spectrum
/// never observed takes the mean confidence of those observed now.
pub fn dhsm_update(
    stats: &SpectrumStats,
    prev: &DhsmState,
    cfg: &DhsmConfig,
    active: &SpectrumSet,
) -> Result<(DhsmUpdate, DhsmState)> {
    cfg.validate()?;
    let observed: Vec<f64> = active.iter().filter_map(|s| stats.confidence(s)).collect();
    let fallback = if observed.is_empty() {
        1.0
    } else {
        observed.iter().sum::<f64>() / observed.len() as f64
    };
    let mut confidence = [f64::NAN; 4];
    let mut carried = prev.confidence;
    for s in active.iter() {
        let i = s.index();
        let r = stats
            .confidence(s)
            .or(prev.confidence[i])
            .unwrap_or(fallback);
        confidence[i] = r;
        carried[i] = Some(r);
    }
    let raw = raw_distribution(&confidence, active)?;
    let prev_p = prev.dist.probs();
    let raw_p = raw.probs();
    let mut blended = [0.0; 4];
    for i in 0..4 {
        blended[i] = cfg.alpha * prev_p[i] + (1.0 - cfg.alpha) * raw_p[i];
    }
    let sum: f64 = blended.iter().sum();
    let smoothed = SpectrumDistribution {
        probs: blended.map(|p| p / sum),
    };
    Ok((
        DhsmUpdate {
            confidence,
            raw,
            smoothed,
        },
        DhsmState {
            dist: smoothed,
            confidence: carried,
        },
    ))
}
