//! Dataset manifests, identity-disjoint splits and a synthetic
//! cross-modality corpus.
//!
//! A manifest is a header-less CSV with one `image_path,person_id,camera_id,modality`
//! row per image. Relative image paths resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::{self, ImageTensor};
use crate::{par, rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Visible => 3,
            Modality::Infrared => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "visible" | "rgb" => Ok(Modality::Visible),
            "infrared" | "ir" | "thermal" => Ok(Modality::Infrared),
            other => Err(Error::invalid(format!("unknown modality {other:?}"))),
        }
    }
}

/// One dataset image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    /// Identity as written in the source manifest.
    pub person_id: u32,
    /// Contiguous class index in `0..num_persons` of the owning manifest.
    pub label: usize,
    pub camera_id: u32,
    pub modality: Modality,
    /// Path as written in the manifest, relative to the manifest root unless absolute.
    pub image_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    records: Vec<SampleRecord>,
    /// `person_ids[label]` is the source identity of class `label`.
    person_ids: Vec<u32>,
}

impl DatasetManifest {
    /// Builds a manifest, remapping identities to `0..M` in ascending order of
    /// source id and checking that every person has both modalities.
    pub fn from_records(root: impl Into<PathBuf>, mut records: Vec<SampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Manifest("empty manifest".into()));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(&r.image_path) {
                return Err(Error::Manifest(format!(
                    "duplicate image path {}",
                    r.image_path.display()
                )));
            }
        }
        let ids: BTreeSet<u32> = records.iter().map(|r| r.person_id).collect();
        let person_ids: Vec<u32> = ids.into_iter().collect();
        let index: BTreeMap<u32, usize> =
            person_ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let mut modalities = vec![(false, false); person_ids.len()];
        for r in &mut records {
            r.label = index[&r.person_id];
            let m = &mut modalities[r.label];
            match r.modality {
                Modality::Visible => m.0 = true,
                Modality::Infrared => m.1 = true,
            }
        }
        for (label, (vis, ir)) in modalities.iter().enumerate() {
            if !(vis & ir) {
                let missing = if *vis { "infrared" } else { "visible" };
                return Err(Error::Manifest(format!(
                    "person {} has no {missing} images",
                    person_ids[label]
                )));
            }
        }
        Ok(DatasetManifest {
            root: root.into(),
            records,
            person_ids,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_persons(&self) -> usize {
        self.person_ids.len()
    }

    pub fn person_ids(&self) -> &[u32] {
        &self.person_ids
    }

    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            self.root.join(&record.image_path)
        }
    }

    /// Record indices grouped by label.
    pub fn by_label(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_persons()];
        for (i, r) in self.records.iter().enumerate() {
            out[r.label].push(i);
        }
        out
    }

    /// Loads one image and checks its channel count against the modality.
    pub fn load_image(&self, record: &SampleRecord) -> Result<ImageTensor> {
        let path = self.resolve(record);
        let img = imaging::read_pnm(&path)?;
        if img.channels() != record.modality.channels() {
            return Err(Error::Manifest(format!(
                "{}: {} image has {} channels, expected {}",
                path.display(),
                record.modality,
                img.channels(),
                record.modality.channels()
            )));
        }
        Ok(img)
    }

    /// Loads every image in record order.
    pub fn load_images(&self) -> Result<Vec<ImageTensor>> {
        par::map_slice(&self.records, |r| self.load_image(r))
            .into_iter()
            .collect()
    }

    /// CSV text with paths as stored.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.image_path.display(),
                r.person_id,
                r.camera_id,
                r.modality
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    parse_manifest(&text, path, root)
}

/// Parses manifest text; `source` only labels error messages.
pub fn parse_manifest(text: &str, source: &Path, root: PathBuf) -> Result<DatasetManifest> {
    let perr = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(perr(
                line_no,
                format!("expected 4 fields image_path,person_id,camera_id,modality, got {}", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(perr(line_no, "empty image path".into()));
        }
        if let Some(prev) = seen.insert(fields[0].to_string(), line_no) {
            return Err(perr(
                line_no,
                format!("duplicate image path {} (first seen on line {prev})", fields[0]),
            ));
        }
        let person_id = fields[1]
            .parse::<u32>()
            .map_err(|_| perr(line_no, format!("bad person_id {:?}", fields[1])))?;
        let camera_id = fields[2]
            .parse::<u32>()
            .map_err(|_| perr(line_no, format!("bad camera_id {:?}", fields[2])))?;
        let modality = fields[3]
            .parse::<Modality>()
            .map_err(|e| perr(line_no, e.to_string()))?;
        records.push(SampleRecord {
            person_id,
            label: 0,
            camera_id,
            modality,
            image_path: PathBuf::from(fields[0]),
        });
    }
    if records.is_empty() {
        return Err(Error::Manifest(format!("{}: empty manifest", source.display())));
    }
    DatasetManifest::from_records(root, records)
}

/// Identity-disjoint split: `round(train_fraction * M)` persons go to the first half.
pub fn split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let m = manifest.num_persons();
    let n_train = (train_fraction * m as f64).round() as usize;
    if n_train == 0 || n_train == m {
        return Err(Error::invalid(format!(
            "splitting {m} persons at fraction {train_fraction} leaves one side empty"
        )));
    }
    let mut ids = manifest.person_ids.clone();
    ids.shuffle(&mut rng::stream(seed, &[0x5917]));
    let train_ids: HashSet<u32> = ids[..n_train].iter().copied().collect();
    let (train, test): (Vec<_>, Vec<_>) = manifest
        .records
        .iter()
        .cloned()
        .partition(|r| train_ids.contains(&r.person_id));
    Ok((
        DatasetManifest::from_records(manifest.root.clone(), train)?,
        DatasetManifest::from_records(manifest.root.clone(), test)?,
    ))
}

/// Simulated infrared response applied to the grayscale render.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IrTransform {
    /// Plain grayscale, no modality gap beyond lost color.
    Gray,
    /// `v' = 128 + contrast * (255 (v/255)^gamma - 128) + N(0, noise_sigma)`.
    GammaNoiseContrast {
        gamma: f64,
        noise_sigma: f64,
        contrast: f64,
    },
}

impl Default for IrTransform {
    fn default() -> Self {
        IrTransform::GammaNoiseContrast {
            gamma: 0.7,
            noise_sigma: 8.0,
            contrast: 0.75,
        }
    }
}

impl IrTransform {
    /// Deterministic part of the mapping for one gray level.
    pub fn map_level(&self, v: f64) -> f64 {
        match *self {
            IrTransform::Gray => v,
            IrTransform::GammaNoiseContrast {
                gamma, contrast, ..
            } => 128.0 + contrast * (255.0 * (v / 255.0).powf(gamma) - 128.0),
        }
    }

    pub fn noise_sigma(&self) -> f64 {
        match *self {
            IrTransform::Gray => 0.0,
            IrTransform::GammaNoiseContrast { noise_sigma, .. } => noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_persons: usize,
    pub images_per_person_per_modality: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub rng_seed: u64,
    pub ir_transform: IrTransform,
    /// Per-image illumination gain is drawn from `1 +- gain_jitter`.
    pub gain_jitter: f64,
    /// Maximum body offset in pixels, `(vertical, horizontal)`.
    pub max_shift: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_persons: 40,
            images_per_person_per_modality: 10,
            image_size: (imaging::INPUT_HEIGHT, imaging::INPUT_WIDTH),
            rng_seed: 7,
            ir_transform: IrTransform::default(),
            gain_jitter: 0.1,
            max_shift: (1.0, 1.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_persons == 0 || self.images_per_person_per_modality == 0 {
            return Err(Error::invalid("synthetic counts must be at least 1"));
        }
        if self.image_size.0 < 16 || self.image_size.1 < 8 {
            return Err(Error::invalid(format!(
                "synthetic image size {:?} too small (min 16x8)",
                self.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.gain_jitter) || self.max_shift.0 < 0.0 || self.max_shift.1 < 0.0 {
            return Err(Error::invalid(format!(
                "gain jitter {} must lie in [0, 1) and shifts {:?} must be non-negative",
                self.gain_jitter, self.max_shift
            )));
        }
        Ok(())
    }
}

pub const VISIBLE_CAMERAS: [u32; 2] = [1, 2];
pub const INFRARED_CAMERA: u32 = 3;

/// Torso surface texture of a synthetic identity.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Texture {
    Plain,
    HStripes { period: usize },
    VStripes { period: usize },
    Checker { period: usize },
}

/// Appearance parameters of one synthetic person; a pure function of
/// `(seed, person_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityPattern {
    background: [f64; 3],
    head: [f64; 3],
    torso: [f64; 3],
    /// Secondary torso color used by the texture.
    accent: [f64; 3],
    legs: [f64; 3],
    texture: Texture,
    /// Hue-only panel: top, width fraction and depth in torso coordinates, and its color.
    panel: Option<(f64, f64, f64, [f64; 3])>,
    /// Bag rectangle in relative coordinates `(y0, x0, y1, x1)` and its color.
    bag: Option<([f64; 4], [f64; 3])>,
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Random color with a target luma.
fn color_with_luma<R: Rng>(rng: &mut R, target: f64) -> [f64; 3] {
    let mut c = [
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
    ];
    let l = luma(c).max(1.0);
    let s = target / l;
    for v in &mut c {
        *v = (*v * s).clamp(0.0, 255.0);
    }
    c
}

/// Well-separated luma levels; identities are distinct combinations of these,
/// so the luminance structure that survives the infrared render is
/// identity-bearing and factorized across people.
const TORSO_LUMA: [f64; 5] = [45.0, 85.0, 125.0, 165.0, 205.0];
const LEGS_LUMA: [f64; 4] = [35.0, 95.0, 155.0, 215.0];
const TEXTURES: [Texture; 7] = [
    Texture::Plain,
    Texture::HStripes { period: 4 },
    Texture::HStripes { period: 8 },
    Texture::VStripes { period: 4 },
    Texture::VStripes { period: 8 },
    Texture::Checker { period: 4 },
    Texture::Checker { period: 8 },
];
const HEAD_LUMA: [f64; 3] = [70.0, 140.0, 210.0];
const COMBINATIONS: usize = TORSO_LUMA.len() * LEGS_LUMA.len() * TEXTURES.len() * HEAD_LUMA.len();

impl IdentityPattern {
    pub fn new(seed: u64, person_id: u32) -> Self {
        // Person ids index a seeded permutation of the attribute grid, so the
        // first COMBINATIONS ids have pairwise distinct luminance structure.
        let mut grid: Vec<usize> = (0..COMBINATIONS).collect();
        grid.shuffle(&mut rng::stream(seed, &[0x6B1D]));
        let block = person_id as usize / COMBINATIONS;
        let mut combo = grid[person_id as usize % COMBINATIONS];
        if block > 0 {
            combo = (combo + block * 37) % COMBINATIONS;
        }
        let texture = TEXTURES[combo % TEXTURES.len()];
        combo /= TEXTURES.len();
        let head_luma = HEAD_LUMA[combo % HEAD_LUMA.len()];
        combo /= HEAD_LUMA.len();
        let legs_luma = LEGS_LUMA[combo % LEGS_LUMA.len()];
        let torso_luma = TORSO_LUMA[combo / LEGS_LUMA.len()];

        let mut r = rng::stream(seed, &[0x1D, u64::from(person_id)]);
        let bg = r.random_range(20.0..40.0);
        let background = [bg, bg * r.random_range(0.9..1.1), bg * r.random_range(0.9..1.1)];
        let head = color_with_luma(&mut r, head_luma);
        let torso = color_with_luma(&mut r, torso_luma);
        let stripe_luma = if torso_luma > 125.0 { torso_luma - 90.0 } else { torso_luma + 90.0 };
        let accent = color_with_luma(&mut r, stripe_luma);
        let legs = color_with_luma(&mut r, legs_luma);
        // Half the identities carry a panel of equal luma but different hue:
        // a cue that disappears in the infrared render.
        let panel = if r.random_bool(0.5) {
            let hue_only = color_with_luma(&mut r, torso_luma);
            Some((r.random_range(0.0..0.3), r.random_range(0.35..0.6), r.random_range(0.5..1.0), hue_only))
        } else {
            None
        };
        let bag = if r.random_bool(0.4) {
            let y0 = r.random_range(0.3..0.5);
            let x0 = if r.random_bool(0.5) { 0.02 } else { 0.7 };
            let luma = r.random_range(40.0..220.0);
            let col = color_with_luma(&mut r, luma);
            Some(([y0, x0, y0 + r.random_range(0.12..0.2), x0 + 0.28], col))
        } else {
            None
        };
        IdentityPattern {
            background,
            head,
            torso,
            accent,
            legs,
            texture,
            panel,
            bag,
        }
    }

    fn torso_color(&self, ty: f64, tx: f64, ry: f64, rx: f64) -> [f64; 3] {
        if let Some((top, left_frac, depth, color)) = self.panel {
            if ry >= top && ry < top + depth * (1.0 - top) && rx < left_frac {
                return color;
            }
        }
        let (y, x) = (ty.floor() as i64, tx.floor() as i64);
        let on = |p: usize| (y.rem_euclid(p as i64) as usize) < p / 2;
        let on_x = |p: usize| (x.rem_euclid(p as i64) as usize) < p / 2;
        let accent = match self.texture {
            Texture::Plain => false,
            Texture::HStripes { period } => on(period),
            Texture::VStripes { period } => on_x(period),
            Texture::Checker { period } => on(period) ^ on_x(period),
        };
        if accent {
            self.accent
        } else {
            self.torso
        }
    }

    /// Renders the RGB appearance in u8 levels (unclamped floats), with
    /// `(dy, dx)` body offset and a per-pixel illumination gain.
    pub fn render(&self, height: usize, width: usize, dy: f64, dx: f64, gain: f64) -> Vec<[f64; 3]> {
        let (h, w) = (height as f64, width as f64);
        let head = (0.04 * h, 0.2 * h, 0.32 * w, 0.68 * w);
        let torso = (0.2 * h, 0.58 * h, 0.08 * w, 0.92 * w);
        let legs = (0.58 * h, 0.97 * h, 0.16 * w, 0.84 * w);
        let inside = |b: (f64, f64, f64, f64), y: f64, x: f64| y >= b.0 && y < b.1 && x >= b.2 && x < b.3;
        let mut out = Vec::with_capacity(height * width);
        for py in 0..height {
            for px in 0..width {
                let y = py as f64 + 0.5 - dy;
                let x = px as f64 + 0.5 - dx;
                let mut c = self.background;
                if inside(head, y, x) {
                    c = self.head;
                } else if inside(torso, y, x) {
                    let ry = (y - torso.0) / (torso.1 - torso.0);
                    let rx = (x - torso.2) / (torso.3 - torso.2);
                    c = self.torso_color(y - torso.0, x - torso.2, ry, rx);
                } else if inside(legs, y, x) {
                    c = self.legs;
                    // gap between the legs
                    if (x - 0.5 * w).abs() < 0.04 * w && y > 0.7 * h {
                        c = self.background;
                    }
                }
                if let Some((r, col)) = self.bag {
                    if y >= r[0] * h && y < r[2] * h && x >= r[1] * w && x < r[3] * w {
                        c = col;
                    }
                }
                out.push([c[0] * gain, c[1] * gain, c[2] * gain]);
            }
        }
        out
    }
}

/// Canonical, unperturbed RGB render of a person.
pub fn base_pattern(seed: u64, person_id: u32, size: (usize, usize)) -> ImageTensor {
    let px = IdentityPattern::new(seed, person_id).render(size.0, size.1, 0.0, 0.0, 1.0);
    let data = px.iter().flat_map(|c| c.map(imaging::round_u8)).collect();
    ImageTensor::from_u8(size.0, size.1, 3, data).expect("render size consistent")
}

/// Infrared counterpart of a base pattern without noise.
pub fn base_pattern_ir(seed: u64, person_id: u32, size: (usize, usize), ir: &IrTransform) -> ImageTensor {
    let px = IdentityPattern::new(seed, person_id).render(size.0, size.1, 0.0, 0.0, 1.0);
    let data = px
        .iter()
        .map(|c| imaging::round_u8(ir.map_level(luma(*c))))
        .collect();
    ImageTensor::from_u8(size.0, size.1, 1, data).expect("render size consistent")
}

fn render_sample(
    cfg: &SynthConfig,
    pattern: &IdentityPattern,
    person_id: u32,
    modality: Modality,
    idx: usize,
) -> ImageTensor {
    let (h, w) = cfg.image_size;
    let tag = match modality {
        Modality::Visible => 0,
        Modality::Infrared => 1,
    };
    let mut r = rng::stream(cfg.rng_seed, &[0x1A6, u64::from(person_id), tag, idx as u64]);
    let (sy, sx) = cfg.max_shift;
    let dy = r.random_range(-sy..=sy);
    let dx = r.random_range(-sx..=sx);
    let gain = r.random_range(1.0 - cfg.gain_jitter..=1.0 + cfg.gain_jitter);
    let px = pattern.render(h, w, dy, dx, gain);
    match modality {
        Modality::Visible => {
            let noise = Normal::new(0.0, 3.0).expect("valid sigma");
            let data = px
                .iter()
                .flat_map(|c| c.map(|v| v + noise.sample(&mut r)))
                .map(imaging::round_u8)
                .collect();
            ImageTensor::from_u8(h, w, 3, data).expect("render size consistent")
        }
        Modality::Infrared => {
            let sigma = cfg.ir_transform.noise_sigma();
            let noise = Normal::new(0.0, sigma.max(0.0)).expect("valid sigma");
            let data = px
                .iter()
                .map(|c| {
                    let g = luma(*c).clamp(0.0, 255.0);
                    let n = if sigma > 0.0 { noise.sample(&mut r) } else { 0.0 };
                    imaging::round_u8(cfg.ir_transform.map_level(g) + n)
                })
                .collect();
            ImageTensor::from_u8(h, w, 1, data).expect("render size consistent")
        }
    }
}

/// Relative path of a synthetic image inside the output directory.
pub fn synthetic_path(person_id: u32, modality: Modality, camera: u32, idx: usize) -> PathBuf {
    let ext = match modality {
        Modality::Visible => "ppm",
        Modality::Infrared => "pgm",
    };
    PathBuf::from(format!("person_{person_id}")).join(format!("{modality}_{camera}_{idx}.{ext}"))
}

/// Camera of the `idx`-th synthetic image of a modality.
pub fn synthetic_camera(modality: Modality, idx: usize) -> u32 {
    match modality {
        Modality::Visible => VISIBLE_CAMERAS[idx % VISIBLE_CAMERAS.len()],
        Modality::Infrared => INFRARED_CAMERA,
    }
}

/// Renders the whole synthetic corpus in memory, in manifest order.
pub fn render_synthetic(cfg: &SynthConfig) -> Result<Vec<(SampleRecord, ImageTensor)>> {
    cfg.validate()?;
    let per_person = par::map_range(cfg.num_persons, |p| {
        let pid = p as u32;
        let pattern = IdentityPattern::new(cfg.rng_seed, pid);
        let mut out = Vec::with_capacity(2 * cfg.images_per_person_per_modality);
        for modality in [Modality::Visible, Modality::Infrared] {
            for idx in 0..cfg.images_per_person_per_modality {
                let camera_id = synthetic_camera(modality, idx);
                let record = SampleRecord {
                    person_id: pid,
                    label: 0,
                    camera_id,
                    modality,
                    image_path: synthetic_path(pid, modality, camera_id, idx),
                };
                out.push((record, render_sample(cfg, &pattern, pid, modality, idx)));
            }
        }
        out
    });
    Ok(per_person.into_iter().flatten().collect())
}

/// Writes the synthetic corpus under `out_dir` using the layout
/// `person_<id>/<modality>_<cam>_<idx>.(ppm|pgm)` and returns its manifest.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let items = render_synthetic(cfg)?;
    for p in 0..cfg.num_persons {
        let dir = out_dir.join(format!("person_{p}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    par::map_slice(&items, |(rec, img)| imaging::write_pnm(img, &out_dir.join(&rec.image_path)))
        .into_iter()
        .collect::<Result<()>>()?;
    DatasetManifest::from_records(out_dir, items.into_iter().map(|(r, _)| r).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(path: &str, pid: u32, m: Modality) -> SampleRecord {
        SampleRecord {
            person_id: pid,
            label: 0,
            camera_id: 1,
            modality: m,
            image_path: PathBuf::from(path),
        }
    }

    fn parse(text: &str) -> Result<DatasetManifest> {
        parse_manifest(text, Path::new("m.csv"), PathBuf::from("."))
    }

    #[test]
    fn remaps_ids_contiguously() {
        let m = parse("a.ppm,17,1,visible\nb.pgm,17,3,infrared\nc.ppm,42,1,visible\nd.pgm,42,3,infrared\n")
            .unwrap();
        assert_eq!(m.num_persons(), 2);
        assert_eq!(m.person_ids(), &[17, 42]);
        let labels: Vec<_> = m.records().iter().map(|r| r.label).collect();
        assert_eq!(labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let e = parse("\n\n").unwrap_err();
        assert!(e.to_string().contains("empty manifest"), "{e}");
    }

    #[test]
    fn person_without_infrared_fails_validation() {
        let e = parse("a.ppm,3,1,visible\nb.ppm,3,2,visible\nc.ppm,4,1,visible\nd.pgm,4,3,infrared\n")
            .unwrap_err();
        assert!(e.to_string().contains("person 3 has no infrared"), "{e}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = parse("a.ppm,1,1,visible\nb.pgm,x,3,infrared\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse("a.ppm,1,1,visible\na.ppm,1,3,infrared\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(e.to_string().contains("duplicate"));
        let e = parse("a.ppm,1,1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse("a.ppm,1,1,uv\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn missing_file_reports_path() {
        let e = load_manifest(Path::new("/nonexistent/m.csv")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/m.csv"));
    }

    fn ten_persons() -> DatasetManifest {
        let mut recs = Vec::new();
        for p in 0..10 {
            recs.push(rec(&format!("{p}v"), p * 3, Modality::Visible));
            recs.push(rec(&format!("{p}i"), p * 3, Modality::Infrared));
        }
        DatasetManifest::from_records(".", recs).unwrap()
    }

    #[test]
    fn split_halves_disjoint_and_reproducible() {
        let m = ten_persons();
        let (a, b) = split(&m, 0.5, 11).unwrap();
        assert_eq!(a.num_persons(), 5);
        assert_eq!(b.num_persons(), 5);
        let sa: HashSet<_> = a.person_ids().iter().collect();
        assert!(b.person_ids().iter().all(|p| !sa.contains(p)));
        let (a2, b2) = split(&m, 0.5, 11).unwrap();
        assert_eq!((a, b), (a2, b2));
        assert!(split(&m, 1.0, 1).is_err());
        assert!(split(&m, 0.0, 1).is_err());
        assert!(split(&m, 0.01, 1).is_err());
    }

    #[test]
    fn synthetic_counts_and_layout() {
        let cfg = SynthConfig {
            num_persons: 10,
            images_per_person_per_modality: 10,
            ..SynthConfig::default()
        };
        let items = render_synthetic(&cfg).unwrap();
        assert_eq!(items.len(), 200);
        let vis = items.iter().filter(|(r, _)| r.modality == Modality::Visible).count();
        assert_eq!(vis, 100);
        assert_eq!(
            items[1].0.image_path,
            PathBuf::from("person_0/visible_2_1.ppm")
        );
        assert_eq!(items[10].0.camera_id, INFRARED_CAMERA);
        assert!(items.iter().all(|(r, i)| i.channels() == r.modality.channels()));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SynthConfig {
            num_persons: 3,
            images_per_person_per_modality: 2,
            ..SynthConfig::default()
        };
        assert_eq!(render_synthetic(&cfg).unwrap(), render_synthetic(&cfg).unwrap());
    }

    #[test]
    fn base_patterns_differ_between_ids() {
        let pats: Vec<_> = (0..60).map(|p| base_pattern(7, p, (64, 32))).collect();
        for i in 0..pats.len() {
            for j in i + 1..pats.len() {
                assert_ne!(pats[i], pats[j], "persons {i} and {j} render identically");
            }
        }
    }

    #[test]
    fn synth_config_validation() {
        let bad = SynthConfig {
            num_persons: 0,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
