//! Pixel-level operations: grayscale conversion, spectrum extraction,
//! infrared brightness jitter, channel expansion and normalization, plus
//! binary PPM/PGM I/O.
//!
//! Images are stored row-major and interleaved (`(y * width + x) * channels + c`).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default input size of the network, `(height, width)`.
pub const INPUT_HEIGHT: usize = 64;
pub const INPUT_WIDTH: usize = 32;

/// BT.601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueDomain {
    /// Integer levels in `[0, 255]`.
    U8,
    /// Floats in `[0, 1]`.
    UnitFloat,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PixelData {
    U8(Vec<u8>),
    Unit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: PixelData,
}

impl ImageTensor {
    pub fn from_u8(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width, channels, data.len())?;
        Ok(ImageTensor {
            height,
            width,
            channels,
            data: PixelData::U8(data),
        })
    }

    pub fn from_unit(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("unit-float pixel {v} outside [0, 1]")));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data: PixelData::Unit(data),
        })
    }

    /// Constant-valued u8 image.
    pub fn filled(height: usize, width: usize, pixel: &[u8]) -> Result<Self> {
        let data = pixel
            .iter()
            .copied()
            .cycle()
            .take(height * width * pixel.len())
            .collect();
        Self::from_u8(height, width, pixel.len(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn domain(&self) -> ValueDomain {
        match self.data {
            PixelData::U8(_) => ValueDomain::U8,
            PixelData::Unit(_) => ValueDomain::UnitFloat,
        }
    }

    pub fn data(&self) -> &PixelData {
        &self.data
    }

    /// Raw bytes of a u8 image.
    pub fn bytes(&self) -> Result<&[u8]> {
        match &self.data {
            PixelData::U8(v) => Ok(v),
            PixelData::Unit(_) => Err(Error::invalid("expected a u8 image, got unit-float")),
        }
    }

    /// Values of a unit-float image.
    pub fn floats(&self) -> Result<&[f64]> {
        match &self.data {
            PixelData::Unit(v) => Ok(v),
            PixelData::U8(_) => Err(Error::invalid("expected a unit-float image, got u8")),
        }
    }

    /// Pixel `(y, x)` channel `c` as f64, in the image's own domain.
    pub fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        let i = (y * self.width + x) * self.channels + c;
        match &self.data {
            PixelData::U8(v) => f64::from(v[i]),
            PixelData::Unit(v) => v[i],
        }
    }

    /// Converts interleaved HWC storage to planar CHW `f64`, as the network consumes it.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for p in 0..plane {
            for c in 0..self.channels {
                out[c * plane + p] = match &self.data {
                    PixelData::U8(v) => f64::from(v[p * self.channels + c]),
                    PixelData::Unit(v) => v[p * self.channels + c],
                };
            }
        }
        out
    }

    fn require_u8_channels(&self, channels: usize, op: &str) -> Result<&[u8]> {
        if self.channels != channels {
            return Err(Error::invalid(format!(
                "{op} expects a {channels}-channel image, got {} channels",
                self.channels
            )));
        }
        self.bytes()
    }
}

fn check_dims(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::invalid(format!("unsupported channel count {channels}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("empty image {height}x{width}")));
    }
    if len != height * width * channels {
        return Err(Error::Shape(format!(
            "{height}x{width}x{channels} image needs {} values, got {len}",
            height * width * channels
        )));
    }
    Ok(())
}

/// Round half up, then clamp to the u8 range.
pub fn round_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// One color channel of an RGB image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub fn index(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Channel> {
        match i {
            0 => Ok(Channel::R),
            1 => Ok(Channel::G),
            2 => Ok(Channel::B),
            _ => Err(Error::invalid(format!("channel selector {i} not in 0..3"))),
        }
    }
}

/// The four spectra a visible image can be mapped into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Spectrum {
    R,
    G,
    B,
    /// Grayscale.
    X,
}

impl Spectrum {
    /// Fixed order used for distributions, statistics and logs.
    pub const ALL: [Spectrum; 4] = [Spectrum::R, Spectrum::G, Spectrum::B, Spectrum::X];

    pub fn index(self) -> usize {
        match self {
            Spectrum::R => 0,
            Spectrum::G => 1,
            Spectrum::B => 2,
            Spectrum::X => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Spectrum::R => "R",
            Spectrum::G => "G",
            Spectrum::B => "B",
            Spectrum::X => "X",
        }
    }
}

impl std::str::FromStr for Spectrum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "R" => Ok(Spectrum::R),
            "G" => Ok(Spectrum::G),
            "B" => Ok(Spectrum::B),
            "X" | "GRAY" => Ok(Spectrum::X),
            other => Err(Error::invalid(format!("unknown spectrum {other:?}"))),
        }
    }
}

/// Provenance of an image in a training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpectrumTag {
    R,
    G,
    B,
    X,
    IrJitter,
    OriginalRgb,
    OriginalIr,
}

impl SpectrumTag {
    pub fn is_generated(self) -> bool {
        !matches!(self, SpectrumTag::OriginalRgb | SpectrumTag::OriginalIr)
    }

    /// The visible-derived spectrum, if this is one.
    pub fn spectrum(self) -> Option<Spectrum> {
        match self {
            SpectrumTag::R => Some(Spectrum::R),
            SpectrumTag::G => Some(Spectrum::G),
            SpectrumTag::B => Some(Spectrum::B),
            SpectrumTag::X => Some(Spectrum::X),
            _ => None,
        }
    }
}

impl From<Spectrum> for SpectrumTag {
    fn from(s: Spectrum) -> Self {
        match s {
            Spectrum::R => SpectrumTag::R,
            Spectrum::G => SpectrumTag::G,
            Spectrum::B => SpectrumTag::B,
            Spectrum::X => SpectrumTag::X,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    /// Half-width of the multiplicative brightness range `[1 - delta, 1 + delta]`.
    pub delta: f64,
    pub rng_seed: u64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            delta: 0.1,
            rng_seed: 0,
        }
    }
}

impl JitterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::invalid(format!(
                "jitter delta {} outside [0, 1)",
                self.delta
            )));
        }
        Ok(())
    }
}

/// BT.601 grayscale of an RGB u8 image.
pub fn to_gray(img: &ImageTensor) -> Result<ImageTensor> {
    let src = img.require_u8_channels(3, "to_gray")?;
    let data = src
        .chunks_exact(3)
        .map(|p| {
            round_u8(
                LUMA[0] * f64::from(p[0]) + LUMA[1] * f64::from(p[1]) + LUMA[2] * f64::from(p[2]),
            )
        })
        .collect();
    ImageTensor::from_u8(img.height, img.width, 1, data)
}

pub fn extract_channel(img: &ImageTensor, which: Channel) -> Result<ImageTensor> {
    let src = img.require_u8_channels(3, "extract_channel")?;
    let c = which.index();
    let data = src.chunks_exact(3).map(|p| p[c]).collect();
    ImageTensor::from_u8(img.height, img.width, 1, data)
}

/// Maps a visible image into one of the four single-channel spectra.
pub fn generate_spectrum_image(
    img: &ImageTensor,
    spectrum: Spectrum,
) -> Result<(ImageTensor, SpectrumTag)> {
    let out = match spectrum {
        Spectrum::R => extract_channel(img, Channel::R)?,
        Spectrum::G => extract_channel(img, Channel::G)?,
        Spectrum::B => extract_channel(img, Channel::B)?,
        Spectrum::X => to_gray(img)?,
    };
    Ok((out, spectrum.into()))
}

/// Draws one brightness factor from `[1 - delta, 1 + delta]` and applies it.
pub fn jitter_infrared<R: Rng + ?Sized>(
    img: &ImageTensor,
    cfg: &JitterConfig,
    rng: &mut R,
) -> Result<ImageTensor> {
    cfg.validate()?;
    img.require_u8_channels(1, "jitter_infrared")?;
    if cfg.delta == 0.0 {
        return Ok(img.clone());
    }
    let factor = rng.random_range(1.0 - cfg.delta..=1.0 + cfg.delta);
    jitter_with_factor(img, factor)
}

/// Multiplies every pixel by `factor`, rounding half up and clamping to `[0, 255]`.
pub fn jitter_with_factor(img: &ImageTensor, factor: f64) -> Result<ImageTensor> {
    let src = img.require_u8_channels(1, "jitter_infrared")?;
    if !factor.is_finite() || factor < 0.0 {
        return Err(Error::invalid(format!("jitter factor {factor}")));
    }
    let data = src.iter().map(|&v| round_u8(f64::from(v) * factor)).collect();
    ImageTensor::from_u8(img.height, img.width, 1, data)
}

/// Duplicates a single channel into three identical channels.
pub fn expand_channels(img: &ImageTensor) -> Result<ImageTensor> {
    let src = img.require_u8_channels(1, "expand_channels")?;
    let data = src.iter().flat_map(|&v| [v, v, v]).collect();
    ImageTensor::from_u8(img.height, img.width, 3, data)
}

pub fn normalize(img: &ImageTensor) -> Result<ImageTensor> {
    let data = img.bytes()?.iter().map(|&v| f64::from(v) / 255.0).collect();
    ImageTensor::from_unit(img.height, img.width, img.channels, data)
}

/// Mirrors the image left-to-right.
pub fn flip_horizontal(img: &ImageTensor) -> ImageTensor {
    let (h, w, c) = (img.height, img.width, img.channels);
    let remap = |i: usize| {
        let (p, ch) = (i / c, i % c);
        let (y, x) = (p / w, p % w);
        (y * w + (w - 1 - x)) * c + ch
    };
    let data = match &img.data {
        PixelData::U8(v) => PixelData::U8((0..v.len()).map(|i| v[remap(i)]).collect()),
        PixelData::Unit(v) => PixelData::Unit((0..v.len()).map(|i| v[remap(i)]).collect()),
    };
    ImageTensor {
        height: h,
        width: w,
        channels: c,
        data,
    }
}

/// Nearest-neighbour resize of a u8 image.
pub fn resize_nearest(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    let src = img.bytes()?;
    let c = img.channels;
    let mut data = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let sy = (y * img.height) / height;
        for x in 0..width {
            let sx = (x * img.width) / width;
            let i = (sy * img.width + sx) * c;
            data.extend_from_slice(&src[i..i + c]);
        }
    }
    ImageTensor::from_u8(height, width, c, data)
}

/// Places single-channel images side by side, left to right.
pub fn contact_sheet(images: &[ImageTensor]) -> Result<ImageTensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("contact sheet needs at least one image"))?;
    let (h, c) = (first.height, first.channels);
    if images.iter().any(|i| i.height != h || i.channels != c) {
        return Err(Error::Shape(
            "contact sheet images must share height and channel count".into(),
        ));
    }
    let total_w: usize = images.iter().map(|i| i.width).sum();
    let mut data = Vec::with_capacity(h * total_w * c);
    for y in 0..h {
        for img in images {
            let row = img.width * c;
            data.extend_from_slice(&img.bytes()?[y * row..(y + 1) * row]);
        }
    }
    ImageTensor::from_u8(h, total_w, c, data)
}

/// Encodes as binary PGM (1 channel) or PPM (3 channels), maxval 255.
pub fn encode_pnm(img: &ImageTensor) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::invalid(format!("cannot encode {c} channels"))),
    };
    let bytes = img.bytes()?;
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(bytes);
    Ok(out)
}

pub fn write_pnm(img: &ImageTensor, path: &Path) -> Result<()> {
    let bytes = encode_pnm(img)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::InvalidInput(m) => Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: m,
        },
        other => other,
    })
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageTensor> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::invalid("truncated PNM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::invalid(format!("unsupported PNM magic {m:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("bad PNM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::invalid(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height * channels;
    if bytes.len() < start + len {
        return Err(Error::invalid(format!(
            "raster truncated: need {len} bytes, have {}",
            bytes.len().saturating_sub(start)
        )));
    }
    ImageTensor::from_u8(height, width, channels, bytes[start..start + len].to_vec())
}
