//! Synthetic infrared scenes and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.txt`, one `<image> <mask>` pair of
//! relative paths per line. Image files are `IRS1`, little-endian `u32` H and
//! W, then H·W little-endian `f32`; mask files are `IRM1`, H, W, then H·W
//! bytes of 0 or 1.

use std::fs;
use std::path::{Path, PathBuf};

use irdet_tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};

const IMAGE_MAGIC: &[u8; 4] = b"IRS1";
const MASK_MAGIC: &[u8; 4] = b"IRM1";
/// Largest frame accepted from disk.
pub const MAX_PIXELS: u64 = 1 << 26;
/// Largest mask component, as a fraction of the frame.
pub const MAX_TARGET_FRACTION: f64 = 0.0015;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing entry {path}")]
    MissingEntry { path: PathBuf },
    #[error("bad magic in {path}")]
    BadMagic { path: PathBuf },
    #[error("truncated payload in {path}")]
    Truncated { path: PathBuf },
    #[error("frame size {h}×{w} in {path} overflows the pixel limit")]
    SizeOverflow { path: PathBuf, h: u64, w: u64 },
    #[error("pair shape mismatch: {image} is {image_hw:?}, {mask} is {mask_hw:?}")]
    PairShapeMismatch {
        image: PathBuf,
        mask: PathBuf,
        image_hw: (usize, usize),
        mask_hw: (usize, usize),
    },
    #[error("mask {path} holds a value other than 0 or 1")]
    InvalidMask { path: PathBuf },
    #[error("manifest line {line}: expected `<image> <mask>`")]
    Manifest { line: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("samples do not share one frame size")]
    MixedSizes,
}

/// Image in `[0, 1]` and binary mask, both `1×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Common `(H, W)` of all samples.
    pub fn size(&self) -> std::result::Result<(usize, usize), DatasetError> {
        let first = self.samples.first().ok_or(DatasetError::Empty)?.size();
        if self.samples.iter().any(|s| s.size() != first) {
            return Err(DatasetError::MixedSizes);
        }
        Ok(first)
    }

    /// Stacks the chosen samples into `N×1×H×W` images and masks.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, w) = self.size()?;
        let mut images = Vec::with_capacity(indices.len() * h * w);
        let mut masks = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            let s = &self.samples[i];
            images.extend(s.image.data().iter().map(|&v| T::of(v as f64)));
            masks.extend(s.mask.data().iter().map(|&v| T::of(v as f64)));
        }
        let shape = [indices.len(), 1, h, w];
        Ok((Tensor::new(&shape, images)?, Tensor::new(&shape, masks)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub count: usize,
    pub size: usize,
    pub targets: (usize, usize),
    pub sigma: (f64, f64),
    pub contrast: (f64, f64),
    /// Half-span of the clutter around the mid grey; 0.25 fills [0.2, 0.7].
    pub clutter: f64,
    /// Noise standard deviation on the 0–255 scale.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            count: 8,
            size: 64,
            targets: (1, 3),
            sigma: (0.7, 2.5),
            contrast: (0.1, 0.6),
            clutter: 0.25,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// One generated scene with its noise-free rendering.
#[derive(Clone, Debug)]
pub struct Scene {
    pub sample: Sample,
    pub clean: Tensor<f32>,
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    contrast: f64,
}

impl Blob {
    fn at(&self, y: usize, x: usize) -> f64 {
        let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
        self.contrast * (-(dy * dy + dx * dx) / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Pixels above half of the blob's largest sampled value.
    fn mask(&self, size: usize) -> Vec<usize> {
        let reach = (3.0 * self.sigma).ceil() as isize + 1;
        let (y0, x0) = (self.cy.round() as isize, self.cx.round() as isize);
        let window: Vec<(usize, f64)> = (y0 - reach..=y0 + reach)
            .flat_map(|y| (x0 - reach..=x0 + reach).map(move |x| (y, x)))
            .filter(|&(y, x)| y >= 0 && x >= 0 && y < size as isize && x < size as isize)
            .map(|(y, x)| (y as usize * size + x as usize, self.at(y as usize, x as usize)))
            .collect();
        let peak = window.iter().fold(0.0f64, |m, &(_, v)| m.max(v));
        window
            .into_iter()
            .filter(|&(_, v)| v > 0.5 * peak || v == peak)
            .map(|(i, _)| i)
            .collect()
    }
}

fn check_params(p: &SynthParams) -> Result<()> {
    if p.size == 0 || !p.size.is_multiple_of(16) {
        return Err(invalid("synth", format!("size {} is not a positive multiple of 16", p.size)));
    }
    let ok = p.targets.0 >= 1
        && p.targets.0 <= p.targets.1
        && p.sigma.0 > 0.0
        && p.sigma.0 <= p.sigma.1
        && p.contrast.0 > 0.0
        && p.contrast.0 <= p.contrast.1
        && p.clutter >= 0.0
        && p.noise_sigma >= 0.0;
    if !ok {
        return Err(invalid("synth", format!("degenerate parameter ranges in {p:?}")));
    }
    Ok(())
}

/// Deterministic in `(p.seed, index)`.
pub fn synth_scene_full(p: &SynthParams, index: usize) -> Result<Scene> {
    check_params(p)?;
    let n = p.size;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(index as u64);

    // Low-frequency clutter: three cosine gratings rescaled around mid grey.
    let gratings: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.5..3.0) / n as f64;
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..1.0);
            (freq * angle.cos(), freq * angle.sin(), phase, amp)
        })
        .collect();
    let raw: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            gratings
                .iter()
                .map(|&(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * y + fx * x) + ph).cos())
                .sum()
        })
        .collect();
    let (lo, hi) = raw.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let mut clean: Vec<f64> = raw
        .iter()
        .map(|&v| {
            let unit = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            0.45 + p.clutter * (2.0 * unit - 1.0)
        })
        .collect();

    // Targets, kept apart so their masks never merge.
    let area_limit = ((MAX_TARGET_FRACTION * (n * n) as f64).floor() as usize).max(1);
    let count = rng.random_range(p.targets.0..=p.targets.1);
    let margin = 3.0;
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    let mut mask = vec![0.0f32; n * n];
    for _ in 0..count {
        let mut sigma = rng.random_range(p.sigma.0..=p.sigma.1);
        let contrast = rng.random_range(p.contrast.0..=p.contrast.1);
        let mut centre = None;
        for _ in 0..100 {
            let cy = rng.random_range(margin..n as f64 - 1.0 - margin);
            let cx = rng.random_range(margin..n as f64 - 1.0 - margin);
            let far = blobs.iter().all(|b| {
                let d = ((b.cy - cy).powi(2) + (b.cx - cx).powi(2)).sqrt();
                d > 3.0 * (b.sigma + sigma) + 2.0
            });
            if far {
                centre = Some((cy, cx));
                break;
            }
        }
        let Some((cy, cx)) = centre else { break };
        let mut blob = Blob { cy, cx, sigma, contrast };
        let mut pixels = blob.mask(n);
        while pixels.len() > area_limit {
            sigma *= 0.85;
            blob.sigma = sigma;
            pixels = blob.mask(n);
        }
        for &i in &pixels {
            mask[i] = 1.0;
        }
        blobs.push(blob);
    }
    for (i, v) in clean.iter_mut().enumerate() {
        *v += blobs.iter().map(|b| b.at(i / n, i % n)).sum::<f64>();
        *v = v.clamp(0.0, 1.0);
    }

    let image: Vec<f32> = if p.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, p.noise_sigma / 255.0).expect("finite sigma");
        clean
            .iter()
            .map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
            .collect()
    } else {
        clean.iter().map(|&v| v as f32).collect()
    };
    let clean: Vec<f32> = clean.iter().map(|&v| v as f32).collect();
    Ok(Scene {
        sample: Sample {
            image: Tensor::new(&[1, n, n], image)?,
            mask: Tensor::new(&[1, n, n], mask)?,
        },
        clean: Tensor::new(&[1, n, n], clean)?,
    })
}

pub fn synth_scene(p: &SynthParams, index: usize) -> Result<Sample> {
    Ok(synth_scene_full(p, index)?.sample)
}

pub fn synth_dataset(p: &SynthParams) -> Result<Dataset> {
    (0..p.count).map(|i| synth_scene(p, i)).collect::<Result<_>>().map(Dataset::new)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn header(magic: &[u8; 4], h: usize, w: usize) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out
}

pub fn encode_image(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = header(IMAGE_MAGIC, h, w);
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_mask(mask: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let mut out = header(MASK_MAGIC, h, w);
    out.extend(mask.data().iter().map(|&v| u8::from(v != 0.0)));
    out
}

/// Validates magic and size; returns `(h, w, payload)`.
fn parse_header<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    bytes_per_pixel: u64,
    path: &Path,
) -> std::result::Result<(usize, usize, &'a [u8]), DatasetError> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(DatasetError::BadMagic { path: path.into() });
    }
    if bytes.len() < 12 {
        return Err(DatasetError::Truncated { path: path.into() });
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    if h * w > MAX_PIXELS {
        return Err(DatasetError::SizeOverflow { path: path.into(), h, w });
    }
    let payload = &bytes[12..];
    if (payload.len() as u64) < h * w * bytes_per_pixel {
        return Err(DatasetError::Truncated { path: path.into() });
    }
    Ok((h as usize, w as usize, &payload[..(h * w * bytes_per_pixel) as usize]))
}

pub fn decode_image(bytes: &[u8], path: &Path) -> std::result::Result<Tensor<f32>, DatasetError> {
    let (h, w, payload) = parse_header(bytes, IMAGE_MAGIC, 4, path)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(&[1, h, w], data).expect("length checked"))
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> std::result::Result<Tensor<f32>, DatasetError> {
    let (h, w, payload) = parse_header(bytes, MASK_MAGIC, 1, path)?;
    if payload.iter().any(|&b| b > 1) {
        return Err(DatasetError::InvalidMask { path: path.into() });
    }
    let data = payload.iter().map(|&b| b as f32).collect();
    Ok(Tensor::new(&[1, h, w], data).expect("length checked"))
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> std::result::Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut manifest = String::new();
    for (i, s) in data.samples.iter().enumerate() {
        let (img, mask) = (format!("image_{i:05}.irs"), format!("mask_{i:05}.irm"));
        let p = dir.join(&img);
        fs::write(&p, encode_image(&s.image)).map_err(io(&p))?;
        let p = dir.join(&mask);
        fs::write(&p, encode_mask(&s.mask)).map_err(io(&p))?;
        manifest.push_str(&format!("{img} {mask}\n"));
    }
    let p = dir.join("manifest.txt");
    fs::write(&p, manifest).map_err(io(&p))
}

fn read_entry(path: &Path) -> std::result::Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::MissingEntry { path: path.into() },
        _ => io(path)(e),
    })
}

pub fn read_dataset(dir: &Path) -> std::result::Result<Dataset, DatasetError> {
    let manifest = read_entry(&dir.join("manifest.txt"))?;
    let manifest = String::from_utf8_lossy(&manifest);
    let mut samples = Vec::new();
    for (n, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(img), Some(mask), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(DatasetError::Manifest { line: n + 1 });
        };
        let (ip, mp) = (dir.join(img), dir.join(mask));
        let image = decode_image(&read_entry(&ip)?, &ip)?;
        let mask = decode_mask(&read_entry(&mp)?, &mp)?;
        if image.shape() != mask.shape() {
            return Err(DatasetError::PairShapeMismatch {
                image_hw: (image.shape()[1], image.shape()[2]),
                mask_hw: (mask.shape()[1], mask.shape()[2]),
                image: ip,
                mask: mp,
            });
        }
        samples.push(Sample { image, mask });
    }
    Ok(Dataset::new(samples))
}
