//! Synthetic multi-label images with known label regions, and the LTDS
//! binary dataset format.
//!
//! LTDS layout, little-endian throughout:
//!
//! ```text
//! "LTDS" | version u16 | count u32 | H u16 | W u16 | C u8 | c u8
//! per sample: H·W·C pixels f32 (row-major, channel last)
//!             c target bytes (0/1)
//!             c region bytes (quadrant id, 255 = absent)
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"LTDS";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2 + 1 + 1;
const NO_REGION: u8 = 255;

/// Largest label count the generator supports: one image quadrant per label.
pub const MAX_SYNTHETIC_LABELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H × W × C]`, values in `[0, 1]`.
    pub image: Tensor,
    /// One 0/1 entry per label.
    pub targets: Vec<u8>,
    /// Quadrant holding each positive label's pattern, if known.
    pub gt_region: Vec<Option<u8>>,
}

impl Sample {
    pub fn target_row(&self) -> Vec<f64> {
        self.targets.iter().map(|&t| f64::from(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub labels: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Positives per label.
    pub fn positives(&self) -> Vec<usize> {
        (0..self.labels)
            .map(|k| self.samples.iter().filter(|s| s.targets[k] == 1).count())
            .collect()
    }

    /// Splits off the trailing `fraction` of samples (at least one when the
    /// fraction is positive and there are two or more samples).
    pub fn split_tail(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("split fraction must lie in [0, 1), got {fraction}")));
        }
        let mut tail = (self.len() as f64 * fraction).round() as usize;
        if fraction > 0.0 && self.len() >= 2 {
            tail = tail.clamp(1, self.len() - 1);
        }
        let cut = self.len() - tail;
        let part = |samples: &[Sample]| Dataset {
            samples: samples.to_vec(),
            ..self.empty_like()
        };
        Ok((part(&self.samples[..cut]), part(&self.samples[cut..])))
    }

    fn empty_like(&self) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            labels: self.labels,
            samples: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub labels: usize,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            height: 32,
            width: 32,
            channels: 1,
            labels: 4,
            noise_std: 0.05,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labels == 0 || self.labels > MAX_SYNTHETIC_LABELS {
            return Err(Error::Config(format!(
                "labels must be ≤ {MAX_SYNTHETIC_LABELS} (and at least 1), got {}",
                self.labels
            )));
        }
        if self.height < 4 || self.width < 4 || self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!(
                "image size must be even and at least 4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels == 0 || self.channels > u8::MAX as usize {
            return Err(Error::Config(format!("channels must lie in 1..=255, got {}", self.channels)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std must be finite and ≥ 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// Rows and columns of quadrant `q`: 0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right.
pub fn quadrant_bounds(height: usize, width: usize, q: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let (hh, hw) = (height / 2, width / 2);
    let rows = if q < 2 { 0..hh } else { hh..height };
    let cols = if q % 2 == 0 { 0..hw } else { hw..width };
    (rows, cols)
}

/// Pattern side length for an image of the given size.
pub fn pattern_size(height: usize, width: usize) -> usize {
    ((height / 2).min(width / 2) / 2).max(2)
}

/// Whether cell `(i, j)` of an `s × s` box is lit for label `k`'s pattern.
fn pattern_cell(k: usize, s: usize, i: usize, j: usize) -> bool {
    match k {
        0 => true,
        1 => i == 0 || j == 0 || i == s - 1 || j == s - 1,
        2 => i == s / 2 || j == s / 2,
        _ => j == i || j == i + 1,
    }
}

/// Generates `count` samples. Label `k` is positive with probability 1/2; a
/// positive label draws its pattern (filled square, hollow square, plus,
/// diagonal stripe) at a random spot inside quadrant `k` with intensity in
/// `[0.7, 1]`. Gaussian noise is added and pixels clamped to `[0, 1]`, then
/// rounded to `f32` so the dataset survives the file format exactly.
pub fn gen_synthetic(count: usize, seed: u64, cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (h, w, ch) = (cfg.height, cfg.width, cfg.channels);
    let s = pattern_size(h, w);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pixels = vec![0.0f64; h * w * ch];
        let targets: Vec<u8> = (0..cfg.labels).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let mut gt_region = vec![None; cfg.labels];
        for (k, &t) in targets.iter().enumerate() {
            if t == 0 {
                continue;
            }
            gt_region[k] = Some(k as u8);
            let (rows, cols) = quadrant_bounds(h, w, k);
            let top = rows.start + rng.random_range(0..=rows.len() - s);
            let left = cols.start + rng.random_range(0..=cols.len() - s);
            let intensity = rng.random_range(0.7..=1.0);
            for i in 0..s {
                for j in 0..s {
                    if pattern_cell(k, s, i, j) {
                        let base = ((top + i) * w + left + j) * ch;
                        pixels[base..base + ch].fill(intensity);
                    }
                }
            }
        }
        if cfg.noise_std > 0.0 {
            for p in &mut pixels {
                *p += noise.sample(&mut rng);
            }
        }
        for p in &mut pixels {
            *p = f64::from(p.clamp(0.0, 1.0) as f32);
        }
        samples.push(Sample {
            image: Tensor::new(&[h, w, ch], pixels)?,
            targets,
            gt_region,
        });
    }
    Ok(Dataset {
        height: h,
        width: w,
        channels: ch,
        labels: cfg.labels,
        samples,
    })
}

fn check_fits(name: &str, value: usize, max: usize) -> Result<()> {
    if value > max {
        return Err(Error::Contract(format!("{name} {value} does not fit the dataset header (max {max})")));
    }
    Ok(())
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    check_fits("count", ds.len(), u32::MAX as usize)?;
    check_fits("height", ds.height, u16::MAX as usize)?;
    check_fits("width", ds.width, u16::MAX as usize)?;
    check_fits("channels", ds.channels, u8::MAX as usize)?;
    check_fits("labels", ds.labels, u8::MAX as usize)?;
    let pixels = ds.height * ds.width * ds.channels;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * (4 * pixels + 2 * ds.labels));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.height as u16).to_le_bytes());
    out.extend_from_slice(&(ds.width as u16).to_le_bytes());
    out.push(ds.channels as u8);
    out.push(ds.labels as u8);
    for (i, s) in ds.samples.iter().enumerate() {
        if s.image.shape() != [ds.height, ds.width, ds.channels]
            || s.targets.len() != ds.labels
            || s.gt_region.len() != ds.labels
        {
            return Err(Error::Contract(format!("sample {i} does not match the dataset dimensions")));
        }
        for &v in s.image.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &t in &s.targets {
            if t > 1 {
                return Err(Error::Contract(format!("sample {i} has non-binary target {t}")));
            }
            out.push(t);
        }
        for r in &s.gt_region {
            out.push(r.unwrap_or(NO_REGION));
        }
    }
    Ok(out)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, path)
}

/// Parses LTDS bytes; `path` only labels errors.
pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let truncated = |needed: usize| Error::Truncated {
        path: path.to_path_buf(),
        needed: needed as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != DATASET_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().expect("four bytes")) as usize;
    let height = u16_at(10) as usize;
    let width = u16_at(12) as usize;
    let channels = bytes[14] as usize;
    let labels = bytes[15] as usize;
    let pixels = height * width * channels;
    let per_sample = 4 * pixels + 2 * labels;
    let needed = HEADER_LEN + count * per_sample;
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    if bytes.len() > needed {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes after {count} samples", bytes.len() - needed),
        });
    }
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if count > 0 && pixels == 0 {
        return Err(format("zero-sized images".into()));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let base = HEADER_LEN + i * per_sample;
        let data = bytes[base..base + 4 * pixels]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("four bytes"))))
            .collect();
        let tail = &bytes[base + 4 * pixels..base + per_sample];
        let targets = tail[..labels].to_vec();
        if let Some(t) = targets.iter().find(|&&t| t > 1) {
            return Err(format(format!("sample {i} has non-binary target {t}")));
        }
        let gt_region = tail[labels..]
            .iter()
            .map(|&r| (r != NO_REGION).then_some(r))
            .collect();
        samples.push(Sample {
            image: Tensor::new(&[height, width, channels], data)?,
            targets,
            gt_region,
        });
    }
    Ok(Dataset {
        height,
        width,
        channels,
        labels,
        samples,
    })
}

/// Sample indices grouped into batches of `batch_size`, in an order drawn
/// only from `shuffle_seed`. The last batch may be short.
pub fn batch_indices(count: usize, batch_size: usize, shuffle_seed: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn batch_iter(ds: &Dataset, batch_size: usize, shuffle_seed: u64) -> impl Iterator<Item = Vec<&Sample>> + '_ {
    batch_indices(ds.len(), batch_size, shuffle_seed)
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &ds.samples[i]).collect())
}
