//! Attention heatmaps for label and CLS queries over the image patches.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::quadrant_bounds;
use crate::error::{Error, Result};
use crate::model::{forward, AttentionRecord, ForwardOptions, ModelConfig, Parameters, QueryToken};
use crate::tensor::{Tape, Tensor};

/// How attention rows from several blocks are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduce {
    LastBlock,
    #[default]
    MeanBlocks,
}

impl Reduce {
    pub fn as_str(self) -> &'static str {
        match self {
            Reduce::LastBlock => "last",
            Reduce::MeanBlocks => "mean",
        }
    }
}

impl fmt::Display for Reduce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Reduce::LastBlock),
            "mean" => Ok(Reduce::MeanBlocks),
            other => Err(Error::Config(format!("unknown reduction `{other}` (expected last or mean)"))),
        }
    }
}

/// Patch-key slice of one attention row, renormalized to sum 1.
fn patch_weights(r: &AttentionRecord) -> Vec<f64> {
    let patches = &r.row[1..r.image_keys];
    let total: f64 = patches.iter().sum();
    if total > 0.0 {
        patches.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / patches.len() as f64; patches.len()]
    }
}

fn reduce_records(
    records: &[AttentionRecord],
    sample: usize,
    query: QueryToken,
    config: &ModelConfig,
    reduce: Reduce,
) -> Result<Tensor> {
    let n = config.num_patches();
    let chosen: Vec<&AttentionRecord> = records
        .iter()
        .filter(|r| r.sample == sample && r.query == query)
        .collect();
    if chosen.is_empty() {
        return Err(Error::Contract(format!(
            "no attention captured for sample {sample}, query {query:?}; run forward with capture enabled"
        )));
    }
    // CLS rows exist in every block; use the label-token blocks when there are any.
    let use_lt = chosen.iter().any(|r| r.lt_block);
    let mut blocks: Vec<usize> = chosen
        .iter()
        .filter(|r| r.lt_block || !use_lt)
        .map(|r| r.block)
        .collect();
    blocks.sort_unstable();
    blocks.dedup();
    if reduce == Reduce::LastBlock {
        blocks = vec![*blocks.last().expect("at least one block")];
    }
    let mut grid = vec![0.0; n];
    for &b in &blocks {
        let heads: Vec<&&AttentionRecord> = chosen.iter().filter(|r| r.block == b).collect();
        let mut block_grid = vec![0.0; n];
        for r in &heads {
            if r.image_keys != n + 1 {
                return Err(Error::Contract(format!(
                    "attention row has {} image keys, the model has {}",
                    r.image_keys,
                    n + 1
                )));
            }
            for (g, w) in block_grid.iter_mut().zip(patch_weights(r)) {
                *g += w;
            }
        }
        for (g, v) in grid.iter_mut().zip(block_grid) {
            *g += v / heads.len() as f64;
        }
    }
    let (gh, gw) = config.grid();
    Tensor::new(&[gh, gw], grid.into_iter().map(|v| v / blocks.len() as f64).collect())
}

/// Label `label`'s attention over the patch grid `[H/p × W/p]`: image-patch
/// keys only, renormalized, averaged over heads, reduced over LT blocks.
pub fn extract_label_attention(
    records: &[AttentionRecord],
    sample: usize,
    label: usize,
    config: &ModelConfig,
    reduce: Reduce,
) -> Result<Tensor> {
    if !config.mode.has_label_tokens() {
        return Err(Error::Contract(format!("mode {} has no label tokens", config.mode)));
    }
    if label >= config.labels {
        return Err(Error::Contract(format!(
            "label {label} out of range 0..{}",
            config.labels
        )));
    }
    reduce_records(records, sample, QueryToken::Label(label), config, reduce)
}

/// CLS attention over the patch grid, same contract as the label version.
/// Uses the LT blocks when the model has them, every block otherwise.
pub fn extract_cls_attention(
    records: &[AttentionRecord],
    sample: usize,
    config: &ModelConfig,
    reduce: Reduce,
) -> Result<Tensor> {
    reduce_records(records, sample, QueryToken::Cls, config, reduce)
}

/// Row-major `height × width` map.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape("heatmap", &[height, width], &[values.len()]));
        }
        Ok(Heatmap { height, width, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Min-max scaled to `[0, 1]`; a constant map becomes all zeros.
    pub fn normalized(&self) -> Heatmap {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let values = if span > 0.0 {
            self.values.iter().map(|v| (v - min) / span).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        Heatmap { values, ..*self }
    }

    pub fn argmax(&self) -> (usize, usize) {
        let idx = self
            .values
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > self.values[best] { i } else { best });
        (idx / self.width, idx % self.width)
    }
}

/// Bilinear resize with half-pixel centers and clamped edges.
pub fn upsample_bilinear(grid: &Tensor, height: usize, width: usize) -> Result<Heatmap> {
    let (gh, gw) = grid.dims2()?;
    if height == 0 || width == 0 {
        return Err(Error::Contract("upsample target must be non-empty".into()));
    }
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let rows = axis(height, gh);
    let cols = axis(width, gw);
    let g = grid.data();
    let mut values = Vec::with_capacity(height * width);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = g[r0 * gw + c0] * (1.0 - fx) + g[r0 * gw + c1] * fx;
            let bottom = g[r1 * gw + c0] * (1.0 - fx) + g[r1 * gw + c1] * fx;
            values.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Heatmap::new(height, width, values)
}

/// Index into `0..n` under half-sample symmetric extension (…, 1, 0 | 0, 1, …, n−1 | n−1, …).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn blur_axis(src: &[f64], len: usize, stride: usize, lines: usize, line_stride: usize, radius: usize) -> Vec<f64> {
    let mut out = src.to_vec();
    let norm = 1.0 / (2 * radius + 1) as f64;
    for l in 0..lines {
        for i in 0..len {
            let mut acc = 0.0;
            for k in -(radius as isize)..=radius as isize {
                acc += src[l * line_stride + reflect(i as isize + k, len) * stride];
            }
            out[l * line_stride + i * stride] = acc * norm;
        }
    }
    out
}

/// Separable box blur of side `2·radius + 1` with symmetric reflection at the
/// borders. The blur matrix is symmetric, so total mass is unchanged.
pub fn box_blur(map: &Heatmap, radius: usize) -> Heatmap {
    if radius == 0 {
        return map.clone();
    }
    let (h, w) = (map.height, map.width);
    let rows = blur_axis(&map.values, w, 1, h, w, radius);
    let values = blur_axis(&rows, h, w, w, 1, radius);
    Heatmap { values, ..*map }
}

/// Bilinear upsample to `height × width`, then box blur. The result is not
/// normalized; see [`Heatmap::normalized`].
pub fn smooth_and_upsample(grid: &Tensor, height: usize, width: usize, blur_radius: usize) -> Result<Heatmap> {
    Ok(box_blur(&upsample_bilinear(grid, height, width)?, blur_radius))
}

/// Fraction of the map's total mass inside quadrant `q` (0 top-left,
/// 1 top-right, 2 bottom-left, 3 bottom-right). A zero map counts as uniform.
pub fn quadrant_mass(map: &Heatmap, q: usize) -> Result<f64> {
    if q > 3 {
        return Err(Error::Contract(format!("quadrant {q} out of range 0..4")));
    }
    let total = map.total();
    if total == 0.0 {
        return Ok(0.25);
    }
    let (rows, cols) = quadrant_bounds(map.height, map.width, q);
    let mut inside = 0.0;
    for i in rows {
        for j in cols.clone() {
            inside += map.get(i, j);
        }
    }
    Ok(inside / total)
}

/// Binary PGM (P5) bytes, maxval 255, one byte per value `round(255·v)`.
pub fn encode_pgm(map: &Heatmap) -> Result<Vec<u8>> {
    if let Some(v) = map.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("heatmap value {v} outside [0, 1]")));
    }
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.values.iter().map(|v| (255.0 * v).round() as u8));
    Ok(out)
}

pub fn write_pgm(map: &Heatmap, path: &Path) -> Result<()> {
    let bytes = encode_pgm(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pre-normalization maps for one image: the chosen label's (absent in
/// baseline mode or when no label is asked for) and the CLS token's.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub label: Option<Heatmap>,
    pub cls: Heatmap,
}

/// Runs the model on `images` with attention capture and returns the
/// upsampled, blurred maps for each image.
pub fn attention_maps(
    params: &Parameters,
    config: &ModelConfig,
    images: &[&Tensor],
    label: Option<usize>,
    reduce: Reduce,
    blur_radius: usize,
) -> Result<Vec<AttentionMaps>> {
    let tape = Tape::new();
    let opts = ForwardOptions {
        capture_attention: true,
        dropout: None,
    };
    let out = forward(&tape, params, config, images, opts)?;
    let (h, w) = (config.height, config.width);
    (0..images.len())
        .map(|s| {
            let label = label
                .map(|k| {
                    let grid = extract_label_attention(&out.attention, s, k, config, reduce)?;
                    smooth_and_upsample(&grid, h, w, blur_radius)
                })
                .transpose()?;
            let grid = extract_cls_attention(&out.attention, s, config, reduce)?;
            let cls = smooth_and_upsample(&grid, h, w, blur_radius)?;
            Ok(AttentionMaps { label, cls })
        })
        .collect()
}
