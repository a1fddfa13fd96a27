//! Transformer building blocks over the tape.
//!
//! Token rows of a batch are packed as `[X_all; Y_all]`: first the image
//! tokens of every sample (CLS first within each sample), then the label
//! tokens of every sample. Attention masks are key-set restrictions built
//! from that packing.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, AttentionProbs, KeySet, Tape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// How image and label tokens may attend to each other.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// Every query sees every image and label key.
    FullSelf,
    /// Image queries see image keys; label queries see image and label keys.
    #[default]
    OneWay,
    /// Image queries see image keys; label queries see image keys only.
    OneWayNoLabelSelf,
    /// No label tokens at all; plain ViT with a CLS head.
    Baseline,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::FullSelf,
        AttentionMode::OneWay,
        AttentionMode::OneWayNoLabelSelf,
        AttentionMode::Baseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::FullSelf => "full_self",
            AttentionMode::OneWay => "one_way",
            AttentionMode::OneWayNoLabelSelf => "one_way_no_label_self",
            AttentionMode::Baseline => "baseline",
        }
    }

    pub fn has_label_tokens(self) -> bool {
        self != AttentionMode::Baseline
    }

    /// Whether image queries are kept away from label keys.
    pub fn is_one_way(self) -> bool {
        matches!(self, AttentionMode::OneWay | AttentionMode::OneWayNoLabelSelf)
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "full_self" | "fullself" | "full" => Ok(AttentionMode::FullSelf),
            "one_way" | "oneway" => Ok(AttentionMode::OneWay),
            "one_way_no_label_self" | "onewaynolabelself" | "no_label_self" => {
                Ok(AttentionMode::OneWayNoLabelSelf)
            }
            "baseline" => Ok(AttentionMode::Baseline),
            other => Err(Error::Config(format!(
                "unknown attention mode `{other}` (expected full_self, one_way, one_way_no_label_self or baseline)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// One packed QKV projection shared by image and label tokens, plus the output projection.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

pub fn linear(tape: &Tape, x: &Tensor, layer: &Linear) -> Result<Tensor> {
    let y = tape.matmul(x, &layer.weight)?;
    tape.add_row_bias(&y, &layer.bias)
}

pub fn layer_norm(tape: &Tape, x: &Tensor, ln: &LayerNormParams) -> Result<Tensor> {
    tape.layer_norm(x, &ln.gamma, &ln.beta, LAYER_NORM_EPS)
}

/// linear → gelu → linear, row-wise.
pub fn ffn(tape: &Tape, x: &Tensor, mlp: &FeedForward) -> Result<Tensor> {
    let h = tape.gelu(&linear(tape, x, &mlp.fc1)?)?;
    linear(tape, &h, &mlp.fc2)
}

/// Token counts of a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub batch: usize,
    /// Image tokens per sample, CLS included.
    pub image: usize,
    /// Label tokens per sample (0 when there are none).
    pub labels: usize,
}

impl TokenLayout {
    pub fn image_rows(&self, sample: usize) -> std::ops::Range<usize> {
        sample * self.image..(sample + 1) * self.image
    }

    pub fn label_rows(&self, sample: usize) -> std::ops::Range<usize> {
        let base = self.batch * self.image;
        base + sample * self.labels..base + (sample + 1) * self.labels
    }

    pub fn total_rows(&self) -> usize {
        self.batch * (self.image + self.labels)
    }

    /// Key sets for every packed row under `mode`.
    pub fn key_sets(&self, mode: AttentionMode) -> Vec<KeySet> {
        let mut sets = Vec::with_capacity(self.total_rows());
        for s in 0..self.batch {
            let keys = if mode == AttentionMode::FullSelf {
                vec![self.image_rows(s), self.label_rows(s)]
            } else {
                vec![self.image_rows(s)]
            };
            sets.extend(std::iter::repeat_n(KeySet(keys), self.image));
        }
        for s in 0..self.batch {
            let keys = match mode {
                AttentionMode::OneWayNoLabelSelf => vec![self.image_rows(s)],
                _ => vec![self.image_rows(s), self.label_rows(s)],
            };
            sets.extend(std::iter::repeat_n(KeySet(keys), self.labels));
        }
        sets
    }
}

#[derive(Debug)]
pub struct AttentionOutput {
    pub image: Tensor,
    pub labels: Option<Tensor>,
    pub probs: Arc<AttentionProbs>,
    pub layout: Arc<AttentionLayout>,
}

/// Multi-head attention over image rows `x` and optional label rows `y`
/// sharing one QKV projection. `y` must be absent exactly in
/// [`AttentionMode::Baseline`]. Rows are packed per [`TokenLayout`] with
/// `batch` samples.
pub fn combined_attention(
    tape: &Tape,
    x: &Tensor,
    y: Option<&Tensor>,
    params: &AttentionParams,
    mode: AttentionMode,
    batch: usize,
) -> Result<AttentionOutput> {
    let (x_rows, dim) = x.dims2()?;
    if params.heads == 0 || dim % params.heads != 0 {
        return Err(Error::Config(format!(
            "hidden width {dim} is not divisible by {} heads",
            params.heads
        )));
    }
    if batch == 0 || x_rows % batch != 0 {
        return Err(Error::Contract(format!(
            "{x_rows} image rows do not split into {batch} samples"
        )));
    }
    let (packed, labels) = match (mode, y) {
        (AttentionMode::Baseline, None) => (x.clone(), 0),
        (AttentionMode::Baseline, Some(_)) => {
            return Err(Error::Contract(
                "label tokens were passed in baseline mode".into(),
            ))
        }
        (_, None) => {
            return Err(Error::Contract(format!(
                "{mode} attention requires label tokens"
            )))
        }
        (_, Some(y)) => {
            let (y_rows, y_dim) = y.dims2()?;
            if y_dim != dim || y_rows % batch != 0 {
                return Err(Error::shape("combined_attention", x.shape(), y.shape()));
            }
            (tape.concat_rows(&[x, y])?, y_rows / batch)
        }
    };
    let tokens = TokenLayout {
        batch,
        image: x_rows / batch,
        labels,
    };
    let label_rows: Vec<_> = (0..batch).map(|s| tokens.label_rows(s)).collect();
    let layout = Arc::new(AttentionLayout::new(params.heads, tokens.key_sets(mode))?.with_exchangeable(&label_rows)?);
    let qkv = linear(tape, &packed, &params.qkv)?;
    let (heads_out, probs) = tape.attention(&qkv, &layout)?;
    let out = linear(tape, &heads_out, &params.proj)?;
    let (image, labels) = if labels == 0 {
        (out, None)
    } else {
        let total = tokens.total_rows();
        (
            tape.slice_rows(&out, 0..x_rows)?,
            Some(tape.slice_rows(&out, x_rows..total)?),
        )
    };
    Ok(AttentionOutput {
        image,
        labels,
        probs,
        layout,
    })
}

/// Inverted dropout with its own deterministic stream.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {rate}")));
        }
        Ok(Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn apply(&mut self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        if self.rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - self.rate);
        let mask = (0..x.numel())
            .map(|_| if self.rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(&Tensor::new(x.shape(), mask)?);
        tape.mul(x, &mask)
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp: FeedForward,
}

#[derive(Debug)]
pub struct BlockOutput {
    pub image: Tensor,
    pub labels: Option<Tensor>,
    pub probs: Arc<AttentionProbs>,
}

/// Pre-norm encoder block. With label rows this is an LT block: both groups
/// go through [`combined_attention`] and then one shared FFN.
pub fn encoder_block(
    tape: &Tape,
    x: &Tensor,
    y: Option<&Tensor>,
    block: &BlockParams,
    mode: AttentionMode,
    batch: usize,
    mut dropout: Option<&mut Dropout>,
) -> Result<BlockOutput> {
    let nx = layer_norm(tape, x, &block.norm1)?;
    let ny = y.map(|y| layer_norm(tape, y, &block.norm1)).transpose()?;
    let attn = combined_attention(tape, &nx, ny.as_ref(), &block.attn, mode, batch)?;

    let mut drop = |t: &Tensor| -> Result<Tensor> {
        match dropout.as_deref_mut() {
            Some(d) => d.apply(tape, t),
            None => Ok(t.clone()),
        }
    };

    let x1 = tape.add(x, &drop(&attn.image)?)?;
    let y1 = match (y, attn.labels.as_ref()) {
        (Some(y), Some(a)) => Some(tape.add(y, &drop(a)?)?),
        _ => None,
    };
    let stacked = match &y1 {
        Some(y1) => tape.concat_rows(&[&x1, y1])?,
        None => x1.clone(),
    };
    let f = ffn(tape, &layer_norm(tape, &stacked, &block.norm2)?, &block.mlp)?;
    let out = tape.add(&stacked, &drop(&f)?)?;
    let x_rows = x.dims2()?.0;
    let (image, labels) = match &y1 {
        Some(_) => {
            let total = out.dims2()?.0;
            (
                tape.slice_rows(&out, 0..x_rows)?,
                Some(tape.slice_rows(&out, x_rows..total)?),
            )
        }
        None => (out, None),
    };
    Ok(BlockOutput {
        image,
        labels,
        probs: attn.probs,
    })
}
