use super::patch::{image_dims, patchify};
use super::{LabelParams, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::nn::{encoder_block, layer_norm, linear, AttentionMode, Dropout};
use crate::tensor::{Tape, Tensor};

/// Which query an attention record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QueryToken {
    Cls,
    Label(usize),
}

/// One query's attention weights in one head of one block.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub sample: usize,
    pub block: usize,
    /// True for blocks that carry label tokens.
    pub lt_block: bool,
    pub head: usize,
    pub query: QueryToken,
    /// Number of leading entries of `row` that are image keys (CLS + patches).
    pub image_keys: usize,
    /// Weights over the query's key set: image keys first, then label keys if any.
    pub row: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct ForwardOptions<'a> {
    pub capture_attention: bool,
    pub dropout: Option<&'a mut Dropout>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[B × c]`, one row per input image.
    pub logits: Tensor,
    /// CLS-head logits `[B × c]`. These are the prediction only in baseline
    /// mode; elsewhere they are a probe of the image-token pathway.
    pub cls_logits: Tensor,
    /// Image-token states `X⁰ … X^L`, each `[B(n+1) × D]`.
    pub image_states: Vec<Tensor>,
    /// Label-token states entering and leaving each LT block, each `[B·c × D]`.
    pub label_states: Vec<Tensor>,
    pub attention: Vec<AttentionRecord>,
}

/// Patchifies every image and stacks the patches as `[B·n × p²C]`.
pub fn stack_patches(images: &[&Tensor], config: &ModelConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * config.num_patches() * config.patch_dim());
    for img in images {
        let dims = image_dims(img)?;
        if dims != (config.height, config.width, config.channels) {
            return Err(Error::shape(
                "forward",
                img.shape(),
                &[config.height, config.width, config.channels],
            ));
        }
        data.extend_from_slice(patchify(img, config.patch)?.data());
    }
    Tensor::new(&[images.len() * config.num_patches(), config.patch_dim()], data)
}

/// Patch projection, CLS prepended per sample, positional embeddings added.
/// `patches` holds `batch` samples of `n` rows each; the result has `batch`
/// groups of `n + 1` rows with CLS first.
pub fn embed(tape: &Tape, patches: &Tensor, params: &Parameters, batch: usize) -> Result<Tensor> {
    let (rows, _) = patches.dims2()?;
    let n1 = params.pos_embed.dims2()?.0;
    let n = n1 - 1;
    if batch == 0 || rows != batch * n {
        return Err(Error::shape("embed", patches.shape(), &[batch * n]));
    }
    let tokens = linear(tape, patches, &params.patch_embed)?;
    let with_cls = tape.concat_rows(&[&params.cls_token, &tokens])?;
    let index: Vec<usize> = (0..batch)
        .flat_map(|s| std::iter::once(0).chain(1 + s * n..1 + (s + 1) * n))
        .collect();
    let x = tape.gather_rows(&with_cls, &index)?;
    let pos = if batch == 1 {
        params.pos_embed.clone()
    } else {
        tape.repeat_rows(&params.pos_embed, batch)?
    };
    tape.add(&x, &pos)
}

/// Independent scalar logit per label: `w_k · y_k + b_k`. `y_final` holds
/// `batch` groups of `c` label rows; the result is `[batch × c]`.
pub fn predict_heads(tape: &Tape, y_final: &Tensor, heads: &LabelParams, batch: usize) -> Result<Tensor> {
    let (rows, dim) = y_final.dims2()?;
    let (c, hd) = heads.head_weight.dims2()?;
    if hd != dim || batch == 0 || rows != batch * c || heads.head_bias.shape() != [c] {
        return Err(Error::Contract(format!(
            "{rows} label rows do not match {c} heads over {batch} samples"
        )));
    }
    let w = if batch == 1 {
        heads.head_weight.clone()
    } else {
        tape.repeat_rows(&heads.head_weight, batch)?
    };
    let dots = tape.sum_lastdim(&tape.mul(y_final, &w)?)?;
    let logits = tape.reshape(&dots, &[batch, c])?;
    tape.add_row_bias(&logits, &heads.head_bias)
}

/// Full forward pass over a batch of `H×W×C` images.
///
/// embed → `image_blocks` image-only blocks → append label tokens →
/// `lt_blocks` LT blocks → final LayerNorm → per-label heads. In baseline
/// mode the CLS row goes through the final LayerNorm and the CLS head instead.
pub fn forward(
    tape: &Tape,
    params: &Parameters,
    config: &ModelConfig,
    images: &[&Tensor],
    mut opts: ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    config.validate()?;
    let batch = images.len();
    if batch == 0 {
        return Err(Error::Contract("forward needs at least one image".into()));
    }
    let label_params = match (config.mode.has_label_tokens(), params.labels.as_ref()) {
        (true, Some(l)) => Some(l),
        (false, _) => None,
        (true, None) => {
            return Err(Error::Config(format!(
                "mode {} needs label tokens but the parameters have none",
                config.mode
            )))
        }
    };
    if params.blocks.len() != config.depth {
        return Err(Error::Config(format!(
            "parameters hold {} blocks, config depth is {}",
            params.blocks.len(),
            config.depth
        )));
    }

    let image_tokens = config.num_patches() + 1;
    let c = config.labels;
    let patches = tape.constant(&stack_patches(images, config)?);
    let mut x = embed(tape, &patches, params, batch)?;
    let mut image_states = vec![x.clone()];
    let mut label_states = Vec::new();
    let mut attention = Vec::new();
    let mut y: Option<Tensor> = None;

    for (b, block) in params.blocks.iter().enumerate() {
        let lt = b >= config.image_blocks;
        if lt && y.is_none() {
            let labels = label_params.expect("LT blocks imply label tokens");
            let tokens = if batch == 1 {
                labels.tokens.clone()
            } else {
                tape.repeat_rows(&labels.tokens, batch)?
            };
            label_states.push(tokens.clone());
            y = Some(tokens);
        }
        let mode = if lt { config.mode } else { AttentionMode::Baseline };
        let out = encoder_block(tape, &x, y.as_ref(), block, mode, batch, opts.dropout.as_deref_mut())?;

        if opts.capture_attention {
            for s in 0..batch {
                for h in 0..config.heads {
                    let cls_row = s * image_tokens;
                    attention.push(AttentionRecord {
                        sample: s,
                        block: b,
                        lt_block: lt,
                        head: h,
                        query: QueryToken::Cls,
                        image_keys: image_tokens,
                        row: out.probs.row(h, cls_row).to_vec(),
                    });
                    if lt {
                        for k in 0..c {
                            let row = batch * image_tokens + s * c + k;
                            attention.push(AttentionRecord {
                                sample: s,
                                block: b,
                                lt_block: true,
                                head: h,
                                query: QueryToken::Label(k),
                                image_keys: image_tokens,
                                row: out.probs.row(h, row).to_vec(),
                            });
                        }
                    }
                }
            }
        }

        x = out.image;
        image_states.push(x.clone());
        if let Some(labels) = out.labels {
            label_states.push(labels.clone());
            y = Some(labels);
        }
    }

    let cls_index: Vec<usize> = (0..batch).map(|s| s * image_tokens).collect();
    let cls_rows = tape.gather_rows(&x, &cls_index)?;
    let cls_logits = linear(tape, &layer_norm(tape, &cls_rows, &params.norm)?, &params.cls_head)?;

    let logits = match (label_params, y) {
        (Some(heads), Some(y)) => {
            let y_final = layer_norm(tape, &y, &params.norm)?;
            predict_heads(tape, &y_final, heads, batch)?
        }
        _ => cls_logits.clone(),
    };

    Ok(ForwardOutput {
        logits,
        cls_logits,
        image_states,
        label_states,
        attention,
    })
}
