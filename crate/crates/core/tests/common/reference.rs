//! Straight-line reference computations used as oracles. These work on plain
//! `Vec<f64>` rows and never touch the tape.
#![allow(dead_code)]

use ltvit_core::model::{patchify, ModelConfig, Parameters};
use ltvit_core::nn::{BlockParams, LayerNormParams, Linear, LAYER_NORM_EPS};
use ltvit_core::tensor::{gelu_scalar, gemm, Transpose};
use ltvit_core::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(t: &Tensor) -> Rows {
    let cols = t.last_dim();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// `x·W + b` using the same GEMM kernel as the library, so results can be
/// compared bitwise.
pub fn linear_rows(x: &Rows, layer: &Linear) -> Rows {
    let (k, n) = layer.weight.dims2().unwrap();
    let m = x.len();
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &flat, Transpose::No, layer.weight.data(), Transpose::No, &mut out, 0.0).unwrap();
    out.chunks(n)
        .map(|r| r.iter().zip(layer.bias.data()).map(|(v, b)| v + b).collect())
        .collect()
}

/// Naive triple-loop `x·W + b`, independent of the GEMM kernel.
pub fn linear_naive(x: &Rows, w: &Tensor, b: &Tensor) -> Rows {
    let (k, n) = w.dims2().unwrap();
    x.iter()
        .map(|row| {
            (0..n)
                .map(|j| (0..k).map(|p| row[p] * w.data()[p * n + j]).sum::<f64>() + b.data()[j])
                .collect()
        })
        .collect()
}

pub fn layer_norm_rows(x: &Rows, ln: &LayerNormParams) -> Rows {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter()
                .zip(ln.gamma.data())
                .zip(ln.beta.data())
                .map(|((v, g), b)| (v - mean) * rstd * g + b)
                .collect()
        })
        .collect()
}

fn softmax(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Multi-head attention over packed `[T × 3D]` rows where query `i` may read
/// key `j` iff `allowed(i, j)`. Keys are visited in increasing index order.
pub fn attention_rows(qkv: &Rows, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> Rows {
    let t = qkv.len();
    let d = qkv[0].len() / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; d]; t];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..t {
            let keys: Vec<usize> = (0..t).filter(|&j| allowed(i, j)).collect();
            let mut w: Vec<f64> = keys
                .iter()
                .map(|&j| (0..dh).map(|c| qkv[i][qo + c] * qkv[j][ko + c]).sum::<f64>() * scale)
                .collect();
            softmax(&mut w);
            for (&wj, &j) in w.iter().zip(&keys) {
                for c in 0..dh {
                    out[i][qo + c] += wj * qkv[j][vo + c];
                }
            }
        }
    }
    out
}

/// Attention via an additive mask: excluded scores become −∞ before a dense
/// softmax over all `T` keys. A different route from key-set restriction.
pub fn attention_masked_dense(qkv: &Rows, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> Rows {
    let t = qkv.len();
    let d = qkv[0].len() / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; d]; t];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..t {
            let mut w: Vec<f64> = (0..t)
                .map(|j| {
                    if allowed(i, j) {
                        (0..dh).map(|c| qkv[i][qo + c] * qkv[j][ko + c]).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            softmax(&mut w);
            for j in 0..t {
                for c in 0..dh {
                    out[i][qo + c] += w[j] * qkv[j][vo + c];
                }
            }
        }
    }
    out
}

fn add_rows(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// One pre-norm block over a single sample's token rows with the given mask.
pub fn block_rows(x: &Rows, block: &BlockParams, allowed: impl Fn(usize, usize) -> bool) -> Rows {
    let h = layer_norm_rows(x, &block.norm1);
    let qkv = linear_rows(&h, &block.attn.qkv);
    let a = attention_rows(&qkv, block.attn.heads, allowed);
    let a = linear_rows(&a, &block.attn.proj);
    let x1 = add_rows(x, &a);
    let h2 = layer_norm_rows(&x1, &block.norm2);
    let f = linear_rows(&h2, &block.mlp.fc1);
    let f: Rows = f.iter().map(|r| r.iter().map(|&v| gelu_scalar(v)).collect()).collect();
    let f = linear_rows(&f, &block.mlp.fc2);
    add_rows(&x1, &f)
}

/// Plain ViT: embed, every block as full self-attention over CLS + patches,
/// final LayerNorm on CLS, CLS head. Returns the `c` logits.
pub fn plain_vit_logits(params: &Parameters, config: &ModelConfig, image: &Tensor) -> Vec<f64> {
    let patches = rows_of(&patchify(image, config.patch).unwrap());
    let tokens = linear_rows(&patches, &params.patch_embed);
    let pos = rows_of(&params.pos_embed);
    let mut x: Rows = Vec::with_capacity(tokens.len() + 1);
    x.push(params.cls_token.data().iter().zip(&pos[0]).map(|(a, b)| a + b).collect());
    for (t, p) in tokens.iter().zip(&pos[1..]) {
        x.push(t.iter().zip(p).map(|(a, b)| a + b).collect());
    }
    for block in &params.blocks {
        x = block_rows(&x, block, |_, _| true);
    }
    let cls = layer_norm_rows(&x[..1].to_vec(), &params.norm);
    linear_rows(&cls, &params.cls_head).remove(0)
}

/// LT-ViT forward for one image: image-only blocks, then label tokens appended
/// and the trailing blocks run under `allowed` over `[image rows; label rows]`.
/// Final LayerNorm on label rows, one dot-product head per label.
pub fn lt_vit_logits(
    params: &Parameters,
    config: &ModelConfig,
    image: &Tensor,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let patches = rows_of(&patchify(image, config.patch).unwrap());
    let tokens = linear_naive(&patches, &params.patch_embed.weight, &params.patch_embed.bias);
    let pos = rows_of(&params.pos_embed);
    let mut x: Rows = vec![params.cls_token.data().to_vec()];
    x.extend(tokens);
    for (row, p) in x.iter_mut().zip(&pos) {
        row.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let n1 = x.len();
    let labels = params.labels.as_ref().unwrap();
    for (b, block) in params.blocks.iter().enumerate() {
        if b == config.image_blocks {
            x.extend(rows_of(&labels.tokens));
        }
        x = if b < config.image_blocks {
            block_rows(&x, block, |_, _| true)
        } else {
            block_rows(&x, block, &allowed)
        };
    }
    let y = layer_norm_rows(&x[n1..].to_vec(), &params.norm);
    let w = rows_of(&labels.head_weight);
    y.iter()
        .zip(&w)
        .zip(labels.head_bias.data())
        .map(|((yk, wk), bk)| yk.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>() + bk)
        .collect()
}

/// Brute-force pairwise AUC: Σ [s₊ > s₋] + ½[s₊ = s₋] over all pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut twice = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 0 {
                twice += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    (pos > 0 && neg > 0).then(|| twice as f64 / (2 * pos * neg) as f64)
}
