mod common;

use common::reference::{attention_masked_dense, attention_rows, layer_norm_rows, linear_naive, rows_of, Rows};
use common::{gradcheck, probe, rng, uniform};
use ltvit_core::nn::{
    combined_attention, encoder_block, ffn, layer_norm, linear, AttentionMode, AttentionParams, BlockParams,
    FeedForward, LayerNormParams, Linear,
};
use ltvit_core::tensor::gelu_scalar;
use ltvit_core::{Error, Tape, Tensor};
use proptest::prelude::*;

fn lin(w: Tensor, b: Tensor) -> Linear {
    Linear { weight: w, bias: b }
}

fn random_linear(r: &mut rand_chacha::ChaCha8Rng, i: usize, o: usize) -> Linear {
    lin(uniform(r, &[i, o]), uniform(r, &[o]))
}

fn scaled(t: Tensor, s: f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|v| v * s).collect()).unwrap()
}

fn random_attention(seed: u64, d: usize, heads: usize) -> AttentionParams {
    let mut r = rng(seed);
    let qkv = random_linear(&mut r, d, 3 * d);
    let proj = random_linear(&mut r, d, d);
    AttentionParams {
        qkv: lin(scaled(qkv.weight, 0.5), qkv.bias),
        proj,
        heads,
    }
}

fn random_block(seed: u64, d: usize, heads: usize) -> BlockParams {
    let mut r = rng(seed ^ 0xb10c);
    let ln = |r: &mut rand_chacha::ChaCha8Rng| LayerNormParams {
        gamma: uniform(r, &[d]),
        beta: uniform(r, &[d]),
    };
    let norm1 = ln(&mut r);
    let norm2 = ln(&mut r);
    let fc1 = random_linear(&mut r, d, 4 * d);
    let fc2 = random_linear(&mut r, 4 * d, d);
    BlockParams {
        norm1,
        attn: random_attention(seed, d, heads),
        norm2,
        mlp: FeedForward {
            fc1: lin(scaled(fc1.weight, 0.3), fc1.bias),
            fc2: lin(scaled(fc2.weight, 0.3), fc2.bias),
        },
    }
}

/// Which keys query `i` may read in one sample of `image` image rows
/// followed by label rows.
fn allowed(mode: AttentionMode, image: usize) -> impl Fn(usize, usize) -> bool {
    move |i, j| {
        let query_is_image = i < image;
        let key_is_image = j < image;
        match mode {
            AttentionMode::FullSelf | AttentionMode::Baseline => true,
            AttentionMode::OneWay => !query_is_image || key_is_image,
            AttentionMode::OneWayNoLabelSelf => key_is_image,
        }
    }
}

fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn concat(a: &Rows, b: &Rows) -> Rows {
    a.iter().chain(b).cloned().collect()
}

fn matmul_rows(x: &Rows, w: &Tensor) -> Rows {
    let zero = Tensor::zeros(&[w.shape()[1]]);
    linear_naive(x, w, &zero)
}

/// Combined attention for one sample from first principles:
/// `W_O · MHA(masked)` plus the output bias.
fn oracle_combined(x: &Rows, y: &Rows, p: &AttentionParams, mode: AttentionMode) -> Rows {
    let tokens = concat(x, y);
    let qkv = linear_naive(&tokens, &p.qkv.weight, &p.qkv.bias);
    let a = attention_masked_dense(&qkv, p.heads, allowed(mode, x.len()));
    linear_naive(&a, &p.proj.weight, &p.proj.bias)
}

#[test]
fn linear_examples() {
    let tape = Tape::new();
    let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
    let l = lin(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), Tensor::new(&[2], vec![0.5, -0.5]).unwrap());
    assert_eq!(linear(&tape, &x, &l).unwrap().data(), &[1.5, 1.5]);

    let mut r = rng(1);
    let x = uniform(&mut r, &[4, 3]);
    let l = random_linear(&mut r, 3, 2);
    let err = gradcheck(&[x, l.weight, l.bias], |t, v| {
        let layer = lin(v[1].clone(), v[2].clone());
        probe(t, &linear(t, &v[0], &layer)?)
    });
    assert!(err < 1e-7, "linear gradient rel err {err}");
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let ln = LayerNormParams {
        gamma: Tensor::new(&[4], vec![2.0, 2.0, 2.0, 2.0]).unwrap(),
        beta: Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
    };
    let constant = Tensor::full(&[1, 4], 3.7);
    let out = layer_norm(&tape, &constant, &ln).unwrap();
    for (o, b) in out.data().iter().zip(ln.beta.data()) {
        assert!((o - b).abs() < 1e-12);
    }

    let unit = LayerNormParams {
        gamma: Tensor::ones(&[2]),
        beta: Tensor::zeros(&[2]),
    };
    let out = layer_norm(&tape, &Tensor::from_rows(&[vec![-1.0, 1.0]]).unwrap(), &unit).unwrap();
    assert!((out.data()[0] + 1.0).abs() < 1e-5 && (out.data()[1] - 1.0).abs() < 1e-5);

    let unit = LayerNormParams {
        gamma: Tensor::ones(&[16]),
        beta: Tensor::zeros(&[16]),
    };
    let x = uniform(&mut rng(2), &[8, 16]);
    let out = layer_norm(&tape, &x, &unit).unwrap();
    for row in rows_of(&out) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12, "mean {mean}");
        assert!((1.0 - 1e-3..=1.0).contains(&var), "var {var}");
    }
    let oracle = layer_norm_rows(&rows_of(&x), &unit);
    assert!(max_abs_diff(&rows_of(&out), &oracle) < 1e-12);
}

#[test]
fn ffn_examples() {
    let tape = Tape::new();
    let d = 3;
    let zero = FeedForward {
        fc1: lin(Tensor::zeros(&[d, 4 * d]), Tensor::zeros(&[4 * d])),
        fc2: lin(Tensor::zeros(&[4 * d, d]), Tensor::zeros(&[d])),
    };
    let x = uniform(&mut rng(3), &[5, d]);
    assert!(ffn(&tape, &x, &zero).unwrap().data().iter().all(|&v| v == 0.0));

    // 1→1→1 identity weights: output is gelu(x).
    let one = FeedForward {
        fc1: lin(Tensor::ones(&[1, 1]), Tensor::zeros(&[1])),
        fc2: lin(Tensor::ones(&[1, 1]), Tensor::zeros(&[1])),
    };
    let out = ffn(&tape, &Tensor::full(&[1, 1], 2.0), &one).unwrap();
    assert!((out.data()[0] - 1.954_597_694).abs() < 1e-6);

    let mut r = rng(4);
    let x = uniform(&mut r, &[3, 2]);
    let f1 = random_linear(&mut r, 2, 8);
    let f2 = random_linear(&mut r, 8, 2);
    let err = gradcheck(&[x, f1.weight, f1.bias, f2.weight, f2.bias], |t, v| {
        let mlp = FeedForward {
            fc1: lin(v[1].clone(), v[2].clone()),
            fc2: lin(v[3].clone(), v[4].clone()),
        };
        probe(t, &ffn(t, &v[0], &mlp)?)
    });
    assert!(err < 1e-6, "ffn gradient rel err {err}");
}

#[test]
fn single_image_key_returns_projected_value() {
    // One image token and one label token: the image query's only key is itself.
    let tape = Tape::new();
    let d = 4;
    let p = random_attention(5, d, 2);
    let mut r = rng(6);
    let x = uniform(&mut r, &[1, d]);
    let y = uniform(&mut r, &[1, d]);
    let out = combined_attention(&tape, &x, Some(&y), &p, AttentionMode::OneWay, 1).unwrap();

    let xr = rows_of(&x);
    let v: Rows = linear_naive(&xr, &p.qkv.weight, &p.qkv.bias)
        .iter()
        .map(|r| r[2 * d..].to_vec())
        .collect();
    let expected = linear_naive(&v, &p.proj.weight, &p.proj.bias);
    assert!(max_abs_diff(&rows_of(&out.image), &expected) < 1e-12);
}

#[test]
fn hand_set_two_image_one_label_matches_straight_line_oracle() {
    // h = 1, D = 2, W_Q = W_K = W_V = W_O = I, zero biases.
    let tape = Tape::new();
    let mut qkv_w = vec![0.0; 2 * 6];
    for block in 0..3 {
        qkv_w[block * 2] = 1.0;
        qkv_w[6 + block * 2 + 1] = 1.0;
    }
    let p = AttentionParams {
        qkv: lin(Tensor::new(&[2, 6], qkv_w).unwrap(), Tensor::zeros(&[6])),
        proj: lin(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), Tensor::zeros(&[2])),
        heads: 1,
    };
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let y = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
    let out = combined_attention(&tape, &x, Some(&y), &p, AttentionMode::OneWay, 1).unwrap();

    // Written out by hand with scale 1/sqrt(2).
    let s = 1.0 / 2f64.sqrt();
    let e = |a: f64| a.exp();
    let x0 = [e(s) / (e(s) + 1.0), 1.0 / (e(s) + 1.0)];
    let x1 = [1.0 / (1.0 + e(s)), e(s) / (1.0 + e(s))];
    let (w0, w1, w2) = (e(s), e(s), e(2.0 * s));
    let z = w0 + w1 + w2;
    let y0 = [(w0 + w2) / z, (w1 + w2) / z];

    let img = out.image.data();
    let lbl = out.labels.unwrap();
    for (a, b) in img.iter().zip(x0.iter().chain(&x1)) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    for (a, b) in lbl.data().iter().zip(&y0) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn every_mode_matches_masked_dense_oracle() {
    let (n1, c, d, heads) = (5, 3, 8, 2);
    let p = random_attention(7, d, heads);
    let mut r = rng(8);
    let x = uniform(&mut r, &[n1, d]);
    let y = uniform(&mut r, &[c, d]);
    for mode in [AttentionMode::FullSelf, AttentionMode::OneWay, AttentionMode::OneWayNoLabelSelf] {
        let tape = Tape::new();
        let out = combined_attention(&tape, &x, Some(&y), &p, mode, 1).unwrap();
        let got = concat(&rows_of(&out.image), &rows_of(out.labels.as_ref().unwrap()));
        let want = oracle_combined(&rows_of(&x), &rows_of(&y), &p, mode);
        assert!(max_abs_diff(&got, &want) < 1e-12, "{mode}");
    }
    let tape = Tape::new();
    let out = combined_attention(&tape, &x, None, &p, AttentionMode::Baseline, 1).unwrap();
    let want = oracle_combined(&rows_of(&x), &Vec::new(), &p, AttentionMode::Baseline);
    assert!(max_abs_diff(&rows_of(&out.image), &want) < 1e-12);
}

#[test]
fn full_self_is_standard_mha_over_the_concatenation() {
    let (n1, c, d, heads) = (4, 2, 6, 3);
    let p = random_attention(9, d, heads);
    let mut r = rng(10);
    let x = uniform(&mut r, &[n1, d]);
    let y = uniform(&mut r, &[c, d]);
    let tape = Tape::new();
    let out = combined_attention(&tape, &x, Some(&y), &p, AttentionMode::FullSelf, 1).unwrap();
    let got = concat(&rows_of(&out.image), &rows_of(out.labels.as_ref().unwrap()));

    // Per-head Q, K, V from separate weight slices, concatenated, then W_O.
    let z = concat(&rows_of(&x), &rows_of(&y));
    let t = z.len();
    let dh = d / heads;
    let w = rows_of(&p.qkv.weight);
    let col = |o: usize| -> Tensor {
        Tensor::from_rows(&w.iter().map(|r| r[o..o + dh].to_vec()).collect::<Vec<_>>()).unwrap()
    };
    let bias = |o: usize| Tensor::new(&[dh], p.qkv.bias.data()[o..o + dh].to_vec()).unwrap();
    let mut concat_heads = vec![Vec::new(); t];
    for h in 0..heads {
        let q = linear_naive(&z, &col(h * dh), &bias(h * dh));
        let k = linear_naive(&z, &col(d + h * dh), &bias(d + h * dh));
        let v = linear_naive(&z, &col(2 * d + h * dh), &bias(2 * d + h * dh));
        let kt: Rows = (0..dh).map(|a| k.iter().map(|row| row[a]).collect()).collect();
        let kt = Tensor::from_rows(&kt).unwrap();
        let scores = matmul_rows(&q, &kt);
        for i in 0..t {
            let m = scores[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores[i].iter().map(|s| ((s - m) / (dh as f64).sqrt()).exp()).collect();
            let sum: f64 = e.iter().sum();
            for a in 0..dh {
                concat_heads[i].push((0..t).map(|j| e[j] / sum * v[j][a]).sum::<f64>());
            }
        }
    }
    let want = linear_naive(&concat_heads, &p.proj.weight, &p.proj.bias);
    assert!(max_abs_diff(&got, &want) < 1e-12);
}

#[test]
fn one_way_image_output_ignores_label_tokens_bitwise() {
    let (n1, c, d) = (6, 4, 8);
    let p = random_attention(11, d, 2);
    let mut r = rng(12);
    let x = uniform(&mut r, &[2 * n1, d]);
    let y1 = uniform(&mut r, &[2 * c, d]);
    let y2 = scaled(uniform(&mut r, &[2 * c, d]), 50.0);
    for mode in [AttentionMode::OneWay, AttentionMode::OneWayNoLabelSelf] {
        let tape = Tape::new();
        let a = combined_attention(&tape, &x, Some(&y1), &p, mode, 2).unwrap();
        let b = combined_attention(&tape, &x, Some(&y2), &p, mode, 2).unwrap();
        let base = combined_attention(&tape, &x, None, &p, AttentionMode::Baseline, 2).unwrap();
        assert!(a.image.bitwise_eq(&b.image), "{mode}");
        assert!(a.image.bitwise_eq(&base.image), "{mode}");
    }
    let tape = Tape::new();
    let a = combined_attention(&tape, &x, Some(&y1), &p, AttentionMode::FullSelf, 2).unwrap();
    let b = combined_attention(&tape, &x, Some(&y2), &p, AttentionMode::FullSelf, 2).unwrap();
    assert!(!a.image.bitwise_eq(&b.image));
}

#[test]
fn batched_attention_matches_per_sample_oracle() {
    let (batch, n1, c, d, heads) = (3, 4, 2, 4, 2);
    let p = random_attention(13, d, heads);
    let mut r = rng(14);
    let x = uniform(&mut r, &[batch * n1, d]);
    let y = uniform(&mut r, &[batch * c, d]);
    let tape = Tape::new();
    let out = combined_attention(&tape, &x, Some(&y), &p, AttentionMode::OneWay, batch).unwrap();
    let (xr, yr) = (rows_of(&x), rows_of(&y));
    let (gi, gl) = (rows_of(&out.image), rows_of(out.labels.as_ref().unwrap()));
    for s in 0..batch {
        let want = oracle_combined(&xr[s * n1..(s + 1) * n1].to_vec(), &yr[s * c..(s + 1) * c].to_vec(), &p, AttentionMode::OneWay);
        let got = concat(&gi[s * n1..(s + 1) * n1].to_vec(), &gl[s * c..(s + 1) * c].to_vec());
        assert!(max_abs_diff(&got, &want) < 1e-12, "sample {s}");
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let (n1, c, d, heads) = (5, 3, 8, 4);
    let p = random_attention(15, d, heads);
    let mut r = rng(16);
    let x = scaled(uniform(&mut r, &[2 * n1, d]), 10.0);
    let y = uniform(&mut r, &[2 * c, d]);
    for mode in [AttentionMode::FullSelf, AttentionMode::OneWay, AttentionMode::OneWayNoLabelSelf] {
        let tape = Tape::new();
        let out = combined_attention(&tape, &x, Some(&y), &p, mode, 2).unwrap();
        for h in 0..heads {
            for q in 0..2 * (n1 + c) {
                let row = out.probs.row(h, q);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&w| w >= 0.0));
            }
        }
    }
}

#[test]
fn attention_errors() {
    let tape = Tape::new();
    let d = 6;
    let p = random_attention(17, d, 4);
    let x = Tensor::zeros(&[3, d]);
    let y = Tensor::zeros(&[1, d]);
    assert!(matches!(
        combined_attention(&tape, &x, Some(&y), &p, AttentionMode::OneWay, 1),
        Err(Error::Config(_))
    ));
    let p = random_attention(17, d, 3);
    assert!(matches!(
        combined_attention(&tape, &x, Some(&y), &p, AttentionMode::Baseline, 1),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        combined_attention(&tape, &x, None, &p, AttentionMode::OneWay, 1),
        Err(Error::Contract(_))
    ));
}

#[test]
fn zero_attention_and_ffn_weights_leave_tokens_unchanged() {
    let (n1, c, d) = (5, 2, 4);
    let mut block = random_block(18, d, 2);
    for l in [&mut block.attn.qkv, &mut block.attn.proj, &mut block.mlp.fc1, &mut block.mlp.fc2] {
        l.weight = Tensor::zeros(l.weight.shape());
        l.bias = Tensor::zeros(l.bias.shape());
    }
    let mut r = rng(19);
    let x = uniform(&mut r, &[n1, d]);
    let y = uniform(&mut r, &[c, d]);
    let tape = Tape::new();
    let out = encoder_block(&tape, &x, Some(&y), &block, AttentionMode::OneWay, 1, None).unwrap();
    assert!(out.image.bitwise_eq(&x));
    assert!(out.labels.unwrap().bitwise_eq(&y));
}

#[test]
fn lt_block_matches_straight_line_oracle() {
    // n = 2 patches (+ CLS), one label, D = 2, h = 1.
    let (n1, c, d) = (3, 1, 2);
    let block = random_block(20, d, 1);
    let mut r = rng(21);
    let x = uniform(&mut r, &[n1, d]);
    let y = uniform(&mut r, &[c, d]);
    for mode in [AttentionMode::FullSelf, AttentionMode::OneWay, AttentionMode::OneWayNoLabelSelf] {
        let tape = Tape::new();
        let out = encoder_block(&tape, &x, Some(&y), &block, mode, 1, None).unwrap();
        let got = concat(&rows_of(&out.image), &rows_of(out.labels.as_ref().unwrap()));

        let z = concat(&rows_of(&x), &rows_of(&y));
        let h = layer_norm_rows(&z, &block.norm1);
        let qkv = linear_naive(&h, &block.attn.qkv.weight, &block.attn.qkv.bias);
        let a = attention_rows(&qkv, 1, allowed(mode, n1));
        let a = linear_naive(&a, &block.attn.proj.weight, &block.attn.proj.bias);
        let z1: Rows = z.iter().zip(&a).map(|(p, q)| p.iter().zip(q).map(|(u, v)| u + v).collect()).collect();
        let h2 = layer_norm_rows(&z1, &block.norm2);
        let f = linear_naive(&h2, &block.mlp.fc1.weight, &block.mlp.fc1.bias);
        let f: Rows = f.iter().map(|r| r.iter().map(|&v| gelu_scalar(v)).collect()).collect();
        let f = linear_naive(&f, &block.mlp.fc2.weight, &block.mlp.fc2.bias);
        let want: Rows = z1.iter().zip(&f).map(|(p, q)| p.iter().zip(q).map(|(u, v)| u + v).collect()).collect();
        assert!(max_abs_diff(&got, &want) < 1e-12, "{mode}");
    }
}

#[test]
fn lt_block_gradients_match_finite_differences() {
    let (n1, c, d) = (3, 2, 4);
    let block = random_block(22, d, 2);
    let mut r = rng(23);
    let x = uniform(&mut r, &[n1, d]);
    let y = uniform(&mut r, &[c, d]);
    let inputs = vec![
        x,
        y,
        block.attn.qkv.weight.clone(),
        block.attn.proj.weight.clone(),
        block.mlp.fc1.weight.clone(),
        block.norm1.gamma.clone(),
    ];
    let err = gradcheck(&inputs, |t, v| {
        let mut b = block.clone();
        b.attn.qkv.weight = v[2].clone();
        b.attn.proj.weight = v[3].clone();
        b.mlp.fc1.weight = v[4].clone();
        b.norm1.gamma = v[5].clone();
        let out = encoder_block(t, &v[0], Some(&v[1]), &b, AttentionMode::OneWay, 1, None)?;
        let both = t.concat_rows(&[&out.image, out.labels.as_ref().unwrap()])?;
        probe(t, &both)
    });
    assert!(err < 1e-6, "block gradient rel err {err}");
}

#[test]
fn label_permutation_permutes_outputs_bitwise() {
    let (n1, c, d) = (4, 3, 8);
    let block = random_block(24, d, 2);
    let mut r = rng(25);
    let x = uniform(&mut r, &[n1, d]);
    let y = uniform(&mut r, &[c, d]);
    let perm = [2, 0, 1];
    let yr = rows_of(&y);
    let yp = Tensor::from_rows(&perm.iter().map(|&k| yr[k].clone()).collect::<Vec<_>>()).unwrap();
    for mode in [AttentionMode::FullSelf, AttentionMode::OneWay, AttentionMode::OneWayNoLabelSelf] {
        let tape = Tape::new();
        let a = encoder_block(&tape, &x, Some(&y), &block, mode, 1, None).unwrap();
        let b = encoder_block(&tape, &x, Some(&yp), &block, mode, 1, None).unwrap();
        let (la, lb) = (rows_of(a.labels.as_ref().unwrap()), rows_of(b.labels.as_ref().unwrap()));
        for (i, &k) in perm.iter().enumerate() {
            assert_eq!(la[k], lb[i], "{mode}");
        }
        assert!(a.image.bitwise_eq(&b.image), "{mode}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_is_shift_invariant(values in proptest::collection::vec(-30.0f64..30.0, 1..12), shift in -100.0f64..100.0) {
        let tape = Tape::new();
        let n = values.len();
        let x = Tensor::new(&[1, n], values.clone()).unwrap();
        let xs = Tensor::new(&[1, n], values.iter().map(|v| v + shift).collect()).unwrap();
        let a = tape.softmax_lastdim(&x).unwrap();
        let b = tape.softmax_lastdim(&xs).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn one_way_invariance_holds_for_any_labels(seed in 0u64..1000, c in 1usize..5, scale in 0.01f64..100.0) {
        let (n1, d) = (3, 4);
        let p = random_attention(seed, d, 2);
        let mut r = rng(seed + 1);
        let x = uniform(&mut r, &[n1, d]);
        let y1 = uniform(&mut r, &[c, d]);
        let y2 = scaled(uniform(&mut r, &[c, d]), scale);
        let tape = Tape::new();
        let a = combined_attention(&tape, &x, Some(&y1), &p, AttentionMode::OneWay, 1).unwrap();
        let b = combined_attention(&tape, &x, Some(&y2), &p, AttentionMode::OneWay, 1).unwrap();
        prop_assert!(a.image.bitwise_eq(&b.image));
    }
}
