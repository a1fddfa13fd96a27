#![allow(dead_code)]

pub mod reference;

use ltvit_core::{Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor with entries uniform in `[-2, 2]`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Relative error with a small floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares tape gradients of scalar `f` against central differences with
/// step 1e-6 for every element of every input; returns the worst relative error.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&Tape, &[Tensor]) -> Result<Tensor>) -> f64 {
    let tape = Tape::new();
    let bound: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let loss = f(&tape, &bound).unwrap();
    let grads = tape.backward(&loss).unwrap();

    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        f(&tape, xs).unwrap().item().unwrap()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(&bound[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for e in 0..t.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i] = bump(t, e, h);
            minus[i] = bump(t, e, -h);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[e], numeric));
        }
    }
    worst
}

fn bump(t: &Tensor, e: usize, h: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[e] += h;
    Tensor::new(t.shape(), data).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct gradient.
pub fn probe(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let w: Vec<f64> = (0..x.numel()).map(|i| ((i as f64) * 0.618 + 0.3).sin()).collect();
    let w = Tensor::new(x.shape(), w)?;
    let y = tape.mul(x, &w)?;
    tape.sum(&y)
}
