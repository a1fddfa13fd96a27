use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{AttentionMode, AttentionParams, BlockParams, FeedForward, LayerNormParams, Linear};
use crate::tensor::{Tape, Tensor};

const INIT_STD: f64 = 0.02;

/// Label tokens and their per-label scalar heads.
#[derive(Clone, Debug)]
pub struct LabelParams {
    /// One learnable token per label, `[c × D]`.
    pub tokens: Tensor,
    /// Head `k` is row `k`: logit_k = head_weight[k]·token_k + head_bias[k].
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// All learnable tensors of the model.
#[derive(Clone, Debug)]
pub struct Parameters {
    pub patch_embed: Linear,
    pub pos_embed: Tensor,
    pub cls_token: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
    /// Used only in baseline mode.
    pub cls_head: Linear,
    pub labels: Option<LabelParams>,
}

/// Parameter name prefixes that belong to the label-token machinery.
pub const LABEL_PARAM_PREFIX: &str = "label_";

impl Parameters {
    /// Truncated-normal (±2σ, σ = 0.02) weights and embeddings, zero biases,
    /// unit LayerNorm scales. Each tensor draws from its own stream keyed by
    /// `seed` and its name, so a tensor's initial value does not depend on
    /// which other tensors exist.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let c = config.labels;
        let n = config.num_patches();
        let weight = |name: &str, shape: &[usize]| trunc_normal(seed, name, shape);
        let zeros = |shape: &[usize]| Tensor::zeros(shape);
        let linear = |name: &str, i: usize, o: usize| Linear {
            weight: weight(&format!("{name}.weight"), &[i, o]),
            bias: zeros(&[o]),
        };
        let ln = || LayerNormParams {
            gamma: Tensor::ones(&[d]),
            beta: zeros(&[d]),
        };
        let blocks = (0..config.depth)
            .map(|b| {
                let p = format!("blocks.{b}");
                BlockParams {
                    norm1: ln(),
                    attn: AttentionParams {
                        qkv: linear(&format!("{p}.attn.qkv"), d, 3 * d),
                        proj: linear(&format!("{p}.attn.proj"), d, d),
                        heads: config.heads,
                    },
                    norm2: ln(),
                    mlp: FeedForward {
                        fc1: linear(&format!("{p}.mlp.fc1"), d, config.hidden()),
                        fc2: linear(&format!("{p}.mlp.fc2"), config.hidden(), d),
                    },
                }
            })
            .collect();
        let labels = config.mode.has_label_tokens().then(|| LabelParams {
            tokens: weight("label_tokens", &[c, d]),
            head_weight: weight("label_heads.weight", &[c, d]),
            head_bias: zeros(&[c]),
        });
        let mut params = Parameters {
            patch_embed: linear("patch_embed", config.patch_dim(), d),
            pos_embed: weight("pos_embed", &[n + 1, d]),
            cls_token: weight("cls_token", &[1, d]),
            blocks,
            norm: ln(),
            cls_head: linear("cls_head", d, c),
            labels,
        };
        params.set_trainable(config.mode);
        Ok(params)
    }

    /// Fresh label tokens and heads, drawn exactly as [`Parameters::init`] would.
    pub fn fresh_label_params(config: &ModelConfig, seed: u64) -> LabelParams {
        let (c, d) = (config.labels, config.dim);
        LabelParams {
            tokens: trunc_normal(seed, "label_tokens", &[c, d]),
            head_weight: trunc_normal(seed, "label_heads.weight", &[c, d]),
            head_bias: Tensor::zeros(&[c]),
        }
    }

    /// Marks which tensors receive gradients: everything the mode's loss reaches.
    pub fn set_trainable(&mut self, mode: AttentionMode) {
        let cls_head = mode == AttentionMode::Baseline;
        for (name, t) in self.named_mut() {
            t.set_requires_grad(cls_head || !name.starts_with("cls_head"));
        }
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_embed.weight),
            ("patch_embed.bias".to_string(), &self.patch_embed.bias),
            ("pos_embed".to_string(), &self.pos_embed),
            ("cls_token".to_string(), &self.cls_token),
        ];
        for (b, blk) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{b}");
            out.extend([
                (format!("{p}.norm1.gamma"), &blk.norm1.gamma),
                (format!("{p}.norm1.beta"), &blk.norm1.beta),
                (format!("{p}.attn.qkv.weight"), &blk.attn.qkv.weight),
                (format!("{p}.attn.qkv.bias"), &blk.attn.qkv.bias),
                (format!("{p}.attn.proj.weight"), &blk.attn.proj.weight),
                (format!("{p}.attn.proj.bias"), &blk.attn.proj.bias),
                (format!("{p}.norm2.gamma"), &blk.norm2.gamma),
                (format!("{p}.norm2.beta"), &blk.norm2.beta),
                (format!("{p}.mlp.fc1.weight"), &blk.mlp.fc1.weight),
                (format!("{p}.mlp.fc1.bias"), &blk.mlp.fc1.bias),
                (format!("{p}.mlp.fc2.weight"), &blk.mlp.fc2.weight),
                (format!("{p}.mlp.fc2.bias"), &blk.mlp.fc2.bias),
            ]);
        }
        out.extend([
            ("norm.gamma".to_string(), &self.norm.gamma),
            ("norm.beta".to_string(), &self.norm.beta),
            ("cls_head.weight".to_string(), &self.cls_head.weight),
            ("cls_head.bias".to_string(), &self.cls_head.bias),
        ]);
        if let Some(l) = &self.labels {
            out.extend([
                ("label_tokens".to_string(), &l.tokens),
                ("label_heads.weight".to_string(), &l.head_weight),
                ("label_heads.bias".to_string(), &l.head_bias),
            ]);
        }
        out
    }

    /// Mutable counterpart of [`Parameters::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &mut self.patch_embed.weight),
            ("patch_embed.bias".to_string(), &mut self.patch_embed.bias),
            ("pos_embed".to_string(), &mut self.pos_embed),
            ("cls_token".to_string(), &mut self.cls_token),
        ];
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{b}");
            out.extend([
                (format!("{p}.norm1.gamma"), &mut blk.norm1.gamma),
                (format!("{p}.norm1.beta"), &mut blk.norm1.beta),
                (format!("{p}.attn.qkv.weight"), &mut blk.attn.qkv.weight),
                (format!("{p}.attn.qkv.bias"), &mut blk.attn.qkv.bias),
                (format!("{p}.attn.proj.weight"), &mut blk.attn.proj.weight),
                (format!("{p}.attn.proj.bias"), &mut blk.attn.proj.bias),
                (format!("{p}.norm2.gamma"), &mut blk.norm2.gamma),
                (format!("{p}.norm2.beta"), &mut blk.norm2.beta),
                (format!("{p}.mlp.fc1.weight"), &mut blk.mlp.fc1.weight),
                (format!("{p}.mlp.fc1.bias"), &mut blk.mlp.fc1.bias),
                (format!("{p}.mlp.fc2.weight"), &mut blk.mlp.fc2.weight),
                (format!("{p}.mlp.fc2.bias"), &mut blk.mlp.fc2.bias),
            ]);
        }
        out.extend([
            ("norm.gamma".to_string(), &mut self.norm.gamma),
            ("norm.beta".to_string(), &mut self.norm.beta),
            ("cls_head.weight".to_string(), &mut self.cls_head.weight),
            ("cls_head.bias".to_string(), &mut self.cls_head.bias),
        ]);
        if let Some(l) = &mut self.labels {
            out.extend([
                ("label_tokens".to_string(), &mut l.tokens),
                ("label_heads.weight".to_string(), &mut l.head_weight),
                ("label_heads.bias".to_string(), &mut l.head_bias),
            ]);
        }
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// A copy whose tensors are leaves of `tape`.
    pub fn bind(&self, tape: &Tape) -> Parameters {
        let mut bound = self.clone();
        for (_, t) in bound.named_mut() {
            *t = tape.leaf(t);
        }
        bound
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    /// Checks that names and shapes match what `config` would build.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let expected = Parameters::shapes(config)?;
        let actual: Vec<(String, Vec<usize>)> = self
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected != actual {
            let diff = expected
                .iter()
                .zip(&actual)
                .find(|(e, a)| e != a)
                .map(|(e, a)| format!("expected {} {:?}, found {} {:?}", e.0, e.1, a.0, a.1))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", expected.len(), actual.len()));
            return Err(Error::Config(format!("parameters do not match config: {diff}")));
        }
        Ok(())
    }

    /// Names and shapes for `config`, without drawing any values.
    pub fn shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        config.validate()?;
        let d = config.dim;
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![config.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![config.num_patches() + 1, d]),
            ("cls_token".to_string(), vec![1, d]),
        ];
        for b in 0..config.depth {
            let p = format!("blocks.{b}");
            out.extend([
                (format!("{p}.norm1.gamma"), vec![d]),
                (format!("{p}.norm1.beta"), vec![d]),
                (format!("{p}.attn.qkv.weight"), vec![d, 3 * d]),
                (format!("{p}.attn.qkv.bias"), vec![3 * d]),
                (format!("{p}.attn.proj.weight"), vec![d, d]),
                (format!("{p}.attn.proj.bias"), vec![d]),
                (format!("{p}.norm2.gamma"), vec![d]),
                (format!("{p}.norm2.beta"), vec![d]),
                (format!("{p}.mlp.fc1.weight"), vec![d, config.hidden()]),
                (format!("{p}.mlp.fc1.bias"), vec![config.hidden()]),
                (format!("{p}.mlp.fc2.weight"), vec![config.hidden(), d]),
                (format!("{p}.mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("norm.gamma".to_string(), vec![d]),
            ("norm.beta".to_string(), vec![d]),
            ("cls_head.weight".to_string(), vec![d, config.labels]),
            ("cls_head.bias".to_string(), vec![config.labels]),
        ]);
        if config.mode.has_label_tokens() {
            out.extend([
                ("label_tokens".to_string(), vec![config.labels, d]),
                ("label_heads.weight".to_string(), vec![config.labels, d]),
                ("label_heads.bias".to_string(), vec![config.labels]),
            ]);
        }
        Ok(out)
    }

    /// Rebuilds parameters for `config` from named tensors, failing on any
    /// missing, extra or misshapen entry.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Parameters::zeros(config)?;
        let expected = Parameters::shapes(config)?;
        if named.len() != expected.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, slot), (exp_name, exp_shape)) in params.named_mut().into_iter().zip(&expected) {
            debug_assert_eq!(&name, exp_name);
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Config(format!("parameter `{name}` is missing")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != exp_shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, config expects {exp_shape:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        params.set_trainable(config.mode);
        Ok(params)
    }

    fn zeros(config: &ModelConfig) -> Result<Self> {
        let shapes = Parameters::shapes(config)?;
        let mut it = shapes.iter().map(|(_, s)| Tensor::zeros(s));
        let mut next = || it.next().expect("shape table covers every tensor");
        let mut linear = || Linear { weight: next(), bias: next() };
        let patch_embed = linear();
        let pos_embed = next();
        let cls_token = next();
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let norm1 = LayerNormParams { gamma: next(), beta: next() };
            let qkv = Linear { weight: next(), bias: next() };
            let proj = Linear { weight: next(), bias: next() };
            let norm2 = LayerNormParams { gamma: next(), beta: next() };
            let fc1 = Linear { weight: next(), bias: next() };
            let fc2 = Linear { weight: next(), bias: next() };
            blocks.push(BlockParams {
                norm1,
                attn: AttentionParams { qkv, proj, heads: config.heads },
                norm2,
                mlp: FeedForward { fc1, fc2 },
            });
        }
        let norm = LayerNormParams { gamma: next(), beta: next() };
        let cls_head = Linear { weight: next(), bias: next() };
        let labels = config.mode.has_label_tokens().then(|| LabelParams {
            tokens: next(),
            head_weight: next(),
            head_bias: next(),
        });
        Ok(Parameters {
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
            norm,
            cls_head,
            labels,
        })
    }
}

/// Stream seed for one named tensor.
pub(crate) fn derive_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn trunc_normal(seed: u64, name: &str, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(&mut rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}
