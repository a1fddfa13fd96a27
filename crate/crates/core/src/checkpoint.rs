//! LTCK checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "LTCK" u16 version
//! u32 config_len, config text (RunConfig::to_text)
//! u64 step
//! u32 tensor count, then per tensor:
//!     u16 name_len, name, u8 ndim, u32 dims[ndim], f32 data[numel]
//! u8 has_optim, then if 1:
//!     f64 lr, beta1, beta2, eps, weight_decay; u64 step;
//!     per tensor in table order: f32 m[numel], f32 v[numel]
//! ```
//!
//! Values are stored at 32-bit precision. Loading widens them exactly, so
//! save → load → save reproduces the file byte for byte.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters, LABEL_PARAM_PREFIX};
use crate::tensor::Tensor;
use crate::train::{Moments, OptimState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LTCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub params: Parameters,
    pub optim: Option<OptimState>,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.params.check_against(&self.run.model)?;
        let named = self.params.named();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.run.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optim {
            None => out.push(0),
            Some(st) => {
                st.check_against(named.iter().map(|(n, t)| (n.clone(), *t)))?;
                out.push(1);
                for v in [st.lr, st.beta1, st.beta2, st.eps, st.weight_decay] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&st.step.to_le_bytes());
                for mo in &st.moments {
                    put_f32s(&mut out, &mo.m);
                    put_f32s(&mut out, &mo.v);
                }
            }
        }
        Ok(out)
    }

    /// `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.into(),
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.format("config text is not UTF-8"))?;
        let run = RunConfig::parse(text).map_err(|e| r.format(&format!("embedded config: {e}")))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.format("tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product::<usize>();
            let data = r.f32s(numel)?;
            named.push((name, Tensor::new(&shape, data)?));
        }
        let sizes: Vec<(String, usize)> = named.iter().map(|(n, t)| (n.clone(), t.numel())).collect();
        let params = Parameters::from_named(&run.model, named).map_err(|e| r.format(&e.to_string()))?;
        let optim = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut h = [0.0; 5];
                for v in &mut h {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().expect("eight bytes"));
                }
                let opt_step = r.u64()?;
                let moments = sizes
                    .iter()
                    .map(|(name, n)| {
                        Ok(Moments {
                            name: name.clone(),
                            m: r.f32s(*n)?,
                            v: r.f32s(*n)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                // Parameter order is fixed by the config; the table order must agree.
                let state = OptimState {
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                    weight_decay: h[4],
                    step: opt_step,
                    moments,
                };
                state
                    .check_against(params.named())
                    .map_err(|e| r.format(&e.to_string()))?;
                Some(state)
            }
            other => return Err(r.format(&format!("optimizer flag must be 0 or 1, found {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.format(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { run, params, optim, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }

    /// Loads a checkpoint whose model must match `expected` exactly.
    pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.run.model != *expected {
            return Err(Error::Config(format!(
                "checkpoint {} was written for {:?}, expected {:?}",
                path.display(),
                ck.run.model,
                expected
            )));
        }
        Ok(ck)
    }
}

/// Builds parameters for `target` from a checkpoint's parameters.
///
/// Every backbone tensor must exist in `source` with the same shape. Label
/// tokens and heads are copied when present and drawn fresh from `seed`
/// otherwise; the flag reports which happened.
pub fn transfer_params(source: &Parameters, target: &ModelConfig, seed: u64) -> Result<(Parameters, bool)> {
    target.validate()?;
    let src = source.named();
    let mut fresh_labels = false;
    let mut named = Vec::new();
    for (name, shape) in Parameters::shapes(target)? {
        let found = src.iter().find(|(n, _)| *n == name);
        let tensor = match found {
            Some((_, t)) if t.shape() == shape.as_slice() => t.detach(),
            Some((_, t)) => {
                return Err(Error::Config(format!(
                    "cannot transfer `{name}`: checkpoint shape {:?}, target shape {shape:?}",
                    t.shape()
                )))
            }
            None if name.starts_with(LABEL_PARAM_PREFIX) => {
                fresh_labels = true;
                continue;
            }
            None => return Err(Error::Config(format!("checkpoint has no parameter `{name}`"))),
        };
        named.push((name, tensor));
    }
    if fresh_labels {
        let fresh = Parameters::fresh_label_params(target, seed);
        named.retain(|(n, _)| !n.starts_with(LABEL_PARAM_PREFIX));
        named.push(("label_tokens".into(), fresh.tokens));
        named.push(("label_heads.weight".into(), fresh.head_weight));
        named.push(("label_heads.bias".into(), fresh.head_bias));
    }
    Ok((Parameters::from_named(target, named)?, fresh_labels))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            path: self.path.into(),
            needed: (self.pos + n) as u64,
            found: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.format("tensor too large"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("four bytes"))))
            .collect())
    }

    fn format(&self, detail: &str) -> Error {
        Error::Format {
            path: self.path.into(),
            detail: detail.to_string(),
        }
    }
}
