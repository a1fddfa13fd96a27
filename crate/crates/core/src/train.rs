//! Multi-label training (BCE with logits, Adam) and AUC evaluation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{batch_indices, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{derive_seed, forward, ForwardOptions, ModelConfig, Parameters};
use crate::nn::Dropout;
use crate::tensor::{bce_logit_scalar, Tape, Tensor};

/// Mean stable binary cross-entropy over every logit.
pub fn bce_with_logits(tape: &Tape, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    tape.bce_with_logits(logits, targets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam state: one moment pair per parameter tensor, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    /// Learning rate used by the next step.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl OptimState {
    pub fn new<'a>(lr: f64, weight_decay: f64, params: impl IntoIterator<Item = (String, &'a Tensor)>) -> Self {
        OptimState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: params
                .into_iter()
                .map(|(name, t)| Moments {
                    name,
                    m: vec![0.0; t.numel()],
                    v: vec![0.0; t.numel()],
                })
                .collect(),
        }
    }

    /// Checks that the moments line up with `params` by name and size.
    pub fn check_against<'a>(&self, params: impl IntoIterator<Item = (String, &'a Tensor)>) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        if params.len() != self.moments.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, model has {}",
                self.moments.len(),
                params.len()
            )));
        }
        for ((name, t), mo) in params.iter().zip(&self.moments) {
            if *name != mo.name || mo.m.len() != t.numel() || mo.v.len() != t.numel() {
                return Err(Error::Contract(format!(
                    "optimizer moments for `{}` do not match parameter `{name}`",
                    mo.name
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update with coupled L2 weight decay. Tensors that
/// do not require grad are skipped; a trainable tensor without a gradient is
/// an error.
pub fn adam_step(params: Vec<(String, &mut Tensor)>, state: &mut OptimState) -> Result<()> {
    state.check_against(params.iter().map(|(n, t)| (n.clone(), &**t)))?;
    if let Some((name, _)) = params.iter().find(|(_, t)| t.requires_grad() && t.grad().is_none()) {
        return Err(Error::MissingGrad(name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((_, p), mo) in params.into_iter().zip(&mut state.moments) {
        if !p.requires_grad() {
            continue;
        }
        let g = p.take_grad().expect("checked above");
        let w = p.data_mut();
        for i in 0..w.len() {
            let gi = g[i] + state.weight_decay * w[i];
            mo.m[i] = state.beta1 * mo.m[i] + (1.0 - state.beta1) * gi;
            mo.v[i] = state.beta2 * mo.v[i] + (1.0 - state.beta2) * gi * gi;
            let mhat = mo.m[i] / c1;
            let vhat = mo.v[i] / c2;
            w[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Rate for 0-based `step` out of `total` steps.
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = if total == 0 { 0.0 } else { step.min(total) as f64 / total as f64 };
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown schedule `{other}` (expected constant or cosine)"))),
        }
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks.
/// `None` when either class is empty.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "auc got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("auc labels must be 0 or 1, found {bad}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("auc scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, so tied midranks stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the midrank (i + 1 + j) / 2.
        let midrank2 = (i + 1 + j) as u128;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += midrank2 * tied_pos;
        i = j;
    }
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(Some(u2 as f64 / (2 * pos * neg) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Per-label AUC; `None` where the label has only one class.
    pub auc: Vec<Option<f64>>,
    /// Unweighted mean of the present per-label AUCs.
    pub macro_auc: Option<f64>,
    pub positives: Vec<usize>,
    pub count: usize,
    pub loss: f64,
}

impl EvalReport {
    /// Labels skipped by the macro average.
    pub fn degenerate_labels(&self) -> Vec<usize> {
        self.auc.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(k, _)| k).collect()
    }
}

/// Mean of the present values, `None` if there are none.
pub fn macro_average(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

fn check_dataset(config: &ModelConfig, ds: &Dataset) -> Result<()> {
    if (ds.height, ds.width, ds.channels, ds.labels) != (config.height, config.width, config.channels, config.labels) {
        return Err(Error::Config(format!(
            "dataset is {}x{}x{} with {} labels but the model expects {}x{}x{} with {} labels",
            ds.height,
            ds.width,
            ds.channels,
            ds.labels,
            config.height,
            config.width,
            config.channels,
            config.labels
        )));
    }
    Ok(())
}

/// Logits `[count × c]` for every sample, row per sample.
pub fn predict(params: &Parameters, config: &ModelConfig, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Result<Vec<Vec<f64>>>> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let tape = Tape::new();
            let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
            let out = forward(&tape, params, config, &images, ForwardOptions::default())?;
            Ok((0..chunk.len()).map(|i| out.logits.row(i).to_vec()).collect())
        })
        .collect();
    let mut rows = Vec::with_capacity(samples.len());
    for c in chunks {
        rows.extend(c?);
    }
    Ok(rows)
}

pub fn evaluate(params: &Parameters, config: &ModelConfig, ds: &Dataset) -> Result<EvalReport> {
    check_dataset(config, ds)?;
    let samples: Vec<&Sample> = ds.samples.iter().collect();
    let logits = predict(params, config, &samples)?;
    let c = config.labels;
    let mut loss = 0.0;
    for (row, s) in logits.iter().zip(&ds.samples) {
        for (&z, &t) in row.iter().zip(&s.targets) {
            loss += bce_logit_scalar(z, f64::from(t));
        }
    }
    let count = ds.len();
    let loss = if count == 0 { 0.0 } else { loss / (count * c) as f64 };
    let mut per_label = Vec::with_capacity(c);
    for k in 0..c {
        let scores: Vec<f64> = logits.iter().map(|r| r[k]).collect();
        let labels: Vec<u8> = ds.samples.iter().map(|s| s.targets[k]).collect();
        per_label.push(auc(&scores, &labels)?);
    }
    Ok(EvalReport {
        macro_auc: macro_average(&per_label),
        auc: per_label,
        positives: ds.positives(),
        count,
        loss,
    })
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per independent forward/backward pass inside a batch. Results
    /// do not depend on how micro-batches are scheduled across threads.
    pub micro_batch: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 32,
            micro_batch: 8,
            lr: 5e-4,
            schedule: LrSchedule::Cosine,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::Config("batch_size and micro_batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and ≥ 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub auc: Option<Vec<Option<f64>>>,
    pub macro_auc: Option<f64>,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

#[derive(Clone, Debug)]
pub struct BestModel {
    pub params: Parameters,
    pub state: OptimState,
    pub epoch: usize,
    pub macro_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub state: OptimState,
    pub log: Vec<EpochRecord>,
    /// Highest eval macro AUC seen (the last epoch when there is no eval set).
    pub best: BestModel,
}

/// Gradient of the batch loss for one micro-batch, in parameter order.
/// The loss is scaled so that micro-batch contributions add up to the batch mean.
fn micro_batch_grads(
    params: &Parameters,
    config: &ModelConfig,
    samples: &[&Sample],
    batch_len: usize,
    dropout_seed: u64,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let mut dropout = (config.dropout > 0.0)
        .then(|| Dropout::new(config.dropout, dropout_seed))
        .transpose()?;
    let opts = ForwardOptions {
        capture_attention: false,
        dropout: dropout.as_mut(),
    };
    let out = forward(&tape, &bound, config, &images, opts)?;
    let targets: Vec<f64> = samples.iter().flat_map(|s| s.target_row()).collect();
    let targets = Tensor::new(&[samples.len(), config.labels], targets)?;
    let mean = bce_with_logits(&tape, &out.logits, &targets)?;
    let loss = tape.scale(&mean, samples.len() as f64 / batch_len as f64)?;
    let value = loss.item()?;
    let grads = tape.backward(&loss)?;
    let per_param = bound
        .named()
        .into_iter()
        .map(|(_, t)| t.requires_grad().then(|| grads.get(t).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)))
        .collect();
    Ok((value, per_param))
}

/// Trains `params` on `train_set`, evaluating on `eval_set` after every epoch.
/// `state` resumes an optimizer; otherwise a fresh one is created.
pub fn train(
    config: &ModelConfig,
    tc: &TrainConfig,
    mut params: Parameters,
    state: Option<OptimState>,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    tc.validate()?;
    params.check_against(config)?;
    params.set_trainable(config.mode);
    check_dataset(config, train_set)?;
    if let Some(ev) = eval_set {
        check_dataset(config, ev)?;
    }
    if train_set.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    let mut state = match state {
        Some(s) => {
            s.check_against(params.named())?;
            s
        }
        None => OptimState::new(tc.lr, tc.weight_decay, params.named()),
    };
    state.weight_decay = tc.weight_decay;

    let steps_per_epoch = train_set.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;
    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<BestModel> = None;
    let mut global = 0usize;

    for epoch in 1..=tc.epochs {
        let shuffle_seed = derive_seed(tc.seed, &format!("shuffle.{epoch}"));
        let mut loss_sum = 0.0;
        for batch in batch_indices(train_set.len(), tc.batch_size, shuffle_seed) {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &train_set.samples[i]).collect();
            let parts: Vec<Result<(f64, Vec<Option<Vec<f64>>>)>> = samples
                .par_chunks(tc.micro_batch)
                .enumerate()
                .map(|(m, chunk)| {
                    let seed = derive_seed(tc.seed, &format!("dropout.{global}.{m}"));
                    micro_batch_grads(&params, config, chunk, samples.len(), seed)
                })
                .collect();
            let mut batch_loss = 0.0;
            let mut total: Vec<Option<Vec<f64>>> = Vec::new();
            for part in parts {
                let (l, grads) = part?;
                batch_loss += l;
                if total.is_empty() {
                    total = grads;
                    continue;
                }
                for (acc, g) in total.iter_mut().zip(grads) {
                    if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: batch_loss,
                    epoch,
                    step: global + 1,
                });
            }
            loss_sum += batch_loss * samples.len() as f64;
            for ((_, t), g) in params.named_mut().into_iter().zip(total) {
                if let Some(g) = g {
                    t.set_grad(g)?;
                }
            }
            state.lr = tc.schedule.lr_at(tc.lr, global, total_steps);
            adam_step(params.named_mut(), &mut state)?;
            global += 1;
        }
        if !params.all_finite() {
            return Err(Error::Numeric {
                op: "train",
                detail: format!("parameters became non-finite in epoch {epoch}"),
            });
        }

        let report = eval_set.map(|ev| evaluate(&params, config, ev)).transpose()?;
        let record = EpochRecord {
            epoch,
            step: state.step,
            lr: state.lr,
            loss: loss_sum / train_set.len() as f64,
            auc: report.as_ref().map(|r| r.auc.clone()),
            macro_auc: report.as_ref().and_then(|r| r.macro_auc),
        };
        on_epoch(&record);
        let improved = match (&best, record.macro_auc) {
            (None, _) => true,
            (Some(_), _) if eval_set.is_none() => true,
            (Some(b), Some(m)) => b.macro_auc.is_none_or(|bm| m > bm),
            (Some(_), None) => false,
        };
        if improved {
            best = Some(BestModel {
                params: params.clone(),
                state: state.clone(),
                epoch,
                macro_auc: record.macro_auc,
            });
        }
        log.push(record);
    }

    let best = best.unwrap_or_else(|| BestModel {
        params: params.clone(),
        state: state.clone(),
        epoch: 0,
        macro_auc: None,
    });
    Ok(TrainOutcome {
        params,
        state,
        log,
        best,
    })
}
