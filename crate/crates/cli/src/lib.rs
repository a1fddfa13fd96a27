//! Command implementations behind the `ltvit` binary.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use ltvit_core::checkpoint::{transfer_params, Checkpoint};
use ltvit_core::data::{gen_synthetic, read_dataset, write_dataset, SyntheticConfig};
use ltvit_core::train::{evaluate, train, TrainOutcome};
use ltvit_core::viz::{attention_maps, quadrant_mass, write_pgm, Heatmap, Reduce};
use ltvit_core::{AttentionMode, Dataset, Error, EvalReport, ModelConfig, Parameters, Result, RunConfig};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train.log";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const MASSES_FILE: &str = "masses.txt";
pub const FRESH_LABELS_MSG: &str = "initialized label tokens fresh";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn gen_data(out: &Path, count: usize, seed: u64, cfg: &SyntheticConfig) -> Result<Dataset> {
    let ds = gen_synthetic(count, seed, cfg)?;
    write_dataset(&ds, out)?;
    Ok(ds)
}

/// Training and evaluation sets for a run: `eval_data` when set, otherwise
/// the trailing `val_fraction` of `data` (no evaluation set when it is 0).
pub fn load_split(run: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let data = run
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("no training data given (set `data` or pass --data)".into()))?;
    let ds = read_dataset(data)?;
    match &run.eval_data {
        Some(p) => Ok((ds, Some(read_dataset(p)?))),
        None if run.val_fraction > 0.0 => {
            let (train, held) = ds.split_tail(run.val_fraction)?;
            Ok((train, (!held.is_empty()).then_some(held)))
        }
        None => Ok((ds, None)),
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub outcome: TrainOutcome,
    /// Set when `--init` found no label tokens in the source checkpoint.
    pub fresh_labels: bool,
}

/// Trains one model as described by `run` and, when `run.out` is set, writes
/// the config echo, the per-epoch log and the best and last checkpoints.
/// Progress lines go to `progress`.
pub fn run_training(run: &RunConfig, init: Option<&Path>, progress: &mut dyn Write) -> Result<RunSummary> {
    run.validate()?;
    let (train_set, eval_set) = load_split(run)?;
    let (params, fresh_labels) = match init {
        None => (Parameters::init(&run.model, run.train.seed)?, false),
        Some(path) => {
            let source = Checkpoint::load(path)?;
            let (params, fresh) = transfer_params(&source.params, &run.model, run.train.seed)?;
            if fresh {
                let _ = writeln!(progress, "{FRESH_LABELS_MSG}");
            }
            (params, fresh)
        }
    };
    let mut log = None;
    if let Some(dir) = &run.out {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, run.to_text()).map_err(io(&cfg_path))?;
        let log_path = dir.join(LOG_FILE);
        log = Some((File::create(&log_path).map_err(io(&log_path))?, log_path));
    }
    let mut log_err = None;
    let outcome = train(&run.model, &run.train, params, None, &train_set, eval_set.as_ref(), |rec| {
        let line = rec.to_json();
        let _ = writeln!(progress, "{line}");
        if let Some((f, p)) = &mut log {
            if let Err(e) = writeln!(f, "{line}") {
                log_err.get_or_insert(io(p)(e));
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    if let Some(dir) = &run.out {
        let stored = run.without_paths();
        let best = Checkpoint {
            run: stored.clone(),
            params: outcome.best.params.clone(),
            step: outcome.best.state.step,
            optim: Some(outcome.best.state.clone()),
        };
        best.save(&dir.join(BEST_CKPT))?;
        let last = Checkpoint {
            run: stored,
            params: outcome.params.clone(),
            step: outcome.state.step,
            optim: Some(outcome.state.clone()),
        };
        last.save(&dir.join(LAST_CKPT))?;
    }
    Ok(RunSummary { outcome, fresh_labels })
}

pub fn eval_checkpoint(checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = read_dataset(data)?;
    evaluate(&ck.params, &ck.run.model, &ds)
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string(report).expect("reports always serialize")
}

/// Parses `all` or a comma-separated list of mode names.
pub fn parse_modes(list: &str) -> Result<Vec<AttentionMode>> {
    if list.trim() == "all" {
        return Ok(AttentionMode::ALL.to_vec());
    }
    let mut modes = Vec::new();
    for part in list.split(',') {
        let m: AttentionMode = part.parse()?;
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    Ok(modes)
}

/// The run configuration for `mode` derived from a shared base run. Modes
/// with label tokens keep the base's `lt_blocks`, or the default split when
/// the base is a baseline run.
pub fn config_for_mode(base: &RunConfig, mode: AttentionMode) -> RunConfig {
    let lt = match base.model.lt_blocks {
        0 => ModelConfig::default().lt_blocks,
        n => n,
    };
    RunConfig {
        model: base.model.with_mode(mode, lt),
        out: base.out.as_ref().map(|d| d.join(mode.as_str())),
        ..base.clone()
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub mode: AttentionMode,
    /// Macro AUC of the selected (best) epoch.
    pub macro_auc: Option<f64>,
    pub best_epoch: usize,
    pub final_macro_auc: Option<f64>,
}

/// Trains one model per mode from the same seed. With `base.out` set each
/// mode gets its own run directory below it.
pub fn ablate(base: &RunConfig, modes: &[AttentionMode], progress: &mut dyn Write) -> Result<Vec<(AblationRow, RunSummary)>> {
    modes
        .iter()
        .map(|&mode| {
            let run = config_for_mode(base, mode);
            let _ = writeln!(progress, "# mode {mode}");
            let summary = run_training(&run, None, progress)?;
            let best = &summary.outcome.best;
            let row = AblationRow {
                mode,
                macro_auc: best.macro_auc,
                best_epoch: best.epoch,
                final_macro_auc: summary.outcome.log.last().and_then(|r| r.macro_auc),
            };
            Ok((row, summary))
        })
        .collect()
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"))
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<24} {:>9} {:>10} {:>10}\n", "mode", "macro_auc", "best_epoch", "final_auc");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<24} {:>9} {:>10} {:>10}",
            r.mode.as_str(),
            fmt_auc(r.macro_auc),
            r.best_epoch,
            fmt_auc(r.final_macro_auc)
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct AttnMapRequest {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub sample: usize,
    /// `None` exports every label (none at all for a baseline model).
    pub label: Option<usize>,
    pub out: PathBuf,
    pub reduce: Reduce,
    pub blur: usize,
}

/// One exported map with its quadrant masses (TL, TR, BL, BR).
#[derive(Clone, Debug)]
pub struct ExportedMap {
    pub name: String,
    pub masses: [f64; 4],
}

fn masses(map: &Heatmap) -> Result<[f64; 4]> {
    Ok([quadrant_mass(map, 0)?, quadrant_mass(map, 1)?, quadrant_mass(map, 2)?, quadrant_mass(map, 3)?])
}

/// Writes `cls.pgm`, `lbl_k.pgm` for the requested labels and a side-car
/// listing each map's quadrant masses.
pub fn attnmap(req: &AttnMapRequest) -> Result<Vec<ExportedMap>> {
    let ck = Checkpoint::load(&req.checkpoint)?;
    let config = &ck.run.model;
    let c = config.labels;
    let labels: Vec<usize> = match (config.mode.has_label_tokens(), req.label) {
        (false, Some(_)) => {
            return Err(Error::Config(
                "a baseline checkpoint has no label tokens; drop --label to export the CLS map".into(),
            ))
        }
        (false, None) => Vec::new(),
        (true, Some(k)) if k >= c => return Err(Error::Config(format!("label {k} out of range 0..{c}"))),
        (true, Some(k)) => vec![k],
        (true, None) => (0..c).collect(),
    };
    let ds = read_dataset(&req.data)?;
    let sample = ds.samples.get(req.sample).ok_or_else(|| {
        Error::Config(format!("sample {} out of range 0..{}", req.sample, ds.len()))
    })?;
    if (ds.height, ds.width, ds.channels) != (config.height, config.width, config.channels) {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{}, the checkpoint expects {}x{}x{}",
            ds.height, ds.width, ds.channels, config.height, config.width, config.channels
        )));
    }
    fs::create_dir_all(&req.out).map_err(io(&req.out))?;

    let mut exported = Vec::new();
    let mut export = |name: String, map: &Heatmap| -> Result<()> {
        write_pgm(&map.normalized(), &req.out.join(format!("{name}.pgm")))?;
        exported.push(ExportedMap { masses: masses(map)?, name });
        Ok(())
    };
    let cls = attention_maps(&ck.params, config, &[&sample.image], None, req.reduce, req.blur)?;
    export("cls".into(), &cls[0].cls)?;
    for &k in &labels {
        let maps = attention_maps(&ck.params, config, &[&sample.image], Some(k), req.reduce, req.blur)?;
        export(format!("lbl_{k}"), maps[0].label.as_ref().expect("label map requested"))?;
    }

    let mut text = format!(
        "# sample {} reduce {} blur {}\n# map q0_top_left q1_top_right q2_bottom_left q3_bottom_right\n",
        req.sample, req.reduce, req.blur
    );
    for m in &exported {
        let _ = writeln!(text, "{} {} {} {} {}", m.name, m.masses[0], m.masses[1], m.masses[2], m.masses[3]);
    }
    let side = req.out.join(MASSES_FILE);
    fs::write(&side, text).map_err(io(&side))?;
    Ok(exported)
}
