use std::io::{stderr, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use ltvit_cli::{ablate, ablation_table, attnmap, eval_checkpoint, gen_data, parse_modes, report_json, run_training, AttnMapRequest};
use ltvit_core::data::SyntheticConfig;
use ltvit_core::viz::Reduce;
use ltvit_core::{Result, RunConfig};

/// Label-token vision transformer: synthetic data, training, ablations and attention maps.
#[derive(Parser)]
#[command(name = "ltvit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-label dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        labels: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train one model; writes config.txt, train.log, best.ckpt and last.ckpt.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to take backbone weights from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Print the evaluation report of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one model per attention mode and print a comparison table.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// `all` or a comma-separated list, e.g. `baseline,one_way`.
        #[arg(long, default_value = "all")]
        modes: String,
    },
    /// Export CLS and label-token attention heatmaps for one sample.
    Attnmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Label to export; every label when omitted.
        #[arg(long)]
        label: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// `mean` over label-token blocks or `last` block only.
        #[arg(long, default_value = "mean")]
        reduce: Reduce,
        /// Box-blur radius in pixels.
        #[arg(long, default_value_t = 2)]
        blur: usize,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// key = value run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        run.data = self.data.or(run.data);
        run.eval_data = self.eval_data.or(run.eval_data);
        run.out = self.out.or(run.out);
        run.validate()?;
        Ok(run)
    }
}

fn execute(command: Command) -> Result<()> {
    let mut err = stderr();
    match command {
        Command::GenData {
            out,
            count,
            seed,
            labels,
            size,
            channels,
            noise,
        } => {
            let cfg = SyntheticConfig {
                height: size,
                width: size,
                channels,
                labels,
                noise_std: noise,
            };
            let ds = gen_data(&out, count, seed, &cfg)?;
            eprintln!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train { run, init } => {
            let run = run.resolve()?;
            let summary = run_training(&run, init.as_deref(), &mut err)?;
            let best = &summary.outcome.best;
            match best.macro_auc {
                Some(a) => println!("best epoch {} macro AUC {a:.4}", best.epoch),
                None => println!("finished {} epochs (no evaluation set)", best.epoch),
            }
        }
        Command::Eval { checkpoint, data } => {
            println!("{}", report_json(&eval_checkpoint(&checkpoint, &data)?));
        }
        Command::Ablate { run, modes } => {
            let run = run.resolve()?;
            let modes = parse_modes(&modes)?;
            let rows: Vec<_> = ablate(&run, &modes, &mut err)?.into_iter().map(|(row, _)| row).collect();
            print!("{}", ablation_table(&rows));
        }
        Command::Attnmap {
            checkpoint,
            data,
            sample,
            label,
            out,
            reduce,
            blur,
        } => {
            let maps = attnmap(&AttnMapRequest {
                checkpoint,
                data,
                sample,
                label,
                out: out.clone(),
                reduce,
                blur,
            })?;
            for m in maps {
                println!("{}.pgm masses {:.4} {:.4} {:.4} {:.4}", m.name, m.masses[0], m.masses[1], m.masses[2], m.masses[3]);
            }
        }
    }
    let _ = err.flush();
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
