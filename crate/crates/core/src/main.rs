use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mmdd::config::{ClockKind, RunConfig};
use mmdd::data::{read_dataset, synth_dataset, write_dataset, DatasetInfo};
use mmdd::evaluator::evaluate_repeats;
use mmdd::generator::{generate, sweep_steps, write_sweep_csv, SurrogateDataset};
use mmdd::pipeline::{
    build_model, generation_seed, make_deterministic, run_pipeline, write_eval_csv,
};
use mmdd::trainer::{write_history_csv, Trainer};
use mmdd::{Checkpoint, Error};

#[derive(Parser)]
#[command(
    name = "mmdd",
    version,
    about = "Budgeted generative dataset distillation"
)]
struct Cli {
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration in `key = value` format.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the simulated clock so outputs are reproducible byte for byte.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the toy train and test splits.
    Synth {
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
    /// Train the denoiser and write a checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Training set; synthesized from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Per-step loss history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Generate a surrogate dataset under a time budget.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        budget_secs: Option<f64>,
        /// Fixed seconds per batch instead of the wall clock.
        #[arg(long)]
        simulated_batch_cost: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train classifiers on a surrogate set and score them on a test set.
    Evaluate {
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate and evaluate for several step counts under one budget.
    SweepSteps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        #[arg(long)]
        budget_secs: Option<f64>,
        /// Seconds per reverse step per batch instead of the wall clock.
        #[arg(long)]
        simulated_step_cost: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage and write all artifacts into a directory.
    Pipeline {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if cli.deterministic {
        make_deterministic(&mut cfg);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth {
            train_out,
            test_out,
        } => {
            let (train, test) = synth_dataset(&cfg.dataset)?;
            let info = |split: &str| DatasetInfo {
                split: split.into(),
                spec: Some(cfg.dataset.clone()),
            };
            write_dataset(&train_out, &train, &info("train"))?;
            write_dataset(&test_out, &test, &info("test"))?;
        }
        Command::Train { out, data, history } => {
            let train = match data {
                Some(p) => {
                    read_dataset(&p)
                        .with_context(|| format!("reading {}", p.display()))?
                        .0
                }
                None => synth_dataset(&cfg.dataset)?.0,
            };
            cfg.dataset.dim = train.dim();
            cfg.dataset.classes = train.num_classes();
            let (model, schedule, codec) = build_model(&cfg)?;
            let mut trainer = Trainer::new(model, schedule, codec, cfg.train.clone())?;
            trainer.run(&train, Some(&out))?;
            if let Some(p) = history {
                let mut w = output(Some(&p))?;
                write_history_csv(&trainer.history, &mut w)?;
                w.flush()?;
            }
        }
        Command::Generate {
            checkpoint,
            steps,
            budget_secs,
            simulated_batch_cost,
            out,
        } => {
            let ckpt = Checkpoint::read_file(&checkpoint)
                .with_context(|| format!("reading {}", checkpoint.display()))?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(b) = budget_secs {
                cfg.budget_secs = b;
            }
            if let Some(c) = simulated_batch_cost {
                cfg.clock = ClockKind::PerBatch;
                cfg.simulated_cost = c;
            }
            let classes = ckpt.model.config().num_classes;
            let surrogate = generate(
                &ckpt.model,
                &ckpt.schedule,
                &ckpt.codec,
                &cfg.gen_budget(),
                classes,
                generation_seed(&cfg),
            )?;
            surrogate.write_file(&out)?;
            eprintln!(
                "generated {} samples in {} batches (ipc {})",
                surrogate.len(),
                surrogate.metadata.batches,
                surrogate.metadata.ipc
            );
        }
        Command::Evaluate {
            surrogate,
            testset,
            epochs,
            repeats,
            out,
        } => {
            let sur = SurrogateDataset::read_file(&surrogate)
                .with_context(|| format!("reading {}", surrogate.display()))?;
            let (test, _) =
                read_dataset(&testset).with_context(|| format!("reading {}", testset.display()))?;
            if let Some(e) = epochs {
                cfg.eval.epochs = e;
            }
            if let Some(r) = repeats {
                cfg.eval.repeats = r;
            }
            let result = evaluate_repeats(&sur.set, &test, &cfg.eval)?;
            let mut w = output(out.as_deref())?;
            write_eval_csv(&result, &sur.metadata.ipc, &mut w)?;
            w.flush()?;
        }
        Command::SweepSteps {
            checkpoint,
            testset,
            steps,
            budget_secs,
            simulated_step_cost,
            out,
        } => {
            let ckpt = Checkpoint::read_file(&checkpoint)
                .with_context(|| format!("reading {}", checkpoint.display()))?;
            let (test, _) =
                read_dataset(&testset).with_context(|| format!("reading {}", testset.display()))?;
            if let Some(b) = budget_secs {
                cfg.budget_secs = b;
            }
            if let Some(c) = simulated_step_cost {
                cfg.clock = ClockKind::PerStep;
                cfg.simulated_cost = c;
            }
            let list = steps.unwrap_or_else(|| cfg.sweep_steps.clone());
            let classes = ckpt.model.config().num_classes;
            let eval = cfg.eval.clone();
            let rows = sweep_steps(
                &ckpt.model,
                &ckpt.schedule,
                &ckpt.codec,
                &cfg.gen_budget(),
                &list,
                classes,
                generation_seed(&cfg),
                |s| evaluate_repeats(&s.set, &test, &eval).map(|r| r.mean),
            )?;
            let mut w = output(out.as_deref())?;
            write_sweep_csv(&rows, &mut w)?;
            w.flush()?;
        }
        Command::Pipeline { out_dir } => {
            let report = run_pipeline(&cfg, &out_dir, cli.deterministic)?;
            eprintln!(
                "surrogate: {} samples, accuracy {:.2} +- {:.2}%",
                report.surrogate_samples, report.eval.mean, report.eval.std
            );
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::Format { .. }) => 3,
        Some(Error::NumericFailure { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
