//! End-to-end run: synthesize data, train the denoiser, generate a surrogate
//! set under the time budget, score it, and sweep step counts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ClockKind, CodecKind, RunConfig};
use crate::data::{synth_dataset, write_dataset, DatasetInfo, LabeledSet};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::evaluator::{evaluate_repeats, EvalConfig, EvalResult};
use crate::generator::{generate, sweep_steps, write_sweep_csv, Ipc, SurrogateDataset, SweepRow};
use crate::model::{DenoiserModel, LatentCodec};
use crate::rng::derive_seed;
use crate::trainer::{write_history_csv, Trainer};

pub const TRAIN_FILE: &str = "train.dset";
pub const TEST_FILE: &str = "test.dset";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const SURROGATE_FILE: &str = "surrogate.surd";
pub const EVAL_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const REPORT_FILE: &str = "report.json";

/// Fresh model, schedule and codec for a run configuration.
pub fn build_model(cfg: &RunConfig) -> Result<(DenoiserModel, NoiseSchedule, LatentCodec)> {
    let dim = cfg.dataset.dim;
    let schedule = NoiseSchedule::linear(cfg.total_steps, cfg.beta_min, cfg.beta_max)?;
    let codec = match cfg.model.codec {
        CodecKind::Identity => LatentCodec::identity(dim),
        CodecKind::Orthonormal => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
            LatentCodec::random_orthonormal(dim, &mut rng)?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let model = DenoiserModel::new(
        cfg.denoiser_config(codec.latent_dim(), cfg.dataset.classes),
        &mut rng,
    )?;
    Ok((model, schedule, codec))
}

/// Seed used for surrogate generation in a run.
pub fn generation_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, 4)
}

/// Replaces the wall clock with the simulated per-step cost so that no
/// timing-dependent value reaches the outputs.
pub fn make_deterministic(cfg: &mut RunConfig) {
    if cfg.clock == ClockKind::Real {
        cfg.clock = ClockKind::PerStep;
    }
}

/// Writes per-repeat accuracies followed by a summary block.
pub fn write_eval_csv<W: Write>(result: &EvalResult, ipc: &Ipc, mut out: W) -> Result<()> {
    writeln!(out, "repeat,accuracy")?;
    for (r, a) in result.accuracies.iter().enumerate() {
        writeln!(out, "{r},{a:.4}")?;
    }
    writeln!(out, "mean,std,samples,ipc,gain")?;
    writeln!(
        out,
        "{:.4},{:.4},{},{},{:.4}",
        result.mean, result.std, result.samples, ipc, result.gain
    )?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_steps: usize,
    pub final_loss: Option<f64>,
    pub surrogate_samples: usize,
    pub ipc: Ipc,
    pub eval: EvalResult,
    pub sweep: Vec<SweepRow>,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn score(surrogate: &SurrogateDataset, test: &LabeledSet, eval: &EvalConfig) -> Result<EvalResult> {
    evaluate_repeats(&surrogate.set, test, eval)
}

/// Runs every stage and writes its artifacts into `out_dir`.
pub fn run_pipeline(
    cfg: &RunConfig,
    out_dir: &Path,
    deterministic: bool,
) -> Result<PipelineReport> {
    let mut cfg = cfg.clone();
    if deterministic {
        make_deterministic(&mut cfg);
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let path = |name: &str| -> PathBuf { out_dir.join(name) };

    let (train_set, test_set) = synth_dataset(&cfg.dataset)?;
    let info = |split: &str| DatasetInfo {
        split: split.into(),
        spec: Some(cfg.dataset.clone()),
    };
    write_dataset(&path(TRAIN_FILE), &train_set, &info("train"))?;
    write_dataset(&path(TEST_FILE), &test_set, &info("test"))?;

    let (model, schedule, codec) = build_model(&cfg)?;
    let mut trainer = Trainer::new(model, schedule, codec, cfg.train.clone())?;
    trainer.run(&train_set, Some(&path(CHECKPOINT_FILE)))?;
    let mut history = create(out_dir, HISTORY_FILE)?;
    write_history_csv(&trainer.history, &mut history)?;
    history.flush()?;

    let classes = cfg.dataset.classes;
    let seed = generation_seed(&cfg);
    let budget = cfg.gen_budget();
    let surrogate = generate(
        &trainer.model,
        &trainer.schedule,
        &trainer.codec,
        &budget,
        classes,
        seed,
    )?;
    surrogate.write_file(&path(SURROGATE_FILE))?;

    let eval = score(&surrogate, &test_set, &cfg.eval)?;
    let mut eval_out = create(out_dir, EVAL_FILE)?;
    write_eval_csv(&eval, &surrogate.metadata.ipc, &mut eval_out)?;
    eval_out.flush()?;

    let sweep = if cfg.sweep_steps.is_empty() {
        Vec::new()
    } else {
        let rows = sweep_steps(
            &trainer.model,
            &trainer.schedule,
            &trainer.codec,
            &budget,
            &cfg.sweep_steps,
            classes,
            seed,
            |s| score(s, &test_set, &cfg.eval).map(|r| r.mean),
        )?;
        let mut out = create(out_dir, SWEEP_FILE)?;
        write_sweep_csv(&rows, &mut out)?;
        out.flush()?;
        rows
    };

    let report = PipelineReport {
        train_samples: train_set.len(),
        test_samples: test_set.len(),
        train_steps: trainer.history.len(),
        final_loss: trainer.history.last().map(|b| b.l_total),
        surrogate_samples: surrogate.len(),
        ipc: surrogate.metadata.ipc,
        eval,
        sweep,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| crate::error::Error::invalid(e.to_string()))?;
    fs::write(path(REPORT_FILE), json + "\n")?;
    Ok(report)
}
