//! Time-budgeted surrogate generation with a configurable number of reverse
//! steps, IPC accounting, and the step-count sweep.
//!
//! Generation proceeds in batches, one class per batch, cycling classes from
//! class 0. Before each batch the generator predicts the batch cost (the
//! simulated cost, or the running mean of measured batches) and stops if it
//! would overrun the budget.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{decode_labeled, encode_labeled, LabeledSet, SURROGATE_MAGIC};
use crate::diffusion::{make_step_plan, reverse_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::evaluator::accuracy_gain;
use crate::model::{LatentCodec, NoisePredictor};
use crate::rng::derive_seed;

pub const DEFAULT_BUDGET_SECS: f64 = 600.0;
pub const DEFAULT_GEN_BATCH: usize = 8;
pub const DEFAULT_STEPS: usize = 10;

/// How batch durations are accounted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    /// Measured wall-clock time.
    Real,
    /// Every batch costs this many simulated seconds.
    FixedPerBatch(f64),
    /// A batch costs this many simulated seconds per reverse step.
    PerStep(f64),
}

impl CostModel {
    fn simulated_batch_cost(self, steps: usize) -> Option<f64> {
        match self {
            CostModel::Real => None,
            CostModel::FixedPerBatch(c) => Some(c),
            CostModel::PerStep(c) => Some(c * steps as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenBudget {
    pub budget_secs: f64,
    pub clock: CostModel,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for GenBudget {
    fn default() -> Self {
        Self {
            budget_secs: DEFAULT_BUDGET_SECS,
            clock: CostModel::Real,
            batch_size: DEFAULT_GEN_BATCH,
            steps: DEFAULT_STEPS,
        }
    }
}

impl GenBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget_secs >= 0.0 && self.budget_secs.is_finite()) {
            return Err(Error::invalid(format!(
                "budget must be finite and >= 0, got {}",
                self.budget_secs
            )));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("generation batch size must be at least 1"));
        }
        if let CostModel::FixedPerBatch(c) | CostModel::PerStep(c) = self.clock {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!(
                    "simulated cost must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Images-per-class: the floor and the exact reduced fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ipc {
    pub floor: u64,
    pub numerator: u64,
    pub denominator: u64,
}

impl Ipc {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

/// Renders as the reduced fraction, e.g. `24` or `41/2`.
impl fmt::Display for Ipc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denominator == 1 {
            write!(f, "{}", self.numerator)
        } else {
            write!(f, "{}/{}", self.numerator, self.denominator)
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn compute_ipc(n_samples: u64, n_classes: u64) -> Result<Ipc> {
    if n_classes == 0 {
        return Err(Error::invalid("IPC needs at least one class"));
    }
    let g = gcd(n_samples, n_classes).max(1);
    Ok(Ipc {
        floor: n_samples / n_classes,
        numerator: n_samples / g,
        denominator: n_classes / g,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetadata {
    pub steps: usize,
    pub budget_secs: f64,
    pub elapsed_secs: f64,
    pub mean_batch_secs: f64,
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clock: CostModel,
    pub per_class_counts: Vec<usize>,
    pub ipc: Ipc,
    /// Set when the budget could not accommodate a single batch.
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateDataset {
    pub set: LabeledSet,
    pub metadata: GenerationMetadata,
}

impl SurrogateDataset {
    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta =
            serde_json::to_string(&self.metadata).map_err(|e| Error::invalid(e.to_string()))?;
        encode_labeled(SURROGATE_MAGIC, &self.set, &meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (set, meta) = decode_labeled(SURROGATE_MAGIC, bytes)?;
        let metadata = serde_json::from_str(&meta).map_err(|e| Error::Format {
            offset: (bytes.len() - meta.len()) as u64,
            message: format!("bad metadata: {e}"),
        })?;
        Ok(Self { set, metadata })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Generates surrogate samples until the next batch would exceed the budget.
///
/// Batch `b` samples class `b mod num_classes` from a stream seeded by
/// `(seed, b)`, so the output depends only on the seed and the number of
/// batches that fit.
pub fn generate<P: NoisePredictor>(
    model: &P,
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    budget: &GenBudget,
    num_classes: usize,
    seed: u64,
) -> Result<SurrogateDataset> {
    budget.validate()?;
    if num_classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    if codec.latent_dim() != model.latent_dim() {
        return Err(Error::dim_mismatch(
            "codec latent",
            model.latent_dim(),
            codec.latent_dim(),
        ));
    }
    let plan = make_step_plan(schedule.total_steps(), budget.steps)?;
    let simulated = budget.clock.simulated_batch_cost(budget.steps);
    let mut set = LabeledSet::new(codec.data_dim(), num_classes)?;
    let mut elapsed = 0.0;
    let mut batches = 0usize;
    loop {
        let estimate = match simulated {
            Some(c) => c,
            None if batches == 0 => 0.0,
            None => elapsed / batches as f64,
        };
        if budget.budget_secs <= 0.0 || elapsed + estimate > budget.budget_secs {
            break;
        }
        let class = batches % num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, batches as u64));
        let started = Instant::now();
        for _ in 0..budget.batch_size {
            let z = reverse_sample(schedule, model, &plan, class, &mut rng)?;
            set.push(&codec.decode_slice(z.as_slice())?, class)?;
        }
        elapsed += simulated.unwrap_or_else(|| started.elapsed().as_secs_f64());
        batches += 1;
    }
    let per_class_counts = set.class_counts();
    let metadata = GenerationMetadata {
        steps: budget.steps,
        budget_secs: budget.budget_secs,
        elapsed_secs: elapsed,
        mean_batch_secs: if batches > 0 {
            elapsed / batches as f64
        } else {
            simulated.unwrap_or(0.0)
        },
        batches,
        batch_size: budget.batch_size,
        seed,
        clock: budget.clock,
        ipc: compute_ipc(set.len() as u64, num_classes as u64)?,
        per_class_counts,
        budget_exhausted: batches == 0,
    };
    Ok(SurrogateDataset { set, metadata })
}

/// One row of the step-count sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub batch_time_secs: f64,
    pub num_samples: usize,
    pub accuracy: f64,
    /// `1000 * accuracy / num_samples`, in 1e-3 percent per sample.
    pub acc_gain: f64,
}

pub const SWEEP_CSV_HEADER: &str =
    "diff_steps,batchtime_s,num_samples,accuracy_pct,acc_gain_1e-3pct_per_sample";

/// Generates under the same budget for every step count and scores each
/// surrogate with `eval`, which returns an accuracy in percent.
#[allow(clippy::too_many_arguments)]
pub fn sweep_steps<P, F>(
    model: &P,
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    budget: &GenBudget,
    step_list: &[usize],
    num_classes: usize,
    seed: u64,
    mut eval: F,
) -> Result<Vec<SweepRow>>
where
    P: NoisePredictor,
    F: FnMut(&SurrogateDataset) -> Result<f64>,
{
    if step_list.is_empty() {
        return Err(Error::invalid("empty step list"));
    }
    step_list
        .iter()
        .map(|&steps| {
            let b = GenBudget { steps, ..*budget };
            let surrogate = generate(model, schedule, codec, &b, num_classes, seed)?;
            if surrogate.is_empty() {
                return Err(Error::DegenerateData(format!(
                    "no samples fit the budget at {steps} steps"
                )));
            }
            let accuracy = eval(&surrogate)?;
            Ok(SweepRow {
                steps,
                batch_time_secs: surrogate.metadata.mean_batch_secs,
                num_samples: surrogate.len(),
                accuracy,
                acc_gain: accuracy_gain(accuracy, surrogate.len() as u64)?,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{},{:.4},{:.4}",
            r.steps, r.batch_time_secs, r.num_samples, r.accuracy, r.acc_gain
        )?;
    }
    Ok(())
}
