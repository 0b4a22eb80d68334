//! Training loop for the min-max diffusion objective.
//!
//! Each step encodes the batch, samples a timestep and Gaussian noise per
//! sample, predicts the noise, and minimises
//! `l_diff + lambda_r * l_r + lambda_d * l_d` with Adam. The feature buffers
//! are updated only after the parameter update, so the loss at step `k` sees
//! features from steps `< k` only.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::array::all_finite;
use crate::checkpoint::Checkpoint;
use crate::data::LabeledSet;
use crate::diffusion::{forward_noise_slice, NoiseSchedule};
use crate::error::{Error, Result};
use crate::minmax::{
    combined_loss, BufferScope, FeatureBuffers, LossBreakdown, LossSample, DEFAULT_CAPACITY,
    DEFAULT_LAMBDA_D, DEFAULT_LAMBDA_R,
};
use crate::model::{DenoiserModel, LatentCodec};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_r: f64,
    pub lambda_d: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Steps during which the min-max terms are weighted zero.
    pub warmup_steps: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    pub buffer_capacity: usize,
    pub buffer_scope: BufferScope,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 8,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_r: DEFAULT_LAMBDA_R,
            lambda_d: DEFAULT_LAMBDA_D,
            grad_clip: Some(10.0),
            warmup_steps: 0,
            checkpoint_every: 0,
            buffer_capacity: DEFAULT_CAPACITY,
            buffer_scope: BufferScope::PerClass,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        if !(self.lambda_r >= 0.0 && self.lambda_d >= 0.0) {
            return Err(Error::invalid("lambda_r and lambda_d must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::invalid(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        if self.buffer_capacity == 0 {
            return Err(Error::invalid("buffer capacity must be positive"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn from_config(num_params: usize, cfg: &TrainConfig) -> Self {
        Self::new(
            num_params,
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        )
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Applies one update. `params` is the flat parameter vector split into
    /// consecutive slices; their total length must match `grad`.
    pub fn update(&mut self, params: &mut [&mut [f64]], grad: &[f64]) -> Result<()> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        if total != grad.len() || grad.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                total,
                grad.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let flat = params.iter_mut().flat_map(|s| s.iter_mut());
        for (((p, g), m), v) in flat.zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// The random draws of one training sample, fixed so the objective becomes a
/// deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub z0: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub class: usize,
}

/// Weights of the three loss components in a gradient request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub diff: f64,
    pub r: f64,
    pub d: f64,
}

#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub breakdown: LossBreakdown,
    /// Gradient of `diff * l_diff + r * l_r + d * l_d` over the flat parameters.
    pub grad: Vec<f64>,
    /// Predicted clean latents `z_t - eps_hat`, one per sample.
    pub z_hat: Vec<Vec<f64>>,
}

/// Evaluates the training objective on fixed draws and backpropagates the
/// requested weighting of its components.
pub fn evaluate_batch(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    buffers: &FeatureBuffers,
    samples: &[PreparedSample],
    lambda_r: f64,
    lambda_d: f64,
    weights: TermWeights,
) -> Result<BatchEvaluation> {
    let mut tapes = Vec::with_capacity(samples.len());
    let mut z_hat = Vec::with_capacity(samples.len());
    for s in samples {
        if s.t >= schedule.total_steps() {
            return Err(Error::invalid(format!("timestep {} outside schedule", s.t)));
        }
        let z_t = forward_noise_slice(schedule, &s.z0, s.t, &s.eps);
        let tape = model.forward_tape(&z_t, s.t, s.class)?;
        z_hat.push(
            z_t.iter()
                .zip(tape.output())
                .map(|(z, e)| z - e)
                .collect::<Vec<f64>>(),
        );
        tapes.push(tape);
    }
    let batch: Vec<LossSample> = samples
        .iter()
        .zip(&tapes)
        .zip(&z_hat)
        .map(|((s, tape), zh)| LossSample {
            eps: &s.eps,
            eps_hat: tape.output(),
            z_hat: zh,
            class: s.class,
        })
        .collect();
    let (breakdown, g) = combined_loss(&batch, buffers, lambda_r, lambda_d)?;
    let mut grad = vec![0.0; model.num_params()];
    for (i, tape) in tapes.iter().enumerate() {
        // z_hat = z_t - eps_hat, so d/d eps_hat of the min-max terms is the
        // negated z_hat gradient.
        let upstream: Vec<f64> = (0..g.diff_wrt_eps_hat[i].len())
            .map(|j| {
                weights.diff * g.diff_wrt_eps_hat[i][j]
                    - weights.r * g.r_wrt_z_hat[i][j]
                    - weights.d * g.d_wrt_z_hat[i][j]
            })
            .collect();
        model.backward_tape(tape, &upstream, &mut grad)?;
    }
    Ok(BatchEvaluation {
        breakdown,
        grad,
        z_hat,
    })
}

/// Draws `t ~ U[0, T)` and `eps ~ N(0, I)` for each encoded batch element.
pub fn prepare_batch<R: Rng + ?Sized>(
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    batch: &[(&[f64], usize)],
    rng: &mut R,
) -> Result<Vec<PreparedSample>> {
    batch
        .iter()
        .map(|&(x, class)| {
            let z0 = codec.encode_slice(x)?;
            let t = rng.random_range(0..schedule.total_steps());
            let eps = (0..z0.len()).map(|_| StandardNormal.sample(rng)).collect();
            Ok(PreparedSample { z0, t, eps, class })
        })
        .collect()
}

fn clip_global_norm(grad: &mut [f64], max_norm: f64) {
    let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Hook invoked after the loss of step `k` is computed and before the
/// buffers receive batch `k`.
pub type BufferObserver<'a> = dyn FnMut(u64, &FeatureBuffers, &LossBreakdown) + 'a;

/// One optimisation step. Buffer entries pushed here are tagged with the
/// step index (the optimizer's update count before this step).
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    model: &mut DenoiserModel,
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    buffers: &mut FeatureBuffers,
    batch: &[(&[f64], usize)],
    optimizer: &mut Adam,
    config: &TrainConfig,
    rng: &mut R,
    observer: Option<&mut BufferObserver<'_>>,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    if codec.latent_dim() != model.config().latent_dim {
        return Err(Error::dim_mismatch(
            "codec latent",
            model.config().latent_dim,
            codec.latent_dim(),
        ));
    }
    let step = optimizer.steps();
    let (lambda_r, lambda_d) = if step < config.warmup_steps {
        (0.0, 0.0)
    } else {
        (config.lambda_r, config.lambda_d)
    };
    let samples = prepare_batch(codec, schedule, batch, rng)?;
    let weights = TermWeights {
        diff: 1.0,
        r: lambda_r,
        d: lambda_d,
    };
    let mut eval = evaluate_batch(
        model, schedule, buffers, &samples, lambda_r, lambda_d, weights,
    )?;
    let bd = &eval.breakdown;
    if ![bd.l_diff, bd.l_r, bd.l_d, bd.l_total]
        .iter()
        .all(|v| v.is_finite())
        || !all_finite(&eval.grad)
    {
        return Err(Error::NumericFailure {
            step: step as usize,
            message: format!(
                "non-finite loss or gradient (l_diff={}, l_r={}, l_d={})",
                bd.l_diff, bd.l_r, bd.l_d
            ),
        });
    }
    if let Some(c) = config.grad_clip {
        clip_global_norm(&mut eval.grad, c);
    }
    if let Some(obs) = observer {
        obs(step, buffers, &eval.breakdown);
    }
    optimizer.update(&mut model.param_slices_mut(), &eval.grad)?;
    buffers
        .real
        .push_batch(samples.iter().map(|s| (s.z0.as_slice(), s.class)), step)?;
    buffers.synthesized.push_batch(
        eval.z_hat
            .iter()
            .zip(&samples)
            .map(|(z, s)| (z.as_slice(), s.class)),
        step,
    )?;
    Ok(eval.breakdown)
}

/// Shuffles each class independently, then interleaves the classes
/// round-robin so consecutive batches mix classes.
pub fn stratified_order<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        per_class[c].push(i);
    }
    for bucket in &mut per_class {
        bucket.shuffle(rng);
    }
    let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(labels.len());
    for k in 0..longest {
        for bucket in &per_class {
            if let Some(&i) = bucket.get(k) {
                order.push(i);
            }
        }
    }
    order
}

/// Owns the mutable training state.
pub struct Trainer<'a> {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
    pub config: TrainConfig,
    pub optimizer: Adam,
    pub buffers: FeatureBuffers,
    pub history: Vec<LossBreakdown>,
    rng: ChaCha8Rng,
    observer: Option<Box<BufferObserver<'a>>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: DenoiserModel,
        schedule: NoiseSchedule,
        codec: LatentCodec,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if model.config().total_steps != schedule.total_steps() {
            return Err(Error::invalid(format!(
                "model trained for T={} but schedule has T={}",
                model.config().total_steps,
                schedule.total_steps()
            )));
        }
        let dim = model.config().latent_dim;
        Ok(Self {
            buffers: FeatureBuffers::new(config.buffer_scope, config.buffer_capacity, dim)?,
            optimizer: Adam::from_config(model.num_params(), &config),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1)),
            history: Vec::new(),
            observer: None,
            model,
            schedule,
            codec,
            config,
        })
    }

    pub fn set_observer(&mut self, f: impl FnMut(u64, &FeatureBuffers, &LossBreakdown) + 'a) {
        self.observer = Some(Box::new(f));
    }

    pub fn step(&mut self, batch: &[(&[f64], usize)]) -> Result<LossBreakdown> {
        let bd = train_step(
            &mut self.model,
            &self.schedule,
            &self.codec,
            &mut self.buffers,
            batch,
            &mut self.optimizer,
            &self.config,
            &mut self.rng,
            self.observer.as_deref_mut(),
        )?;
        self.history.push(bd.clone());
        Ok(bd)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            schedule: self.schedule.clone(),
            codec: self.codec.clone(),
        }
    }

    /// Runs `epochs * ceil(N / batch_size)` steps, writing a checkpoint to
    /// `checkpoint_path` periodically and at the end.
    pub fn run(&mut self, data: &LabeledSet, checkpoint_path: Option<&Path>) -> Result<()> {
        let c = self.model.config().num_classes;
        if data.num_classes() != c {
            return Err(Error::invalid(format!(
                "dataset has {} classes, model expects {c}",
                data.num_classes()
            )));
        }
        let counts = data.class_counts();
        if let Some(missing) = counts.iter().position(|&n| n == 0) {
            return Err(Error::DegenerateData(format!(
                "class {missing} has no training samples"
            )));
        }
        for _ in 0..self.config.epochs {
            let order = stratified_order(data.labels(), c, &mut self.rng);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<(&[f64], usize)> = chunk
                    .iter()
                    .map(|&i| (data.sample(i), data.labels()[i]))
                    .collect();
                self.step(&batch)?;
                let every = self.config.checkpoint_every;
                if let Some(path) = checkpoint_path {
                    if every > 0 && self.optimizer.steps().is_multiple_of(every) {
                        self.checkpoint().write_file(path)?;
                    }
                }
            }
        }
        if let Some(path) = checkpoint_path {
            self.checkpoint().write_file(path)?;
        }
        Ok(())
    }
}

/// Convenience wrapper around [`Trainer`].
pub fn train(
    model: DenoiserModel,
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    data: &LabeledSet,
    config: &TrainConfig,
) -> Result<(DenoiserModel, Vec<LossBreakdown>)> {
    let mut trainer = Trainer::new(model, schedule.clone(), codec.clone(), config.clone())?;
    trainer.run(data, None)?;
    Ok((trainer.model, trainer.history))
}

pub fn write_history_csv<W: Write>(history: &[LossBreakdown], mut out: W) -> Result<()> {
    writeln!(out, "step,l_diff,l_r,l_d,l_total")?;
    for (k, b) in history.iter().enumerate() {
        writeln!(out, "{k},{},{},{},{}", b.l_diff, b.l_r, b.l_d, b.l_total)?;
    }
    Ok(())
}
