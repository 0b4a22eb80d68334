//! Noise schedule, forward noising, clean-latent prediction, and the
//! deterministic respaced reverse sampler.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::array::{all_finite, DenseArray};
use crate::error::{Error, Result};
use crate::model::{Condition, DenoiserModel, NoisePredictor};

pub const DEFAULT_TOTAL_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 2e-2;

/// Linear beta schedule and its cumulative signal retention
/// `gamma_t = prod_{s <= t} (1 - beta_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    gammas: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TOTAL_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(total_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..total_steps)
            .map(|t| {
                if total_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * t as f64 / (total_steps - 1) as f64
                }
            })
            .collect();
        let gammas = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta_min,
            beta_max,
            betas,
            gammas,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gammas[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.total_steps() {
            return Err(Error::invalid(format!(
                "timestep {t} out of range [0, {})",
                self.total_steps()
            )));
        }
        Ok(())
    }
}

/// Descending timestep indices visited by the sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    timesteps: Vec<usize>,
}

impl StepPlan {
    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }
}

/// Uniformly respaced plan of `steps` indices anchored at `T - 1`.
///
/// Entry `i` is `floor((S - i) * T / S) - 1`, so the first entry is `T - 1`,
/// the last is `floor(T / S) - 1`, and when `S` divides `T` the spacing is
/// exactly `T / S`. A plan with `S / k` steps visits every `k`-th entry of
/// the `S`-step plan.
pub fn make_step_plan(total_steps: usize, steps: usize) -> Result<StepPlan> {
    if steps == 0 || steps > total_steps {
        return Err(Error::invalid(format!(
            "step count {steps} must lie in [1, {total_steps}]"
        )));
    }
    let timesteps = (0..steps)
        .map(|i| ((steps - i) * total_steps) / steps - 1)
        .collect();
    Ok(StepPlan { timesteps })
}

/// `z_t = sqrt(gamma_t) z0 + sqrt(1 - gamma_t) eps`.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    z0: &DenseArray,
    t: usize,
    eps: &DenseArray,
) -> Result<DenseArray> {
    z0.check_same_shape(eps)?;
    schedule.check_t(t)?;
    let data = forward_noise_slice(schedule, z0.as_slice(), t, eps.as_slice());
    DenseArray::new(z0.shape().to_vec(), data)
}

pub(crate) fn forward_noise_slice(
    schedule: &NoiseSchedule,
    z0: &[f64],
    t: usize,
    eps: &[f64],
) -> Vec<f64> {
    let g = schedule.gamma(t);
    let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}

/// Clean-latent estimate used by the min-max losses: `z_t - eps_hat`, with no
/// `1 / sqrt(gamma_t)` rescaling.
pub fn predict_clean(
    schedule: &NoiseSchedule,
    model: &DenoiserModel,
    z_t: &DenseArray,
    t: usize,
    cond: Condition,
) -> Result<DenseArray> {
    schedule.check_t(t)?;
    let eps_hat = crate::model::denoiser_forward(model, z_t, t, cond)?;
    let data = z_t
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .map(|(z, e)| z - e)
        .collect();
    DenseArray::new(z_t.shape().to_vec(), data)
}

/// Draws `z_T ~ N(0, I)` and runs [`reverse_sample_from`].
pub fn reverse_sample<P: NoisePredictor, R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    model: &P,
    plan: &StepPlan,
    class: usize,
    rng: &mut R,
) -> Result<DenseArray> {
    let start: Vec<f64> = (0..model.latent_dim())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    reverse_sample_from(schedule, model, plan, class, start)
}

/// Deterministic (eta = 0) reverse pass along `plan`.
///
/// At each visited `t` the clean estimate is the exact inversion
/// `x0 = (z_t - sqrt(1 - gamma_t) eps_hat) / sqrt(gamma_t)`; the next latent
/// is `sqrt(gamma_t') x0 + sqrt(1 - gamma_t') eps_hat`. The final step returns
/// `x0`.
pub fn reverse_sample_from<P: NoisePredictor>(
    schedule: &NoiseSchedule,
    model: &P,
    plan: &StepPlan,
    class: usize,
    start: Vec<f64>,
) -> Result<DenseArray> {
    if start.len() != model.latent_dim() {
        return Err(Error::dim_mismatch(
            "sampler start",
            model.latent_dim(),
            start.len(),
        ));
    }
    let ts = plan.timesteps();
    if let Some(&bad) = ts.iter().find(|&&t| t >= schedule.total_steps()) {
        return Err(Error::invalid(format!(
            "plan timestep {bad} exceeds schedule length {}",
            schedule.total_steps()
        )));
    }
    let mut z = start;
    for (i, &t) in ts.iter().enumerate() {
        let eps_hat = model.predict_noise(&z, t, class)?;
        let g = schedule.gamma(t);
        let (sg, sn) = (g.sqrt(), (1.0 - g).sqrt());
        let x0: Vec<f64> = z
            .iter()
            .zip(&eps_hat)
            .map(|(zi, ei)| (zi - sn * ei) / sg)
            .collect();
        if !all_finite(&x0) {
            return Err(Error::NumericFailure {
                step: i,
                message: format!("non-finite clean estimate at t={t}"),
            });
        }
        match ts.get(i + 1) {
            None => return DenseArray::vector(x0),
            Some(&next) => {
                let gn = schedule.gamma(next);
                let (a, b) = (gn.sqrt(), (1.0 - gn).sqrt());
                z = x0
                    .iter()
                    .zip(&eps_hat)
                    .map(|(x, e)| a * x + b * e)
                    .collect();
                if !all_finite(&z) {
                    return Err(Error::NumericFailure {
                        step: i,
                        message: format!("non-finite latent moving to t={next}"),
                    });
                }
            }
        }
    }
    unreachable!("plans hold at least one step")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_schedule_is_strictly_decreasing() {
        let s = NoiseSchedule::default();
        let g = s.gammas();
        assert_eq!(g.len(), 1000);
        assert!(g
            .windows(2)
            .all(|w| 0.0 < w[1] && w[1] < w[0] && w[0] < 1.0));
        assert!(g[0] > 0.99);
        assert!(g[999] < 0.01);
        let mut acc = 1.0;
        for (t, b) in s.betas().iter().enumerate() {
            acc *= 1.0 - b;
            assert!((acc - g[t]).abs() < 1e-12);
        }
        assert_eq!(s.betas()[0], 1e-4);
        assert!((s.betas()[999] - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(NoiseSchedule::linear(0, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn step_plans() {
        let p = make_step_plan(1000, 10).unwrap();
        assert_eq!(
            p.timesteps(),
            &[999, 899, 799, 699, 599, 499, 399, 299, 199, 99]
        );
        assert_eq!(make_step_plan(4, 4).unwrap().timesteps(), &[3, 2, 1, 0]);
        assert_eq!(make_step_plan(1000, 1).unwrap().timesteps(), &[999]);
        assert!(make_step_plan(1000, 0).is_err());
        assert!(make_step_plan(10, 11).is_err());
    }

    #[test]
    fn coarse_plans_are_subsets() {
        for (s, k) in [(30, 3), (10, 2), (30, 6), (12, 4)] {
            let fine = make_step_plan(1000, s).unwrap();
            let coarse = make_step_plan(1000, s / k).unwrap();
            let picked: Vec<usize> = fine.timesteps().iter().step_by(k).copied().collect();
            assert_eq!(coarse.timesteps(), picked.as_slice());
        }
    }

    #[test]
    fn plan_invariants_hold_for_all_sizes() {
        for total in [1, 7, 10, 64, 1000] {
            for steps in 1..=total {
                let p = make_step_plan(total, steps).unwrap();
                let ts = p.timesteps();
                assert_eq!(ts.len(), steps);
                assert_eq!(ts[0], total - 1);
                assert!(ts.windows(2).all(|w| w[0] > w[1]));
                assert!((*ts.last().unwrap() as f64) < total as f64 / steps as f64);
            }
        }
    }

    #[test]
    fn forward_noise_limits() {
        let s = NoiseSchedule::default();
        let z0 = DenseArray::vector(vec![1.5, -2.0, 0.3]).unwrap();
        let eps = DenseArray::vector(vec![0.5, 1.0, -1.2]).unwrap();
        let zt = forward_noise(&s, &z0, 0, &eps).unwrap();
        assert!(zt.max_abs_diff(&z0).unwrap() < 1e-2 * z0.norm());

        let zero = DenseArray::zeros(vec![3]);
        let t = 400;
        let zt = forward_noise(&s, &zero, t, &eps).unwrap();
        let b = (1.0 - s.gamma(t)).sqrt();
        for (a, e) in zt.as_slice().iter().zip(eps.as_slice()) {
            assert_eq!(*a, b * e);
        }
        assert!(forward_noise(&s, &z0, 1000, &eps).is_err());
        assert!(forward_noise(&s, &z0, 0, &DenseArray::zeros(vec![2])).is_err());
    }

    fn small_model(seed: u64) -> DenoiserModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = DenoiserConfig::new(2, 3, 1000);
        cfg.hidden = vec![8];
        let mut m = DenoiserModel::new(cfg, &mut rng).unwrap();
        for w in m.network_mut().layer_mut(1).0.iter_mut() {
            *w = rng.random_range(-0.3..0.3);
        }
        m
    }

    #[test]
    fn predict_clean_cases() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero_model = DenoiserModel::new(DenoiserConfig::new(2, 3, 1000), &mut rng).unwrap();
        let z = DenseArray::vector(vec![0.25, -0.75]).unwrap();
        let c = Condition::new(1, 3).unwrap();
        assert_eq!(predict_clean(&s, &zero_model, &z, 10, c).unwrap(), z);

        // contrived weights: identity on the latent part, nothing else
        let mut cfg = DenoiserConfig::new(2, 3, 1000);
        cfg.hidden = vec![];
        let mut ident = DenoiserModel::new(cfg, &mut rng).unwrap();
        let (w, _) = ident.network_mut().layer_mut(0);
        let n_in = 2 + 16 + 3;
        w[0] = 1.0;
        w[n_in + 1] = 1.0;
        let zh = predict_clean(&s, &ident, &z, 10, c).unwrap();
        assert_eq!(zh.as_slice(), &[0.0, 0.0]);

        let m = small_model(5);
        let zh = predict_clean(&s, &m, &z, 321, c).unwrap();
        let e = crate::model::denoiser_forward(&m, &z, 321, c).unwrap();
        let direct: Vec<f64> = z
            .as_slice()
            .iter()
            .zip(e.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        assert_eq!(zh.as_slice(), direct.as_slice());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = NoiseSchedule::default();
        let m = small_model(6);
        for steps in [10, 1000] {
            let plan = make_step_plan(1000, steps).unwrap();
            let a = reverse_sample(&s, &m, &plan, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let b = reverse_sample(&s, &m, &plan, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(a, b);
        }
    }

    struct Exploding;
    impl NoisePredictor for Exploding {
        fn latent_dim(&self) -> usize {
            1
        }
        fn predict_noise(&self, _: &[f64], _: usize, _: usize) -> Result<Vec<f64>> {
            Ok(vec![f64::INFINITY])
        }
    }

    #[test]
    fn non_finite_sampler_state_is_reported() {
        let s = NoiseSchedule::default();
        let plan = make_step_plan(1000, 5).unwrap();
        let err = reverse_sample_from(&s, &Exploding, &plan, 0, vec![0.0]).unwrap_err();
        assert!(matches!(err, Error::NumericFailure { step: 0, .. }));
    }
}
