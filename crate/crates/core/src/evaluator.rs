//! Downstream evaluation: a small classifier trained on surrogate samples and
//! scored on held-out real data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 200,
            batch_size: 32,
            repeats: 3,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::invalid("eval learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(Error::invalid(
                "momentum must lie in [0, 1) and weight decay be >= 0",
            ));
        }
        if self.repeats == 0 || self.batch_size == 0 {
            return Err(Error::invalid("repeats and batch size must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }
}

/// Anything that assigns a class to an input vector.
pub trait Predictor {
    fn input_dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<usize>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    net: Mlp,
    /// Per-feature standardisation fitted on the training inputs.
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl Classifier {
    /// A freshly initialised ReLU classifier.
    pub fn init(input_dim: usize, num_classes: usize, cfg: &EvalConfig, seed: u64) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden);
        dims.push(num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: Mlp::new(dims, Activation::Relu, false, &mut rng)?,
            shift: vec![0.0; input_dim],
            scale: vec![1.0; input_dim],
        })
    }

    /// Sets the standardisation to the per-feature mean and standard
    /// deviation of `set` (constant features keep unit scale).
    fn fit_standardization(&mut self, set: &LabeledSet) {
        let n = set.len() as f64;
        for j in 0..set.dim() {
            let mean = set.samples().map(|x| x[j]).sum::<f64>() / n;
            let var = set.samples().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            self.shift[j] = mean;
            self.scale[j] = if std > 1e-12 { 1.0 / std } else { 1.0 };
        }
    }

    fn standardize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.shift.len() {
            return Err(Error::dim_mismatch(
                "classifier input",
                self.shift.len(),
                x.len(),
            ));
        }
        Ok(x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) * s)
            .collect())
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(&self.standardize(x)?)
    }
}

impl Predictor for Classifier {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let loss = -(grad[label].ln());
    grad[label] -= 1.0;
    (loss, grad)
}

/// Trains a classifier with minibatch SGD (momentum, L2 weight decay) on
/// softmax cross-entropy.
pub fn train_classifier(set: &LabeledSet, cfg: &EvalConfig, seed: u64) -> Result<Classifier> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::DegenerateData("training set is empty".into()));
    }
    let populated = set.class_counts().iter().filter(|&&n| n > 0).count();
    if populated < 2 {
        return Err(Error::DegenerateData(format!(
            "need samples from at least 2 classes, got {populated}"
        )));
    }
    let mut clf = Classifier::init(set.dim(), set.num_classes(), cfg, seed)?;
    clf.fit_standardization(set);
    let inputs: Vec<Vec<f64>> = set
        .samples()
        .map(|x| clf.standardize(x))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let n_params = clf.net.params().len();
    let mut velocity = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..set.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let tape = clf.net.forward_tape(&inputs[i])?;
                let (_, mut g) = cross_entropy(tape.output(), set.labels()[i]);
                g.iter_mut().for_each(|x| *x *= scale);
                clf.net.backward(&tape, &g, &mut grad)?;
            }
            let params = clf.net.params_mut();
            for ((p, g), v) in params.iter_mut().zip(&grad).zip(&mut velocity) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                *p -= cfg.learning_rate * *v;
            }
        }
    }
    if clf.net.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::NumericFailure {
            step: cfg.epochs,
            message: "classifier parameters diverged".into(),
        });
    }
    Ok(clf)
}

/// Percentage of test samples whose predicted class matches the label.
pub fn evaluate<P: Predictor + ?Sized>(classifier: &P, test: &LabeledSet) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    if test.dim() != classifier.input_dim() {
        return Err(Error::dim_mismatch(
            "test samples",
            classifier.input_dim(),
            test.dim(),
        ));
    }
    let mut correct = 0usize;
    for (x, &y) in test.samples().zip(test.labels()) {
        if classifier.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// Accuracy per generated sample, scaled by 1000 (units of 1e-3 % / sample).
pub fn accuracy_gain(accuracy_percent: f64, n_samples: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::invalid("accuracy gain needs at least one sample"));
    }
    Ok(1000.0 * accuracy_percent / n_samples as f64)
}

/// Mean and population standard deviation, reduced in sorted order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
    pub gain: f64,
}

/// Trains `cfg.repeats` classifiers on `train` (seeds derived from
/// `cfg.seed`) and scores each on `test`.
pub fn evaluate_repeats(
    train: &LabeledSet,
    test: &LabeledSet,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    cfg.validate()?;
    let accuracies = (0..cfg.repeats)
        .map(|r| {
            let clf = train_classifier(train, cfg, derive_seed(cfg.seed, 1000 + r as u64))?;
            evaluate(&clf, test)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&accuracies);
    Ok(EvalResult {
        mean,
        std,
        samples: train.len(),
        gain: accuracy_gain(mean, train.len() as u64)?,
        accuracies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable() -> LabeledSet {
        let mut set = LabeledSet::new(2, 2).unwrap();
        for i in 0..20 {
            let y = i as f64 * 0.1 - 1.0;
            set.push(&[1.0 + 0.05 * i as f64, y], 0).unwrap();
            set.push(&[-1.0 - 0.05 * i as f64, y], 1).unwrap();
        }
        set
    }

    #[test]
    fn learns_separable_data() {
        let set = separable();
        let cfg = EvalConfig {
            epochs: 50,
            ..EvalConfig::default()
        };
        let clf = train_classifier(&set, &cfg, 3).unwrap();
        assert_eq!(evaluate(&clf, &set).unwrap(), 100.0);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let set = separable();
        let cfg = EvalConfig {
            epochs: 0,
            ..EvalConfig::default()
        };
        let clf = train_classifier(&set, &cfg, 9).unwrap();
        assert_eq!(
            clf.network(),
            Classifier::init(2, 2, &cfg, 9).unwrap().network()
        );
    }

    #[test]
    fn training_is_deterministic() {
        let set = separable();
        let cfg = EvalConfig {
            epochs: 5,
            ..EvalConfig::default()
        };
        assert_eq!(
            train_classifier(&set, &cfg, 4).unwrap(),
            train_classifier(&set, &cfg, 4).unwrap()
        );
    }

    #[test]
    fn single_class_is_degenerate() {
        let mut set = LabeledSet::new(1, 3).unwrap();
        set.push(&[0.0], 1).unwrap();
        set.push(&[1.0], 1).unwrap();
        let err = train_classifier(&set, &EvalConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateData(_)));
    }

    struct Always(usize);
    impl Predictor for Always {
        fn input_dim(&self) -> usize {
            1
        }
        fn predict(&self, _: &[f64]) -> Result<usize> {
            Ok(self.0)
        }
    }

    #[test]
    fn constant_predictor() {
        let set = LabeledSet::from_parts(1, 2, vec![0.0, 1.0, 2.0], vec![0, 0, 0]).unwrap();
        assert_eq!(evaluate(&Always(0), &set).unwrap(), 100.0);
        assert_eq!(evaluate(&Always(1), &set).unwrap(), 0.0);
        let wide = LabeledSet::from_parts(2, 2, vec![0.0, 1.0], vec![0]).unwrap();
        assert!(evaluate(&Always(0), &wide).is_err());
        assert!(evaluate(&Always(0), &LabeledSet::new(1, 2).unwrap()).is_err());
    }

    #[test]
    fn gain_arithmetic() {
        assert!((accuracy_gain(6.53, 2560).unwrap() - 2.55).abs() < 0.005);
        assert!((accuracy_gain(5.39, 4544).unwrap() - 1.19).abs() < 0.005);
        assert!((accuracy_gain(4.19, 800).unwrap() - 5.24).abs() < 0.005);
        assert!(accuracy_gain(1.0, 0).is_err());
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let (m, s) = mean_std(&[5.0, 5.0, 5.0]);
        assert_eq!((m, s), (5.0, 0.0));
        let (m, s) = mean_std(&[10.0, 20.0, 60.0]);
        assert_eq!(m, 30.0);
        assert!((s - (1400.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = [0.2, -1.0, 0.7];
        let (_, g) = cross_entropy(&logits, 2);
        let h = 1e-6;
        for j in 0..3 {
            let mut p = logits;
            p[j] += h;
            let mut m = logits;
            m[j] -= h;
            let fd = (cross_entropy(&p, 2).0 - cross_entropy(&m, 2).0) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-8);
        }
    }
}
