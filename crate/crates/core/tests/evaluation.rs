use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmdd::data::{mixture_mean, synth_dataset, DatasetKind, LabeledSet, ToyDatasetSpec};
use mmdd::diffusion::NoiseSchedule;
use mmdd::evaluator::{
    evaluate, evaluate_repeats, mean_std, train_classifier, EvalConfig, Predictor,
};
use mmdd::generator::{generate, CostModel, GenBudget};
use mmdd::model::{DenoiserConfig, DenoiserModel, LatentCodec};
use mmdd::trainer::{TrainConfig, Trainer};
use mmdd::Error;

struct Constant(usize);

impl Predictor for Constant {
    fn input_dim(&self) -> usize {
        2
    }
    fn predict(&self, _: &[f64]) -> mmdd::Result<usize> {
        Ok(self.0)
    }
}

struct Coin(std::cell::RefCell<ChaCha8Rng>);

impl Predictor for Coin {
    fn input_dim(&self) -> usize {
        2
    }
    fn predict(&self, _: &[f64]) -> mmdd::Result<usize> {
        Ok(self.0.borrow_mut().random_range(0..4))
    }
}

/// Assigns the class whose mixture mean is closest.
struct NearestMean(Vec<Vec<f64>>);

impl Predictor for NearestMean {
    fn input_dim(&self) -> usize {
        self.0[0].len()
    }
    fn predict(&self, x: &[f64]) -> mmdd::Result<usize> {
        let d = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        Ok((0..self.0.len())
            .min_by(|&a, &b| d(&self.0[a]).total_cmp(&d(&self.0[b])))
            .unwrap())
    }
}

fn spec(classes: usize, separation: f64, per_class: usize) -> ToyDatasetSpec {
    ToyDatasetSpec {
        classes,
        separation,
        samples_per_class: per_class,
        seed: 31,
        ..ToyDatasetSpec::default()
    }
}

#[test]
fn constant_predictor_on_single_class_scores_100() {
    let test = LabeledSet::from_parts(2, 3, vec![0.0; 20], vec![0; 10]).unwrap();
    assert_eq!(evaluate(&Constant(0), &test).unwrap(), 100.0);
    assert_eq!(evaluate(&Constant(1), &test).unwrap(), 0.0);
}

#[test]
fn uniform_random_predictor_scores_about_a_quarter() {
    let (_, test) = synth_dataset(&spec(4, 6.0, 25_000)).unwrap();
    let coin = Coin(ChaCha8Rng::seed_from_u64(8).into());
    let acc = evaluate(&coin, &test).unwrap();
    assert!((acc - 25.0).abs() <= 2.0, "accuracy {acc}");
}

#[test]
fn wide_separation_is_linearly_separable() {
    let s = spec(2, 10.0, 2000);
    let (train, test) = synth_dataset(&s).unwrap();
    let optimal = NearestMean((0..2).map(|k| mixture_mean(&s, k)).collect());
    assert!(evaluate(&optimal, &test).unwrap() > 99.0);
    let cfg = EvalConfig {
        epochs: 20,
        ..EvalConfig::default()
    };
    let clf = train_classifier(&train, &cfg, 1).unwrap();
    assert!(evaluate(&clf, &test).unwrap() > 99.0);
}

#[test]
fn zero_separation_is_chance() {
    let (train, test) = synth_dataset(&spec(2, 0.0, 2000)).unwrap();
    let cfg = EvalConfig {
        epochs: 10,
        ..EvalConfig::default()
    };
    let clf = train_classifier(&train, &cfg, 2).unwrap();
    let acc = evaluate(&clf, &test).unwrap();
    assert!((acc - 50.0).abs() < 6.0, "accuracy {acc}");
}

#[test]
fn single_class_training_set_is_degenerate() {
    let set = LabeledSet::from_parts(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![1, 1]).unwrap();
    assert!(matches!(
        train_classifier(&set, &EvalConfig::default(), 0),
        Err(Error::DegenerateData(_))
    ));
}

#[test]
fn dimension_mismatch_is_rejected() {
    let test = LabeledSet::from_parts(3, 2, vec![0.0; 3], vec![0]).unwrap();
    assert!(matches!(
        evaluate(&Constant(0), &test),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn repeats_report_population_std() {
    let (mean, std) = mean_std(&[90.0, 60.0, 75.0]);
    assert_eq!(mean, 75.0);
    assert!((std - 150.0f64.sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[60.0, 75.0, 90.0]), mean_std(&[90.0, 75.0, 60.0]));
}

#[test]
fn repeats_are_deterministic_and_bounded() {
    let (train, test) = synth_dataset(&ToyDatasetSpec {
        kind: DatasetKind::RingClasses,
        ..spec(3, 2.0, 60)
    })
    .unwrap();
    let cfg = EvalConfig {
        epochs: 30,
        seed: 4,
        ..EvalConfig::default()
    };
    let a = evaluate_repeats(&train, &test, &cfg).unwrap();
    assert_eq!(a, evaluate_repeats(&train, &test, &cfg).unwrap());
    assert_eq!(a.accuracies.len(), 3);
    assert!(a.accuracies.iter().all(|v| (0.0..=100.0).contains(v)));
    assert!(a.std >= 0.0);
    assert_eq!(a.samples, train.len());
    assert!((a.gain - 1000.0 * a.mean / train.len() as f64).abs() < 1e-12);
}

#[test]
fn grid_digits_are_learnable() {
    let s = ToyDatasetSpec {
        kind: DatasetKind::GridDigits,
        dim: 64,
        separation: 3.0,
        ..spec(4, 3.0, 100)
    };
    let (train, test) = synth_dataset(&s).unwrap();
    let cfg = EvalConfig {
        epochs: 30,
        ..EvalConfig::default()
    };
    let clf = train_classifier(&train, &cfg, 3).unwrap();
    assert!(evaluate(&clf, &test).unwrap() > 90.0);
}

#[test]
fn doubling_the_surrogate_does_not_degrade_accuracy() {
    let s = ToyDatasetSpec {
        samples_per_class: 5000,
        seed: 2024,
        ..ToyDatasetSpec::default()
    };
    let (train, test) = synth_dataset(&s).unwrap();
    let schedule = NoiseSchedule::default();
    let model = DenoiserModel::new(
        DenoiserConfig::new(2, 4, 1000),
        &mut ChaCha8Rng::seed_from_u64(2024),
    )
    .unwrap();
    let mut trainer = Trainer::new(
        model,
        schedule,
        LatentCodec::identity(2),
        TrainConfig {
            seed: 2024,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    trainer.run(&train, None).unwrap();
    let cfg = EvalConfig {
        seed: 2024,
        ..EvalConfig::default()
    };
    let accuracy = |budget: f64| {
        let b = GenBudget {
            budget_secs: budget,
            clock: CostModel::PerStep(0.5),
            batch_size: 8,
            steps: 10,
        };
        let sur = generate(
            &trainer.model,
            &trainer.schedule,
            &trainer.codec,
            &b,
            4,
            2024,
        )
        .unwrap();
        (
            sur.len(),
            evaluate_repeats(&sur.set, &test, &cfg).unwrap().mean,
        )
    };
    let (n1, a1) = accuracy(60.0);
    let (n2, a2) = accuracy(120.0);
    assert_eq!(n2, 2 * n1);
    assert!(a2 >= a1 - 1.0, "1x {a1}, 2x {a2}");
}
