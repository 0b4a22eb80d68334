use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmdd::data::{
    dataset_from_bytes, dataset_to_bytes, DatasetInfo, DatasetKind, LabeledSet, ToyDatasetSpec,
};
use mmdd::generator::{compute_ipc, CostModel, GenerationMetadata, SurrogateDataset};
use mmdd::model::{ClassEmbeddingMode, DenoiserConfig, DenoiserModel, LatentCodec};
use mmdd::nn::Activation;
use mmdd::{Checkpoint, Error, NoiseSchedule};

fn labeled_set() -> impl Strategy<Value = LabeledSet> {
    (1usize..5, 1usize..6, 0usize..20).prop_flat_map(|(dim, classes, n)| {
        (
            prop::collection::vec(-1e6f64..1e6, n * dim),
            prop::collection::vec(0..classes, n),
        )
            .prop_map(move |(data, labels)| {
                LabeledSet::from_parts(dim, classes, data, labels).unwrap()
            })
    })
}

fn cost_model() -> impl Strategy<Value = CostModel> {
    prop_oneof![
        Just(CostModel::Real),
        (0.001f64..100.0).prop_map(CostModel::FixedPerBatch),
        (0.001f64..10.0).prop_map(CostModel::PerStep),
    ]
}

fn surrogate() -> impl Strategy<Value = SurrogateDataset> {
    (
        labeled_set(),
        1usize..100,
        0.0f64..1e4,
        0.0f64..1e4,
        cost_model(),
        any::<u64>(),
        1usize..16,
    )
        .prop_map(|(set, steps, budget, elapsed, clock, seed, batch_size)| {
            let counts = set.class_counts();
            let metadata = GenerationMetadata {
                steps,
                budget_secs: budget,
                elapsed_secs: elapsed,
                mean_batch_secs: elapsed / 3.0,
                batches: set.len().div_ceil(batch_size),
                batch_size,
                seed,
                clock,
                ipc: compute_ipc(set.len() as u64, set.num_classes() as u64).unwrap(),
                per_class_counts: counts,
                budget_exhausted: set.is_empty(),
            };
            SurrogateDataset { set, metadata }
        })
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    (
        1usize..4,
        1usize..4,
        2usize..40,
        prop::sample::select(vec![2usize, 4, 6]),
        prop::collection::vec(1usize..5, 0..3),
        any::<bool>(),
        0usize..4,
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(
            |(latent, classes, total, time_dim, hidden, relu, width, orthonormal, seed)| {
                let config = DenoiserConfig {
                    latent_dim: latent,
                    num_classes: classes,
                    total_steps: total,
                    time_dim,
                    hidden,
                    activation: if relu {
                        Activation::Relu
                    } else {
                        Activation::Tanh
                    },
                    class_embedding: if width == 0 {
                        ClassEmbeddingMode::OneHot
                    } else {
                        ClassEmbeddingMode::Learned { width }
                    },
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = config.num_params();
                let params = (0..n)
                    .map(|i| ((i as f64 + 0.5) * 1.37).sin() * 3.0)
                    .collect();
                let model = DenoiserModel::from_params(config, params).unwrap();
                let codec = if orthonormal {
                    LatentCodec::random_orthonormal(latent, &mut rng).unwrap()
                } else {
                    LatentCodec::identity(latent)
                };
                Checkpoint {
                    model,
                    schedule: NoiseSchedule::linear(total, 1e-4, 2e-2).unwrap(),
                    codec,
                }
            },
        )
}

fn assert_format_error(err: Error, max_offset: usize) {
    match err {
        Error::Format { offset, .. } => assert!(
            offset as usize <= max_offset,
            "offset {offset} beyond {max_offset}"
        ),
        other => panic!("expected a format error, got {other:?}"),
    }
}

proptest! {
    #[test]
    fn surrogate_round_trips(s in surrogate()) {
        let bytes = s.to_bytes().unwrap();
        prop_assert_eq!(&bytes[..4], b"SURD");
        prop_assert_eq!(SurrogateDataset::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn dataset_round_trips(set in labeled_set(), split in "[a-z]{0,8}", with_spec in any::<bool>()) {
        let spec = with_spec.then(|| ToyDatasetSpec { kind: DatasetKind::RingClasses, ..ToyDatasetSpec::default() });
        let info = DatasetInfo { split, spec };
        let bytes = dataset_to_bytes(&set, &info).unwrap();
        prop_assert_eq!(&bytes[..4], b"DSET");
        prop_assert_eq!(dataset_from_bytes(&bytes).unwrap(), (set, info));
    }

    #[test]
    fn checkpoint_round_trips(c in checkpoint()) {
        let bytes = c.to_bytes().unwrap();
        prop_assert_eq!(&bytes[..4], b"MMDD");
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn truncated_surrogate_reports_offset(s in surrogate(), cut in 0.0f64..1.0) {
        let bytes = s.to_bytes().unwrap();
        let keep = ((bytes.len() - 1) as f64 * cut) as usize;
        assert_format_error(SurrogateDataset::from_bytes(&bytes[..keep]).unwrap_err(), keep);
    }

    #[test]
    fn truncated_checkpoint_reports_offset(c in checkpoint(), cut in 0.0f64..1.0) {
        let bytes = c.to_bytes().unwrap();
        let keep = ((bytes.len() - 1) as f64 * cut) as usize;
        assert_format_error(Checkpoint::from_bytes(&bytes[..keep]).unwrap_err(), keep);
    }
}

fn tiny_surrogate() -> SurrogateDataset {
    let set = LabeledSet::from_parts(2, 2, vec![0.5, -1.0, 2.0, 3.0], vec![0, 1]).unwrap();
    SurrogateDataset {
        metadata: GenerationMetadata {
            steps: 10,
            budget_secs: 60.0,
            elapsed_secs: 5.0,
            mean_batch_secs: 5.0,
            batches: 1,
            batch_size: 2,
            seed: 1,
            clock: CostModel::FixedPerBatch(5.0),
            per_class_counts: set.class_counts(),
            ipc: compute_ipc(2, 2).unwrap(),
            budget_exhausted: false,
        },
        set,
    }
}

#[test]
fn header_layout_is_little_endian() {
    let bytes = tiny_surrogate().to_bytes().unwrap();
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
    assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 0.5);
    assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), -1.0);
    assert_eq!(u32::from_le_bytes(bytes[40..44].try_into().unwrap()), 0);
}

#[test]
fn bad_magic_and_version_are_located() {
    let mut bytes = tiny_surrogate().to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(matches!(
        SurrogateDataset::from_bytes(&bytes),
        Err(Error::Format { offset: 0, .. })
    ));

    let mut bytes = tiny_surrogate().to_bytes().unwrap();
    bytes[4] = 9;
    assert!(matches!(
        SurrogateDataset::from_bytes(&bytes),
        Err(Error::Format { offset: 4, .. })
    ));
}

#[test]
fn dataset_and_surrogate_magics_are_not_interchangeable() {
    let s = tiny_surrogate();
    let bytes = s.to_bytes().unwrap();
    assert!(matches!(
        dataset_from_bytes(&bytes),
        Err(Error::Format { offset: 0, .. })
    ));
    let dbytes = dataset_to_bytes(
        &s.set,
        &DatasetInfo {
            split: "train".into(),
            spec: None,
        },
    )
    .unwrap();
    assert!(matches!(
        SurrogateDataset::from_bytes(&dbytes),
        Err(Error::Format { offset: 0, .. })
    ));
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = tiny_surrogate().to_bytes().unwrap();
    bytes.push(0);
    assert!(matches!(
        SurrogateDataset::from_bytes(&bytes),
        Err(Error::Format { .. })
    ));
}

#[test]
fn non_finite_sample_is_rejected() {
    let mut bytes = tiny_surrogate().to_bytes().unwrap();
    bytes[24..32].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(matches!(
        SurrogateDataset::from_bytes(&bytes),
        Err(Error::Format { offset: 24, .. })
    ));
}

#[test]
fn empty_sets_round_trip() {
    let set = LabeledSet::new(3, 4).unwrap();
    let info = DatasetInfo {
        split: "test".into(),
        spec: None,
    };
    let bytes = dataset_to_bytes(&set, &info).unwrap();
    assert_eq!(dataset_from_bytes(&bytes).unwrap(), (set, info));
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.surd");
    let s = tiny_surrogate();
    s.write_file(&path).unwrap();
    assert_eq!(SurrogateDataset::read_file(&path).unwrap(), s);
}
