use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mmdd::model::{DenoiserConfig, DenoiserModel, LatentCodec};
use mmdd::{Checkpoint, NoiseSchedule, SurrogateDataset};

fn mmdd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmdd"))
        .args(args)
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        "# small run\nsamples_per_class = 40\nepochs = 1\neval_epochs = 10\neval_repeats = 2\n",
    )
    .unwrap();
    cfg
}

#[test]
fn unknown_config_key_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "colour = blue\n").unwrap();
    let out = mmdd(&[
        "--config",
        p(&cfg),
        "synth",
        "--train-out",
        "a",
        "--test-out",
        "b",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn corrupt_checkpoint_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    fs::write(&ckpt, b"MMDD\x01\x00").unwrap();
    let out = mmdd(&[
        "generate",
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&dir.path().join("s.surd")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exploding_model_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = DenoiserConfig::new(2, 2, 1000);
    cfg.hidden = vec![];
    let params = vec![1e300; cfg.num_params()];
    let ckpt = Checkpoint {
        model: DenoiserModel::from_params(cfg, params).unwrap(),
        schedule: NoiseSchedule::default(),
        codec: LatentCodec::identity(2),
    };
    let path = dir.path().join("m.ckpt");
    ckpt.write_file(&path).unwrap();
    let out = mmdd(&[
        "generate",
        "--checkpoint",
        p(&path),
        "--budget-secs",
        "10",
        "--simulated-batch-cost",
        "1",
        "--out",
        p(&dir.path().join("s.surd")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn stages_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let (train, test, ckpt, sur, hist) = (
        d.join("train.dset"),
        d.join("test.dset"),
        d.join("m.ckpt"),
        d.join("s.surd"),
        d.join("h.csv"),
    );
    assert!(mmdd(&[
        "--config",
        p(&cfg),
        "--seed",
        "3",
        "synth",
        "--train-out",
        p(&train),
        "--test-out",
        p(&test)
    ])
    .status
    .success());
    assert!(mmdd(&[
        "--config",
        p(&cfg),
        "train",
        "--data",
        p(&train),
        "--out",
        p(&ckpt),
        "--history",
        p(&hist)
    ])
    .status
    .success());
    assert_eq!(
        fs::read_to_string(&hist).unwrap().lines().count(),
        1 + 32 * 4 / 8
    );

    let out = mmdd(&[
        "generate",
        "--checkpoint",
        p(&ckpt),
        "--steps",
        "10",
        "--budget-secs",
        "60",
        "--simulated-batch-cost",
        "5",
        "--out",
        p(&sur),
    ]);
    assert!(out.status.success());
    let s = SurrogateDataset::read_file(&sur).unwrap();
    assert_eq!(s.len(), 96);
    assert_eq!(s.metadata.steps, 10);
    assert_eq!(s.metadata.per_class_counts, vec![24; 4]);

    let out = mmdd(&[
        "--config",
        p(&cfg),
        "evaluate",
        "--surrogate",
        p(&sur),
        "--testset",
        p(&test),
        "--epochs",
        "5",
        "--repeats",
        "2",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "repeat,accuracy");
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
    assert_eq!(lines[3], "mean,std,samples,ipc,gain");
    let summary: Vec<&str> = lines[4].split(',').collect();
    assert_eq!(summary[2], "96");
    assert_eq!(summary[3], "24");
}

#[test]
fn zero_budget_writes_an_empty_surrogate() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint {
        model: DenoiserModel::from_params(
            DenoiserConfig::new(2, 3, 1000),
            vec![0.0; DenoiserConfig::new(2, 3, 1000).num_params()],
        )
        .unwrap(),
        schedule: NoiseSchedule::default(),
        codec: LatentCodec::identity(2),
    };
    let path = dir.path().join("m.ckpt");
    ckpt.write_file(&path).unwrap();
    let sur = dir.path().join("s.surd");
    let out = mmdd(&[
        "generate",
        "--checkpoint",
        p(&path),
        "--budget-secs",
        "0",
        "--out",
        p(&sur),
    ]);
    assert!(out.status.success());
    let s = SurrogateDataset::read_file(&sur).unwrap();
    assert!(s.is_empty() && s.metadata.budget_exhausted);
}

#[test]
fn deterministic_sweeps_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let (train, test, ckpt) = (d.join("train.dset"), d.join("test.dset"), d.join("m.ckpt"));
    assert!(mmdd(&[
        "--config",
        p(&cfg),
        "synth",
        "--train-out",
        p(&train),
        "--test-out",
        p(&test)
    ])
    .status
    .success());
    assert!(mmdd(&[
        "--config",
        p(&cfg),
        "train",
        "--data",
        p(&train),
        "--out",
        p(&ckpt)
    ])
    .status
    .success());
    let run = |name: &str| {
        let out = d.join(name);
        let o = mmdd(&[
            "--config",
            p(&cfg),
            "sweep-steps",
            "--checkpoint",
            p(&ckpt),
            "--testset",
            p(&test),
            "--steps",
            "5,10",
            "--budget-secs",
            "20",
            "--simulated-step-cost",
            "0.5",
            "--out",
            p(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("5,2.500000,64,"));
}

#[test]
fn help_lists_every_stage() {
    let out = mmdd(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in [
        "synth",
        "train",
        "generate",
        "evaluate",
        "sweep-steps",
        "pipeline",
    ] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}
