use std::collections::BTreeMap;
use std::fs;

use pseudolabel_core::classifier::{ClassifierBackend, LogitVector, NativeBackend, TrainConfig};
use pseudolabel_core::corpus::Dataset;
use pseudolabel_core::selection::{read_pseudo_jsonl, SelectionConfig};
use pseudolabel_core::selftrain::{
    finetune, run_self_training, train_student, Manifest, RunDir, SelfTrainConfig,
};
use pseudolabel_core::synth::{generate, SyntheticConfig};
use pseudolabel_core::Error;

fn small_corpus() -> pseudolabel_core::synth::SyntheticCorpus {
    let cfg = SyntheticConfig {
        n_train: 120,
        n_dev: 60,
        n_test: 0,
        n_unlabeled: 600,
        ..SyntheticConfig::default()
    };
    generate(&cfg, 11)
}

fn config(k: usize) -> SelfTrainConfig {
    let train = TrainConfig {
        feature_dim: 1 << 12,
        epochs: 4,
        ..TrainConfig::native_default()
    };
    SelfTrainConfig {
        train,
        finetune: train,
        selection: SelectionConfig {
            k_per_class: k,
            ..SelectionConfig::default()
        },
        rounds: 1,
        seed: 5,
    }
}

#[test]
fn writes_complete_run_directory() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = RunDir::new(dir.path().join("run"));
    let run = run_self_training(
        &mut NativeBackend,
        &corpus.train,
        &corpus.unlabeled,
        &config(50),
        &run_dir,
        BTreeMap::new(),
    )
    .unwrap();
    for file in [
        "manifest.json",
        "timings.json",
        "teacher.model",
        "teacher_logits.json",
        "pseudo.jsonl",
        "student.model",
        "final.model",
    ] {
        assert!(run_dir.root().join(file).is_file(), "{file} missing");
    }
    assert!(!run_dir.root().join(".lock").exists());
    let manifest = Manifest::load(&run_dir.manifest()).unwrap();
    assert_eq!(manifest, run.manifest);
    assert_eq!(manifest.final_model, "final.model");
    assert_eq!(manifest.datasets["labeled"].n, 120);
    let round = &manifest.rounds[0];
    let selected: usize = round.selected.to_array().iter().sum();
    assert_eq!(selected, run.pseudo.len());
    assert!(round.selected.to_array().iter().all(|&n| n <= 50));
    assert_eq!(round.artifact_digests.len(), 4);
    let timings = fs::read_to_string(run_dir.timings()).unwrap();
    assert!(!fs::read_to_string(run_dir.manifest())
        .unwrap()
        .contains("seconds"));
    assert!(timings.contains("finetune"));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let a = RunDir::new(dir.path().join("a"));
    let b = RunDir::new(dir.path().join("b"));
    for run_dir in [&a, &b] {
        run_self_training(
            &mut NativeBackend,
            &corpus.train,
            &corpus.unlabeled,
            &config(50),
            run_dir,
            BTreeMap::new(),
        )
        .unwrap();
    }
    for file in [
        "manifest.json",
        "pseudo.jsonl",
        "teacher.model",
        "student.model",
        "final.model",
    ] {
        let x = fs::read(a.root().join(file)).unwrap();
        let y = fs::read(b.root().join(file)).unwrap();
        assert!(x == y, "{file} differs");
    }
    let c = RunDir::new(dir.path().join("c"));
    let other = SelfTrainConfig {
        seed: 6,
        ..config(50)
    };
    run_self_training(
        &mut NativeBackend,
        &corpus.train,
        &corpus.unlabeled,
        &other,
        &c,
        BTreeMap::new(),
    )
    .unwrap();
    assert_ne!(
        fs::read(a.root().join("final.model")).unwrap(),
        fs::read(c.root().join("final.model")).unwrap()
    );
}

#[test]
fn stages_replay_from_persisted_inputs() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = RunDir::new(dir.path().join("run"));
    let cfg = config(40);
    let run = run_self_training(
        &mut NativeBackend,
        &corpus.train,
        &corpus.unlabeled,
        &cfg,
        &run_dir,
        BTreeMap::new(),
    )
    .unwrap();
    let seeds = run.manifest.rounds[0].seeds;

    let student = dir.path().join("student.replay");
    let student_cfg = TrainConfig {
        seed: seeds.student,
        ..cfg.train
    };
    train_student(
        &mut NativeBackend,
        &run_dir.pseudo(1),
        &student_cfg,
        &student,
    )
    .unwrap();
    assert_eq!(
        fs::read(&student).unwrap(),
        fs::read(run_dir.student_model(1)).unwrap()
    );

    let final_model = dir.path().join("final.replay");
    let finetune_cfg = TrainConfig {
        seed: seeds.finetune,
        ..cfg.finetune
    };
    finetune(
        &mut NativeBackend,
        &student,
        &corpus.train,
        &finetune_cfg,
        &final_model,
    )
    .unwrap();
    assert_eq!(
        fs::read(&final_model).unwrap(),
        fs::read(run_dir.final_model(1)).unwrap()
    );
}

#[test]
fn degenerate_unlabeled_equals_labeled() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = RunDir::new(dir.path().join("run"));
    let run = run_self_training(
        &mut NativeBackend,
        &corpus.train,
        &corpus.train,
        &config(1000),
        &run_dir,
        BTreeMap::new(),
    )
    .unwrap();
    // every training post is selected and labeled with the teacher's argmax
    let teacher_pred: Vec<LogitVector> = NativeBackend
        .predict(&run.teacher_model(), &corpus.train.texts())
        .unwrap();
    let pseudo = read_pseudo_jsonl(&run_dir.pseudo(1)).unwrap();
    assert_eq!(pseudo.len(), corpus.train.len());
    for sample in &pseudo {
        let i = corpus
            .train
            .iter()
            .position(|p| p.id == sample.post.id)
            .unwrap();
        assert_eq!(sample.pseudo_label, teacher_pred[i].argmax());
    }
}

#[test]
fn multi_round_layout() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = RunDir::new(dir.path().join("run"));
    let cfg = SelfTrainConfig {
        rounds: 2,
        ..config(30)
    };
    let run = run_self_training(
        &mut NativeBackend,
        &corpus.train,
        &corpus.unlabeled,
        &cfg,
        &run_dir,
        BTreeMap::new(),
    )
    .unwrap();
    assert_eq!(run.manifest.rounds.len(), 2);
    assert_eq!(run.manifest.rounds[1].teacher_model, "final.model");
    assert_eq!(run.manifest.final_model, "round2/final.model");
    assert!(run_dir.root().join("round2/pseudo.jsonl").is_file());
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = RunDir::new(dir.path().join("run"));
    let _lock = run_dir.lock().unwrap();
    assert!(run_dir.lock().is_err());
    drop(_lock);
    assert!(run_dir.lock().is_ok());
}

#[test]
fn stage_errors_name_the_stage() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = RunDir::new(dir.path().join("run"));
    let mut cfg = config(10);
    cfg.finetune.learning_rate = 1e300;
    cfg.finetune.optimizer = pseudolabel_core::classifier::optim::OptimizerKind::Sgd;
    let err = run_self_training(
        &mut NativeBackend,
        &corpus.train,
        &corpus.unlabeled,
        &cfg,
        &run_dir,
        BTreeMap::new(),
    )
    .unwrap_err();
    assert!(
        matches!(err, Error::Stage { ref stage, .. } if *stage == "finetune"),
        "{err}"
    );
    assert!(!run_dir.manifest().exists());
}

#[test]
fn empty_unlabeled_is_rejected() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = RunDir::new(dir.path().join("run"));
    let empty = Dataset::unlabeled(Vec::new()).unwrap();
    assert!(run_self_training(
        &mut NativeBackend,
        &corpus.train,
        &empty,
        &config(10),
        &run_dir,
        BTreeMap::new()
    )
    .is_err());
}
