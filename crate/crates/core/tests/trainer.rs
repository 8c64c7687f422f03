use std::fs;
use std::path::{Path, PathBuf};

use askd::model::{Decoder, FrozenEncoder, ModelConfig, ModelSnapshot};
use askd::numkernel::{Optimizer, OptimizerKind};
use askd::schedule::ScheduleConfig;
use askd::taskgen::{write_task, Split, SplitSizes, TaskSpec};
use askd::trainer::{
    distill, epoch_branch, load_corpus, pretrain_teacher, run_epoch_skd, snapshot_file, Branch, Method, RunData,
    TeacherTraining, TrainConfig, DIVERGENCE_FILE, REPORTS_FILE,
};
use askd::Error;
use tempfile::TempDir;

fn tiny_student() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_decoder_layers: 1,
        d_ff: 32,
        ..ModelConfig::student()
    }
}

fn tiny_teacher() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 2,
        n_decoder_layers: 2,
        d_ff: 64,
        seed: 99,
        ..ModelConfig::student()
    }
}

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
    base: TrainConfig,
}

fn fixture() -> Fixture {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    let sizes = SplitSizes {
        train: 24,
        val: 4,
        test: 4,
        pretrain: 0,
    };
    write_task(&data, &TaskSpec::default(), &sizes).unwrap();
    let teacher_path = root.join("teacher.snap");
    let teacher = Decoder::new(tiny_teacher()).unwrap();
    ModelSnapshot::capture(&teacher, 0).save(&teacher_path).unwrap();
    let base = TrainConfig {
        data_dir: data,
        teacher_snapshot: Some(teacher_path),
        student: tiny_student(),
        teacher: tiny_teacher(),
        batch_size: 8,
        schedule: ScheduleConfig {
            warmup_epochs: 1,
            total_epochs: 3,
            lambda: 0.7,
            ..ScheduleConfig::default()
        },
        checkpoint_dir: root.join("run"),
        ..TrainConfig::default()
    };
    Fixture { _tmp: tmp, root, base }
}

fn in_dir(base: &TrainConfig, dir: &Path) -> TrainConfig {
    TrainConfig {
        checkpoint_dir: dir.to_path_buf(),
        ..base.clone()
    }
}

#[test]
fn askd_switches_from_teacher_to_self_distillation() {
    let f = fixture();
    let (_, reports) = distill(&f.base).unwrap();
    let phases: Vec<Branch> = reports.iter().map(|r| r.phase).collect();
    assert_eq!(phases, [Branch::Akd, Branch::Akd, Branch::Skd]);
    for r in &reports {
        assert!(r.losses.is_finite());
        assert!(r.losses.l_kl.is_some() == (r.phase == Branch::Akd));
        assert!(r.losses.l_skd.is_some() == (r.phase == Branch::Skd));
    }
}

#[test]
fn reruns_are_bitwise_identical() {
    let f = fixture();
    let a = in_dir(&f.base, &f.root.join("a"));
    let b = in_dir(&f.base, &f.root.join("b"));
    distill(&a).unwrap();
    distill(&b).unwrap();
    for name in [REPORTS_FILE.to_string(), snapshot_file(2)] {
        assert_eq!(
            fs::read(a.checkpoint_dir.join(&name)).unwrap(),
            fs::read(b.checkpoint_dir.join(&name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let f = fixture();
    let full = in_dir(&f.base, &f.root.join("full"));
    let cut = in_dir(&f.base, &f.root.join("cut"));
    let (want, _) = distill(&full).unwrap();
    distill(&cut).unwrap();
    fs::remove_file(cut.checkpoint_dir.join(snapshot_file(2))).unwrap();
    fs::remove_file(cut.checkpoint_dir.join(snapshot_file(1))).unwrap();

    let (got, reports) = distill(&cut).unwrap();
    assert_eq!(got.to_bytes(), want.to_bytes());
    assert_eq!(reports.len(), 3);
    assert_eq!(
        fs::read(cut.checkpoint_dir.join(REPORTS_FILE)).unwrap(),
        fs::read(full.checkpoint_dir.join(REPORTS_FILE)).unwrap()
    );
}

#[test]
fn changed_config_on_existing_run_is_rejected() {
    let f = fixture();
    let cfg = TrainConfig {
        method: Method::Ce,
        schedule: ScheduleConfig {
            total_epochs: 2,
            ..f.base.schedule.clone()
        },
        ..f.base.clone()
    };
    distill(&cfg).unwrap();
    let changed = TrainConfig { lr: 0.1, ..cfg };
    match distill(&changed) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "checkpoint_dir"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn hard_label_baseline_needs_no_teacher() {
    let f = fixture();
    let cfg = TrainConfig {
        method: Method::Ce,
        teacher_snapshot: Some(f.root.join("missing.snap")),
        schedule: ScheduleConfig {
            total_epochs: 2,
            ..f.base.schedule.clone()
        },
        ..f.base.clone()
    };
    let (_, reports) = distill(&cfg).unwrap();
    assert!(reports.iter().all(|r| r.phase == Branch::HardLabel && r.losses.l_kl.is_none()));

    let cfg = TrainConfig {
        method: Method::Kd,
        teacher_snapshot: None,
        ..f.base.clone()
    };
    assert!(matches!(distill(&cfg), Err(Error::Config { field, .. }) if field == "teacher_snapshot"));
}

#[test]
fn default_schedule_enters_self_distillation_at_epoch_seven() {
    let cfg = TrainConfig::default();
    let (branch, alpha) = epoch_branch(&cfg, 6).unwrap();
    assert_eq!(branch, Branch::Akd);
    assert!((alpha - 0.6).abs() < 1e-12);
    let (branch, alpha) = epoch_branch(&cfg, 7).unwrap();
    assert_eq!(branch, Branch::Skd);
    assert!((alpha - 0.56).abs() < 1e-12);
    assert!(epoch_branch(&cfg, 10).is_err());
}

#[test]
fn self_distillation_refuses_a_stale_snapshot() {
    let f = fixture();
    let enc = FrozenEncoder::new(f.base.encoder.clone()).unwrap();
    let train = load_corpus(&f.base.data_dir, Split::Train, 32, &enc).unwrap();
    let val = load_corpus(&f.base.data_dir, Split::Val, 32, &enc).unwrap();
    let data = RunData {
        train: &train,
        val: &val,
        val_limit: 0,
    };
    let mut student = Decoder::new(f.base.student_config()).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
    let stale = ModelSnapshot::capture(&student, 1);
    assert!(run_epoch_skd(&mut student, &mut opt, &stale, &data, 3, 0.3, &f.base).is_err());
    assert!(run_epoch_skd(&mut student, &mut opt, &stale, &data, 2, 0.3, &f.base).is_ok());
}

#[test]
fn divergence_is_reported_with_its_config() {
    let f = fixture();
    let cfg = TrainConfig {
        method: Method::Ce,
        lr: 1e200,
        ..f.base.clone()
    };
    match distill(&cfg) {
        Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
    let dump: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cfg.checkpoint_dir.join(DIVERGENCE_FILE)).unwrap()).unwrap();
    assert_eq!(dump["seed"], 0);
    assert_eq!(dump["config"]["lr"], 1e200);
}

#[test]
fn teacher_must_outsize_student() {
    let f = fixture();
    let enc = FrozenEncoder::new(f.base.encoder.clone()).unwrap();
    let train = load_corpus(&f.base.data_dir, Split::Train, 32, &enc).unwrap();
    let val = load_corpus(&f.base.data_dir, Split::Val, 32, &enc).unwrap();
    let out = f.root.join("t.snap");
    let err = pretrain_teacher(&train, &val, &tiny_student(), &tiny_student(), &TeacherTraining::default(), &out);
    assert!(matches!(err, Err(Error::Config { field, .. }) if field == "teacher"));

    let tcfg = TeacherTraining {
        max_epochs: 2,
        ..TeacherTraining::default()
    };
    let (snap, reports) = pretrain_teacher(&train, &val, &tiny_teacher(), &tiny_student(), &tcfg, &out).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(ModelSnapshot::load(&out).unwrap().to_bytes(), snap.to_bytes());
}
