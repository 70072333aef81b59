mod common;

use perceptlab::backbone::ForwardOptions;
use perceptlab::data::{make_splits, SplitFractions, SplitPlan};
use perceptlab::metrics::plcc;
use perceptlab::multi::{stage1_train, stage2_finetune, DatasetSplit, SharedBundle};
use perceptlab::task::{TaskKind, TaskSpec};
use perceptlab::trainer::{DatasetConfig, RunConfig, SplitData};
use perceptlab::Error;

fn plan() -> SplitPlan {
    SplitPlan {
        fractions: SplitFractions { train: 0.5, val: 0.25, test: 0.25 },
        ..SplitPlan::lamem(5)
    }
}

fn mem_split(manifest: &std::path::Path, id: &str) -> DatasetSplit {
    let task = TaskSpec::new(TaskKind::Memorability);
    let ds = common::load(manifest, id, task.clone());
    let split = make_splits(&ds.samples, &plan()).unwrap().remove(0);
    DatasetSplit {
        task,
        data: SplitData::new(&ds, &split),
    }
}

fn config() -> RunConfig {
    let mut cfg = common::micro_config(TaskSpec::new(TaskKind::Memorability));
    cfg.max_epochs = 4;
    cfg.patience = 4;
    cfg.stage2_max_epochs = Some(2);
    cfg
}

#[test]
fn duplicate_datasets_give_matching_heads() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::brightness_dataset(dir.path(), 24, 224, 4);
    let datasets = vec![mem_split(&manifest, "a"), mem_split(&manifest, "b")];
    let mut cfg = config();
    cfg.max_epochs = 8;
    cfg.patience = 8;
    cfg.learning_rates = vec![3e-3];
    let shared = stage1_train(&cfg, 3e-3, &datasets).unwrap();
    assert_eq!(shared.per_dataset.len(), 2);
    assert_eq!(shared.per_dataset["a"].adapters.len(), shared.per_dataset["b"].adapters.len());

    let a = shared.per_dataset["a"].build_model().unwrap();
    let b = shared.per_dataset["b"].build_model().unwrap();
    assert_eq!(a.encoder.adapter_checksum().unwrap(), b.encoder.adapter_checksum().unwrap());

    let samples = &datasets[0].data.test;
    let views: Vec<_> = samples.iter().flat_map(|s| a.views(s, 0).unwrap()).collect();
    let pa: Vec<f64> = a.outputs(&views).unwrap().into_iter().map(|r| r[0]).collect();
    let pb: Vec<f64> = b.outputs(&views).unwrap().into_iter().map(|r| r[0]).collect();
    let r = plcc(&pa, &pb).unwrap();
    assert!(r > 0.99, "head agreement {r}");

    let out = dir.path().join("joint");
    shared.save(&out).unwrap();
    assert!(out.join("adapters.bin").exists());
    assert!(out.join("heads/a/head.bin").exists());
    assert!(out.join("heads/b/config.snapshot").exists());
    let loaded = SharedBundle::load(&out).unwrap();
    assert_eq!(loaded.snapshot, shared.snapshot);
    assert_eq!(loaded.history, shared.history);
}

#[test]
fn stage_two_keeps_encoder_and_never_regresses() {
    let dir = tempfile::tempdir().unwrap();
    let m1 = common::brightness_dataset(dir.path(), 16, 224, 5);
    let m2 = common::brightness_dataset(dir.path(), 24, 224, 6);
    let datasets = vec![mem_split(&m1, "small"), mem_split(&m2, "large")];
    let cfg = config();
    let shared = stage1_train(&cfg, 1e-3, &datasets).unwrap();
    let before = shared.per_dataset["small"].build_model().unwrap();
    let other_head = shared.per_dataset["large"].head.clone();

    let tuned = stage2_finetune(&shared, &datasets[0].data).unwrap();
    let after = tuned.build_model().unwrap();
    assert_eq!(before.encoder.adapter_checksum().unwrap(), after.encoder.adapter_checksum().unwrap());
    assert_eq!(before.encoder.base_checksum().unwrap(), after.encoder.base_checksum().unwrap());
    assert!(tuned.best_val_metric() >= shared.per_dataset["small"].best_val_metric() - 1e-6);
    assert!(tuned.history.len() <= 2);
    for (k, v) in &other_head {
        let now = &shared.per_dataset["large"].head[k];
        assert_eq!(perceptlab::backbone::max_abs_diff(v, now).unwrap(), 0.0);
    }

    // The encoder output itself is identical before and after.
    let view = before.views(&datasets[0].data.val[0], 0).unwrap();
    let px = before.normalizer().batch(&view).unwrap();
    let e1 = before.encoder.forward(&px, &ForwardOptions::inference()).unwrap().pooled;
    let e2 = after.encoder.forward(&px, &ForwardOptions::inference()).unwrap().pooled;
    assert_eq!(perceptlab::backbone::max_abs_diff(&e1, &e2).unwrap(), 0.0);

    let mut unknown = datasets[0].data.clone();
    unknown.dataset_id = "missing".into();
    assert!(matches!(stage2_finetune(&shared, &unknown), Err(Error::UnknownDataset(_))));
}

#[test]
fn mixed_task_kinds_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m1 = common::brightness_dataset(dir.path(), 12, 224, 7);
    let m2 = common::colour_dataset(dir.path(), 12, 224, 8);
    let reg = mem_split(&m1, "reg");
    let task = TaskSpec::classification(3);
    let ds = common::load(&m2, "cls", task.clone());
    let split = make_splits(&ds.samples, &plan()).unwrap().remove(0);
    let cls = DatasetSplit {
        task,
        data: SplitData::new(&ds, &split),
    };
    assert!(matches!(
        stage1_train(&config(), 1e-3, &[reg.clone(), cls]),
        Err(Error::TaskMismatch(_))
    ));
    assert!(matches!(stage1_train(&config(), 1e-3, &[reg]), Err(Error::Config { .. })));

    let mut cfg = config();
    cfg.datasets = vec![
        DatasetConfig {
            id: "reg".into(),
            manifest: m1,
            task: TaskSpec::new(TaskKind::Memorability),
            split: None,
        },
        DatasetConfig {
            id: "cls".into(),
            manifest: m2,
            task: TaskSpec::classification(3),
            split: None,
        },
    ];
    assert!(matches!(cfg.validate_multi(), Err(Error::Config { .. })));
    cfg.datasets[1].task = TaskSpec::new(TaskKind::Memorability);
    cfg.validate_multi().unwrap();
}
