use std::fs;
use std::path::Path;

use vinil::datagen::{generate_dataset, save_folder_dataset, DatasetConfig, Preset, ProtocolConfig};
use vinil::models::{EncoderConfig, EncoderKind, ModelConfig};
use vinil::runner::{
    emit_reports, load_checkpoint, parse_heatmap_csv, read_checkpoint_meta, run_experiment, run_experiment_with_state,
    save_checkpoint, DatasetSource, ExperimentConfig, FolderDataset, RunRecord, NEIGHBORS_HEADER,
};
use vinil::strategies::{Method, Supervision};
use vinil::Error;

fn tiny_dataset() -> DatasetConfig {
    DatasetConfig {
        preset: Preset::SynthA,
        seed: 4,
        n_categories: 4,
        instances_per_category: 2,
        views_per_instance: 8,
        image_size: 8,
        gallery_fraction: 0.25,
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { kind: EncoderKind::Mlp, input: (3, 8, 8), hidden: vec![16], embed_dim: 8 },
        use_projector: true,
        projector_hidden: 16,
        projector_dim: 8,
    }
}

fn tiny(method: Method, supervision: Supervision, dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        dataset: DatasetSource::Synthetic(tiny_dataset()),
        model: tiny_model(),
        protocol: ProtocolConfig { n_tasks: 2, categories_per_task: 2, ..Default::default() },
        k_nn: 1,
        output_dir: dir.to_path_buf(),
        ..Default::default()
    };
    c.strategy.method = method;
    c.strategy.supervision = supervision;
    c.strategy.hyper.epochs_per_session = 2;
    c.strategy.hyper.batch_size = 8;
    c.optimizer.base_lr = 0.01;
    c
}

#[test]
fn identical_configs_give_identical_metrics() {
    let root = tempfile::tempdir().unwrap();
    for m in Method::ALL {
        for s in [Supervision::Label, Supervision::SelfSupervised] {
            let a = run_experiment(&tiny(m, s, &root.path().join("a"))).unwrap();
            // the config snapshot in the record reproduces the run
            let mut echo = a.config.clone();
            echo.output_dir = root.path().join("b");
            let b = run_experiment(&echo).unwrap();
            assert_eq!(
                fs::read(root.path().join("a/metrics.json")).unwrap(),
                fs::read(root.path().join("b/metrics.json")).unwrap(),
                "{m:?}/{s:?}"
            );
            assert_eq!(a.matrix, b.matrix);
            assert_eq!(a.neighbors, b.neighbors);
            assert_eq!(fs::read(root.path().join("a/checkpoint.bin")).unwrap(), fs::read(root.path().join("b/checkpoint.bin")).unwrap());
        }
    }
}

#[test]
fn seeds_give_distinct_reproducible_runs() {
    let root = tempfile::tempdir().unwrap();
    let mut checkpoints = Vec::new();
    for seed in 0..3 {
        let mut c = tiny(Method::Finetune, Supervision::SelfSupervised, &root.path().join(seed.to_string()));
        c.seed = seed;
        run_experiment(&c).unwrap();
        checkpoints.push(fs::read(c.output_dir.join("checkpoint.bin")).unwrap());
    }
    assert_ne!(checkpoints[0], checkpoints[1]);
    assert_ne!(checkpoints[1], checkpoints[2]);
    assert_ne!(checkpoints[0], checkpoints[2]);
}

#[test]
fn zero_epochs_still_reports() {
    let root = tempfile::tempdir().unwrap();
    let mut c = tiny(Method::Ewc, Supervision::Label, root.path());
    c.strategy.hyper.epochs_per_session = 0;
    let r = run_experiment(&c).unwrap();
    assert_eq!(r.matrix.n_sessions(), 2);
    assert!(r.metrics.forgetting.is_some());
    for f in ["metrics.json", "heatmap_ewc-label.csv", "heatmap.svg", "neighbors.txt", "run_record.json", "checkpoint.bin", "checkpoint.json"] {
        assert!(root.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn replay_memory_keeps_a_tenth_of_a_250_sample_task() {
    let root = tempfile::tempdir().unwrap();
    let mut c = tiny(Method::Replay, Supervision::Label, root.path());
    // 2 categories x 5 instances x (33 - 8 gallery) views = 250 training samples
    c.dataset = DatasetSource::Synthetic(DatasetConfig {
        n_categories: 2,
        instances_per_category: 5,
        views_per_instance: 33,
        ..tiny_dataset()
    });
    c.protocol.n_tasks = 1;
    c.strategy.hyper.epochs_per_session = 1;
    let out = run_experiment_with_state(&c).unwrap();
    assert_eq!(out.record.buffer_size, 25);
    assert!(out.record.metrics.forgetting.is_none());
    let meta = read_checkpoint_meta(&root.path().join("checkpoint.bin")).unwrap();
    assert_eq!(meta.buffer_size, 25);
    assert_eq!(meta.buffer_per_task, [(0, 25)].into());
    assert!(meta.labeled_memory);
    assert_eq!(meta.num_instances, 10);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    for (m, s) in [(Method::Ewc, Supervision::Label), (Method::Replay, Supervision::SelfSupervised)] {
        let dir = root.path().join(m.name());
        let out = run_experiment_with_state(&tiny(m, s, &dir)).unwrap();
        let first = dir.join("checkpoint.bin");
        let (model, state) = load_checkpoint(&first, &tiny_model()).unwrap();
        assert_eq!(model, out.model);
        assert_eq!(state, out.state);
        let second = dir.join("again.bin");
        save_checkpoint(&model, &state, &second).unwrap();
        assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    }
}

#[test]
fn bad_checkpoints_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let out = run_experiment_with_state(&tiny(Method::Finetune, Supervision::Label, root.path())).unwrap();
    let path = root.path().join("checkpoint.bin");
    let bytes = fs::read(&path).unwrap();

    let bad = root.path().join("bad.bin");
    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    fs::write(&bad, &corrupt).unwrap();
    let err = load_checkpoint(&bad, &tiny_model()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { offset: 0, .. }), "{err}");

    fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
    let err = load_checkpoint(&bad, &tiny_model()).unwrap_err();
    match err {
        Error::Checkpoint { offset, ref msg } => {
            assert!(offset > 0 && msg.contains("truncated"), "{err}");
            assert!(err.to_string().contains(&format!("byte {offset}")));
        }
        other => panic!("unexpected {other}"),
    }

    let mut wider = tiny_model();
    wider.encoder.hidden = vec![12];
    let err = load_checkpoint(&path, &wider).unwrap_err().to_string();
    assert!(err.contains("[16]") && err.contains("[12]"), "{err}");

    // a valid file still restores with its own config
    assert_eq!(load_checkpoint(&path, &tiny_model()).unwrap().0, out.model);
}

#[test]
fn reports_parse_back() {
    let root = tempfile::tempdir().unwrap();
    let r = run_experiment(&tiny(Method::Replay, Supervision::SelfSupervised, root.path())).unwrap();
    let csv = fs::read_to_string(root.path().join("heatmap_replay-self.csv")).unwrap();
    assert_eq!(parse_heatmap_csv(&csv).unwrap(), r.matrix);
    assert_eq!(csv.lines().count(), 3);

    let neighbors = fs::read_to_string(root.path().join("neighbors.txt")).unwrap();
    let mut lines = neighbors.lines();
    assert_eq!(lines.next(), Some(NEIGHBORS_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3 * 5);
    for q in rows.chunks(5) {
        let ranks: Vec<&str> = q.iter().map(|r| r[3]).collect();
        assert_eq!(ranks, ["1", "2", "3", "4", "5"]);
        let d: Vec<f64> = q.iter().map(|r| r[6].parse().unwrap()).collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
        assert!(q.iter().all(|r| r[0] == q[0][0] && r[4] != r[0]));
    }

    let back = RunRecord::load(&root.path().join("run_record.json")).unwrap();
    assert_eq!(back, r);

    let blocker = root.path().join("file");
    fs::write(&blocker, "x").unwrap();
    assert!(emit_reports(&r, &blocker.join("sub")).is_err());
}

#[test]
fn cross_dataset_row_is_reported() {
    let root = tempfile::tempdir().unwrap();
    let mut c = tiny(Method::Finetune, Supervision::SelfSupervised, root.path());
    c.cross_dataset = Some(DatasetSource::Synthetic(DatasetConfig { preset: Preset::SynthB, ..tiny_dataset() }));
    let r = run_experiment(&c).unwrap();
    let cross = r.metrics.cross.as_ref().unwrap();
    assert_eq!(cross.dataset, "synthB");
    let expected = 100.0 * (r.metrics.acc - cross.acc) / r.metrics.acc;
    assert!((cross.rel_drop_pct - expected).abs() < 1e-12);
    let json = fs::read_to_string(root.path().join("metrics.json")).unwrap();
    assert!(json.contains("\"rel_drop_pct\""));
}

#[test]
fn folder_dataset_matches_generated_one() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    save_folder_dataset(&data, &generate_dataset(&tiny_dataset()).unwrap()).unwrap();
    let synthetic = run_experiment(&tiny(Method::Finetune, Supervision::Label, &root.path().join("a"))).unwrap();
    let mut c = tiny(Method::Finetune, Supervision::Label, &root.path().join("b"));
    c.dataset = DatasetSource::Folder(FolderDataset { path: data, gallery_fraction: 0.25, seed: 4 });
    let folder = run_experiment(&c).unwrap();
    assert_eq!(folder.matrix, synthetic.matrix);
    assert_eq!(folder.metrics, synthetic.metrics);
}

#[test]
fn config_rejects_unknown_keys() {
    let good = ExperimentConfig::default().to_json();
    assert_eq!(ExperimentConfig::from_json(&good).unwrap(), ExperimentConfig::default());
    assert!(ExperimentConfig::from_json(r#"{"sed": 1}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"strategy": {"hyper": {"wc": 0.5}}}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"dataset": {"synthetic": {"presets": "synthA"}}}"#).is_err());
    let partial = ExperimentConfig::from_json(r#"{"seed": 9, "strategy": {"method": "ewc", "supervision": "self"}}"#).unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.strategy.method, Method::Ewc);
    assert_eq!(partial.strategy.hyper.w_c, 0.7);
}

#[test]
fn defaults_and_full_scale() {
    let d = ExperimentConfig::default();
    assert_eq!((d.strategy.hyper.w_c, d.strategy.hyper.w_b), (0.7, 0.03));
    assert_eq!((d.optimizer.momentum, d.optimizer.base_lr), (0.9, 0.001));
    assert_eq!((d.strategy.hyper.epochs_per_session, d.strategy.hyper.batch_size), (20, 64));
    assert_eq!(d.strategy.memory_fraction, 0.1);
    let p = ExperimentConfig::full_scale();
    assert_eq!((p.strategy.hyper.epochs_per_session, p.strategy.hyper.batch_size, p.k_nn), (200, 256, 100));
    d.validate().unwrap();
    p.validate().unwrap();
}

#[test]
fn invalid_configs_fail_before_training() {
    let root = tempfile::tempdir().unwrap();
    let mut c = tiny(Method::Replay, Supervision::Label, root.path());
    c.strategy.memory_fraction = 0.0;
    assert!(run_experiment(&c).is_err());
    let mut c = tiny(Method::Finetune, Supervision::Label, root.path());
    c.model.encoder.input = (3, 16, 16);
    assert!(matches!(run_experiment(&c), Err(Error::Config(_))));
    let mut c = tiny(Method::Finetune, Supervision::Label, root.path());
    c.protocol.n_tasks = 3;
    assert!(run_experiment(&c).is_err());
    assert!(!root.path().join("metrics.json").exists());
}
