use std::path::Path;

use margl::checkpoint::{load_model, save_model, Checkpoint};
use margl::data::{generate_synthetic, load_dataset, make_folds, Dataset, SynthConfig};
use margl::harness::{evaluate, train, train_fold, visualize, TrainConfig};
use margl::kv::KeyValues;
use margl::network::{Model, ModelConfig};
use margl::Error;

fn dataset(dir: &Path, text: &str) -> Dataset {
    let cfg = SynthConfig::from_kv(&KeyValues::parse(text).unwrap()).unwrap();
    generate_synthetic(&cfg, dir).unwrap();
    load_dataset(dir).unwrap()
}

fn config(text: &str) -> TrainConfig {
    TrainConfig::from_kv(&KeyValues::parse(text).unwrap()).unwrap()
}

#[test]
fn smoke_run_loss_goes_down_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "subjects=6\nframes=6\nseed=1\n");
    let cfg = config("num_aus=6\nepochs=2\nlr=0.05\nfold=1\n");
    let a = train_fold(&cfg, &data, 0, None).unwrap();
    assert_eq!(a.epochs.len(), 2);
    assert!(a.epochs[1].loss <= a.epochs[0].loss, "{:?}", a.epochs);
    let b = train_fold(&cfg, &data, 0, None).unwrap();
    assert!((a.epochs[0].loss - b.epochs[0].loss).abs() < 1e-6);
    assert_eq!(a, b);
}

#[test]
fn overfit_tiny_run_scores_its_own_training_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "subjects=4\nframes=10\nseed=2\nnum_aus=3\nnoise=0.01\n");
    let cfg = config("num_aus=3\nepochs=50\nbatch_size=4\nlr=0.05\nfolds=2\nfold=1\nval_fraction=0\nweight_decay=0\npreset=roi\n");
    let out = tempfile::tempdir().unwrap();
    let rec = train_fold(&cfg, &data, 0, Some(out.path())).unwrap();
    let (model, _) = load_model(&out.path().join("fold1.ckpt")).unwrap();
    let split = make_folds(&data.subjects(), 2, cfg.split_seed).unwrap();
    let (train_idx, _) = split.indices(&data, 0);
    let (report, _) = evaluate(&model, &data, &train_idx).unwrap();
    assert!(report.mean_f1 > 0.95, "F1 {} after {:?}", report.mean_f1, rec.epochs.last());
}

#[test]
fn run_record_mean_is_the_mean_of_fold_means() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "subjects=6\nframes=3\nseed=3\n");
    let out = tempfile::tempdir().unwrap();
    let mut cfg = config("num_aus=6\nepochs=1\npreset=aroi\n");
    cfg.output = Some(out.path().to_path_buf());
    let rec = train(&cfg, &data).unwrap();
    assert_eq!(rec.folds.len(), 3);
    let mean = rec.folds.iter().map(|f| f.report.mean_f1).sum::<f64>() / 3.0;
    assert!((rec.mean_f1 - mean).abs() < 1e-9);
    for k in 1..=3 {
        assert!(out.path().join(format!("fold{k}.ckpt")).exists());
    }
    let text = std::fs::read_to_string(out.path().join("run.json")).unwrap();
    let back: margl::harness::RunRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(back.folds.len(), 3);
    assert!((back.mean_f1 - rec.mean_f1).abs() < 1e-12);
    assert_eq!(back.config, rec.config);
}

#[test]
fn evaluation_is_deterministic_and_checks_the_au_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "subjects=2\nframes=3\nseed=4\n");
    let model = Model::new(ModelConfig { num_aus: 6, ..ModelConfig::default() }, 5).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (a, pa) = evaluate(&model, &data, &idx).unwrap();
    let (b, pb) = evaluate(&model, &data, &idx).unwrap();
    assert_eq!(a, b);
    assert_eq!(pa, pb);

    let wide = tempfile::tempdir().unwrap();
    let data12 = dataset(wide.path(), "subjects=2\nframes=2\nseed=4\nnum_aus=12\n");
    match evaluate(&model, &data12, &[0]) {
        Err(Error::Mismatch(m)) => assert!(m.contains("num_aus"), "{m}"),
        other => panic!("expected a mismatch, got {other:?}"),
    }
}

#[test]
fn checkpoint_files_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "subjects=2\nframes=2\nseed=6\n");
    let cfg = config("num_aus=6\nepochs=1\nfolds=2\nfold=1\nlr=0.05\n");
    let out = tempfile::tempdir().unwrap();
    train_fold(&cfg, &data, 0, Some(out.path())).unwrap();
    let path = out.path().join("fold1.ckpt");
    let (model, meta) = load_model(&path).unwrap();
    assert_eq!(meta.get("au_names"), Some("AU1,AU2,AU3,AU4,AU5,AU6"));
    let again = out.path().join("again.ckpt");
    save_model(&model, meta.clone(), &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
}

#[test]
fn untrained_boxes_coincide_and_stay_inside_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "subjects=1\nframes=2\nseed=8\n");
    let model = Model::new(ModelConfig { num_aus: 6, ..ModelConfig::default() }, 1).unwrap();
    let out = tempfile::tempdir().unwrap();
    let report = visualize(&model, &data, &[0, 1], out.path()).unwrap();
    let size = data.samples[0].width as f64;
    for o in &report.overlays {
        assert_eq!(o.files.len(), 3);
        for f in &o.files {
            assert!(out.path().join(f).exists());
        }
        for b in &o.boxes {
            for (i, r) in b.initial.iter().zip(&b.refined) {
                assert!((i - r).abs() < 1e-9);
            }
            assert!(b.refined.iter().all(|&v| (0.0..=size).contains(&v)), "{b:?}");
        }
    }
    let iou = report.iou.unwrap();
    assert!(iou.per_au.iter().all(|a| a.initial == a.refined));
    assert!(out.path().join("iou.json").exists());
}
