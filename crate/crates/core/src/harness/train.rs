use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::{evaluate, roi_iou, IouReport};
use crate::checkpoint::save_model;
use crate::data::{augment, make_folds, validation_split, Dataset, Mode};
use crate::error::{Error, Result};
use crate::graph::{build_intra, cooccurrence};
use crate::kv::KeyValues;
use crate::network::Model;
use crate::objective::{class_weights, occurrence_rates, ClassWeights, EvalReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss per training sample.
    pub loss: f64,
    /// Mean loss per branch, global first, then levels.
    pub branch_losses: Vec<f64>,
    pub validation_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub test_subjects: Vec<String>,
    pub validation_subjects: Vec<String>,
    pub train_samples: usize,
    pub class_weights: ClassWeights,
    pub intra_edges: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub report: EvalReport,
    pub iou: Option<IouReport>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub folds: Vec<FoldRecord>,
    /// Mean over folds of each fold's mean F1.
    pub mean_f1: f64,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// The record without its timing, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

pub fn mean_of_fold_means(folds: &[FoldRecord]) -> f64 {
    if folds.is_empty() {
        return 0.0;
    }
    folds.iter().map(|f| f.report.mean_f1).sum::<f64>() / folds.len() as f64
}

/// Stochastic gradient descent with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Applies the accumulated gradients, averaged over `batch`, then clears them.
    pub fn step(&mut self, model: &mut Model, cfg: &TrainConfig, lr: f64, batch: usize) {
        let inv = 1.0 / batch as f64;
        for (p, v) in model.params_mut().into_iter().zip(&mut self.velocity) {
            let decay = if p.name.ends_with(".bias") || p.name.contains(".aroi.") {
                0.0
            } else {
                cfg.weight_decay
            };
            let rate = if p.name.contains(".aroi.") { lr * cfg.aroi_lr_scale } else { lr };
            for ((w, g), vel) in p.value.iter_mut().zip(&mut p.grad).zip(v.iter_mut()) {
                *vel = cfg.momentum * *vel + *g * inv + decay * *w;
                *w -= rate * *vel;
                *g = 0.0;
            }
        }
    }
}

fn label_matrix(data: &Dataset, idx: &[usize]) -> Array2<u8> {
    let c = data.num_aus();
    Array2::from_shape_fn((idx.len(), c), |(i, j)| data.samples[idx[i]].labels[j])
}

fn check_dataset(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if cfg.model.num_aus != data.num_aus() {
        return Err(Error::Mismatch(format!(
            "num_aus: model expects {} AUs but the dataset has {}",
            cfg.model.num_aus,
            data.num_aus()
        )));
    }
    let s = &data.samples[0];
    if s.width < cfg.model.input_size || s.height < cfg.model.input_size {
        return Err(Error::Mismatch(format!(
            "input_size: {} does not fit the {}x{} images",
            cfg.model.input_size, s.width, s.height
        )));
    }
    Ok(())
}

/// Trains one fold and returns its record; writes `fold<k>.ckpt` when `out_dir` is set.
pub fn train_fold(cfg: &TrainConfig, data: &Dataset, fold: usize, out_dir: Option<&Path>) -> Result<FoldRecord> {
    check_dataset(cfg, data)?;
    let split = make_folds(&data.subjects(), cfg.folds, cfg.split_seed)?;
    let fold_train = split.train_subjects(fold);
    let (train_subjects, val_subjects) =
        validation_split(&fold_train, cfg.val_fraction, cfg.split_seed ^ fold as u64);
    let pick = |subjects: &[String]| -> Vec<usize> {
        (0..data.len())
            .filter(|&i| subjects.contains(&data.samples[i].subject))
            .collect()
    };
    let stats_idx = pick(&fold_train);
    let mut train_idx = pick(&train_subjects);
    let val_idx = pick(&val_subjects);
    let (_, test_idx) = split.indices(data, fold);
    if cfg.max_train_samples > 0 && train_idx.len() > cfg.max_train_samples {
        train_idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
        train_idx.truncate(cfg.max_train_samples);
        train_idx.sort_unstable();
    }
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Load(format!("fold {} has an empty train or test split", fold + 1)));
    }

    let labels = label_matrix(data, &stats_idx);
    let weights = class_weights(&occurrence_rates(labels.view())?)?;
    let stats = cooccurrence(labels.view())?;
    let intra = build_intra(&stats, cfg.model.p_pos, cfg.model.symmetrize);

    let run_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(fold as u64);
    let mut model = Model::new(cfg.model.clone(), run_seed)?;
    model.set_intra(intra)?;
    let intra_edges = crate::graph::RelationGraph::edge_count(&model.graph().intra);
    let has_oracle = data.has_oracle() && !model.config.active_levels().is_empty();
    let iou_before = if has_oracle { Some(roi_iou(&model, data, &test_idx)?) } else { None };

    let mut rng = ChaCha8Rng::seed_from_u64(run_seed ^ 0xa5a5_5a5a);
    let mut opt = Sgd::new(&model);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;
    let input = cfg.model.input_size;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut branch_sum: Vec<f64> = Vec::new();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            for &i in batch {
                let s = &data.samples[i];
                let a = augment(s, &data.rules, input, Mode::Train, &mut rng)?;
                let (_, losses) = model.accumulate(&a.image, &a.centers, &s.labels, &weights).map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!(
                        "fold {} epoch {} batch {}: {m} (subject {} frame {}); try a lower lr",
                        fold + 1,
                        epoch + 1,
                        b + 1,
                        s.subject,
                        s.frame
                    )),
                    other => other,
                })?;
                if branch_sum.is_empty() {
                    branch_sum = vec![0.0; losses.len()];
                }
                for (acc, l) in branch_sum.iter_mut().zip(&losses) {
                    *acc += l;
                }
                total += losses.iter().sum::<f64>();
            }
            opt.step(&mut model, cfg, lr, batch.len());
        }
        let n = order.len() as f64;
        let validation_f1 = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate(&model, data, &val_idx)?.0.mean_f1)
        };
        log::info!(
            "fold {} epoch {}/{}: loss {:.4} val F1 {}",
            fold + 1,
            epoch + 1,
            cfg.epochs,
            total / n,
            validation_f1.map_or("-".into(), |f| format!("{f:.4}"))
        );
        // ties go to the later epoch; without a validation split the last epoch wins
        let score = validation_f1.unwrap_or(0.0);
        if best.as_ref().is_none_or(|(s, _, _)| score >= *s) {
            best = Some((score, epoch, model.params().iter().map(|p| p.value.clone()).collect()));
        }
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: total / n,
            branch_losses: branch_sum.iter().map(|l| l / n).collect(),
            validation_f1,
        });
    }
    let (_, best_epoch, values) = best.expect("at least one epoch");
    for (p, v) in model.params_mut().into_iter().zip(values) {
        p.value = v;
    }

    let (report, _) = evaluate(&model, data, &test_idx)?;
    let iou = match iou_before {
        Some(before) => Some(before.with_refined(&roi_iou(&model, data, &test_idx)?)),
        None => None,
    };
    let checkpoint = match out_dir {
        None => None,
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("fold{}.ckpt", fold + 1));
            let mut meta = KeyValues::new();
            meta.set("au_names", data.au_names.join(","));
            meta.set("fold", fold + 1);
            meta.set("folds", cfg.folds);
            meta.set("split_seed", cfg.split_seed);
            meta.set("seed", cfg.seed);
            meta.set("best_epoch", best_epoch + 1);
            save_model(&model, meta, &path)?;
            Some(path.display().to_string())
        }
    };
    Ok(FoldRecord {
        fold: fold + 1,
        test_subjects: split.test_subjects(fold).to_vec(),
        validation_subjects: val_subjects,
        train_samples: train_idx.len(),
        class_weights: weights,
        intra_edges,
        epochs,
        best_epoch: best_epoch + 1,
        report,
        iou,
        checkpoint,
    })
}

/// Trains every selected fold. Writes checkpoints and `run.json` under `cfg.output` when set.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let out = cfg.output.as_deref();
    let folds = cfg
        .selected_folds()
        .into_iter()
        .map(|f| train_fold(cfg, data, f, out))
        .collect::<Result<Vec<_>>>()?;
    let record = RunRecord {
        version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
        config: cfg.to_kv().iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        seed: cfg.seed,
        mean_f1: mean_of_fold_means(&folds),
        folds,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(record)
}
