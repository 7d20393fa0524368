use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::network::config::MODEL_KEYS;
use crate::network::ModelConfig;

const TRAIN_KEYS: &[&str] = &[
    "dataset",
    "output",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "decay_at",
    "decay_factor",
    "aroi_lr_scale",
    "seed",
    "split_seed",
    "folds",
    "fold",
    "val_fraction",
    "max_train_samples",
];

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of the epochs after which the learning rate is multiplied by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Learning-rate multiplier for the scale-factor heads.
    pub aroi_lr_scale: f64,
    /// Seeds initialization, shuffling and augmentation.
    pub seed: u64,
    /// Seeds the subject partition, so that runs with different `seed` share folds.
    pub split_seed: u64,
    pub folds: usize,
    /// Folds to run, zero-based; empty means all.
    pub fold_select: Vec<usize>,
    pub val_fraction: f64,
    /// Caps the per-fold training set, mainly for smoke runs. Zero means no cap.
    pub max_train_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output: None,
            model: ModelConfig::default(),
            epochs: 20,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_at: 2.0 / 3.0,
            decay_factor: 0.1,
            aroi_lr_scale: 1.0,
            seed: 0,
            split_seed: 0,
            folds: 3,
            fold_select: Vec::new(),
            val_fraction: 0.1,
            max_train_samples: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let known: Vec<&str> = TRAIN_KEYS.iter().chain(MODEL_KEYS).copied().collect();
        kv.reject_unknown(&known)?;
        let base = Self::default();
        let fold_select = match kv.get("fold") {
            None | Some("all") => Vec::new(),
            Some(_) => kv
                .list_or::<usize>("fold", Vec::new())?
                .into_iter()
                .map(|f| {
                    f.checked_sub(1)
                        .ok_or_else(|| Error::Config("fold numbers start at 1".into()))
                })
                .collect::<Result<_>>()?,
        };
        let cfg = Self {
            dataset: kv.get("dataset").map(PathBuf::from),
            output: kv.get("output").map(PathBuf::from),
            model: ModelConfig::from_kv(kv, base.model)?,
            epochs: kv.parse_or("epochs", base.epochs)?,
            batch_size: kv.parse_or("batch_size", base.batch_size)?,
            lr: kv.parse_or("lr", base.lr)?,
            momentum: kv.parse_or("momentum", base.momentum)?,
            weight_decay: kv.parse_or("weight_decay", base.weight_decay)?,
            decay_at: kv.parse_or("decay_at", base.decay_at)?,
            decay_factor: kv.parse_or("decay_factor", base.decay_factor)?,
            aroi_lr_scale: kv.parse_or("aroi_lr_scale", base.aroi_lr_scale)?,
            seed: kv.parse_or("seed", base.seed)?,
            split_seed: kv.parse_or("split_seed", base.split_seed)?,
            folds: kv.parse_or("folds", base.folds)?,
            fold_select,
            val_fraction: kv.parse_or("val_fraction", base.val_fraction)?,
            max_train_samples: kv.parse_or("max_train_samples", base.max_train_samples)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.decay_at) || !(self.decay_factor > 0.0) {
            return bad("decay_at must lie in [0, 1] and decay_factor be positive".into());
        }
        if !(self.aroi_lr_scale >= 0.0) {
            return bad(format!("aroi_lr_scale must be non-negative, got {}", self.aroi_lr_scale));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.folds == 0 {
            return bad("folds must be positive".into());
        }
        if let Some(f) = self.fold_select.iter().find(|&&f| f >= self.folds) {
            return bad(format!("fold {} out of range 1..={}", f + 1, self.folds));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 0.5), got {}", self.val_fraction));
        }
        self.model.validate()
    }

    pub fn selected_folds(&self) -> Vec<usize> {
        if self.fold_select.is_empty() {
            (0..self.folds).collect()
        } else {
            self.fold_select.clone()
        }
    }

    /// Epoch index from which the decayed learning rate applies.
    pub fn decay_epoch(&self) -> usize {
        (self.epochs as f64 * self.decay_at).round() as usize
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        if let Some(d) = &self.dataset {
            kv.set("dataset", d.display());
        }
        if let Some(o) = &self.output {
            kv.set("output", o.display());
        }
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("decay_at", self.decay_at);
        kv.set("decay_factor", self.decay_factor);
        kv.set("aroi_lr_scale", self.aroi_lr_scale);
        kv.set("seed", self.seed);
        kv.set("split_seed", self.split_seed);
        kv.set("folds", self.folds);
        if !self.fold_select.is_empty() {
            let list: Vec<String> = self.fold_select.iter().map(|f| (f + 1).to_string()).collect();
            kv.set("fold", list.join(","));
        }
        kv.set("val_fraction", self.val_fraction);
        kv.set("max_train_samples", self.max_train_samples);
        for (k, v) in self.model.to_kv().iter() {
            kv.set(k, v);
        }
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_schedule() {
        let kv = KeyValues::parse("epochs=9\nfold=1,3\npreset=roi\nlr=0.02\n").unwrap();
        let cfg = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.selected_folds(), vec![0, 2]);
        assert!(!cfg.model.switches.use_adaptive);
        assert_eq!(cfg.decay_epoch(), 6);
        assert_eq!(cfg.lr_at(5), 0.02);
        assert!((cfg.lr_at(6) - 0.002).abs() < 1e-15);
        let back = TrainConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        for text in ["lr=0\n", "lr=-1\n", "fold=4\n", "fold=0\n", "epochs=0\n", "colour=red\n"] {
            let err = TrainConfig::from_kv(&KeyValues::parse(text).unwrap()).unwrap_err();
            assert_eq!(err.reason(), "config", "{text}");
        }
    }
}
