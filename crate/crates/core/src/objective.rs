//! Class-balanced multi-label loss and frame-level F1.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of samples in which each AU is active, floored at `1 / (2N)`.
pub fn occurrence_rates(labels: ArrayView2<'_, u8>) -> Result<Vec<f64>> {
    let (n, c) = labels.dim();
    if n == 0 {
        return Err(Error::Input("occurrence rates need at least one sample".into()));
    }
    let floor = 1.0 / (2.0 * n as f64);
    Ok((0..c)
        .map(|j| {
            let pos = labels.column(j).iter().filter(|&&v| v != 0).count();
            let r = pos as f64 / n as f64;
            if pos == 0 {
                floor
            } else {
                r
            }
        })
        .collect())
}

/// Per-AU loss weights inversely proportional to occurrence, summing to the AU count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(c: usize) -> Self {
        Self {
            weights: vec![1.0; c],
            rates: vec![0.5; c],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn class_weights(rates: &[f64]) -> Result<ClassWeights> {
    if rates.is_empty() {
        return Err(Error::Input("no occurrence rates".into()));
    }
    if let Some(r) = rates.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::Input(format!("occurrence rate {r} outside (0, 1]")));
    }
    let c = rates.len() as f64;
    let inv_sum: f64 = rates.iter().map(|r| 1.0 / r).sum();
    Ok(ClassWeights {
        weights: rates.iter().map(|r| (1.0 / r) * c / inv_sum).collect(),
        rates: rates.to_vec(),
    })
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-(1/C) Σ w_i [y_i log p_i + (1 - y_i) log(1 - p_i)]` with `p = sigmoid(logit)`,
/// evaluated as `max(z, 0) - z y + log(1 + e^{-|z|})`.
pub fn weighted_bce(logits: &[f64], labels: &[u8], weights: &[f64]) -> f64 {
    debug_assert_eq!(logits.len(), labels.len());
    debug_assert_eq!(logits.len(), weights.len());
    let c = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&z, &y), &w)| {
            let y = f64::from(y);
            w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        })
        .sum::<f64>()
        / c
}

/// Gradient of [`weighted_bce`] with respect to the logits.
pub fn weighted_bce_grad(logits: &[f64], labels: &[u8], weights: &[f64]) -> Vec<f64> {
    let c = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&z, &y), &w)| w * (sigmoid(z) - f64::from(y)) / c)
        .collect()
}

/// Logit vectors of every branch of one forward pass. Absent branches are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub global: Option<Vec<f64>>,
    pub levels: Vec<Option<Vec<f64>>>,
    pub fused: Vec<f64>,
}

impl PredictionSet {
    pub fn branches(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.global.iter().chain(self.levels.iter().flatten())
    }

    pub fn branch_count(&self) -> usize {
        self.branches().count()
    }
}

/// Unweighted sum of [`weighted_bce`] over every present branch.
pub fn total_loss(preds: &PredictionSet, labels: &[u8], weights: &ClassWeights) -> f64 {
    preds
        .branches()
        .map(|b| weighted_bce(b, labels, &weights.weights))
        .sum()
}

/// Per-branch loss values, global first then levels in order (absent ones skipped).
pub fn branch_losses(preds: &PredictionSet, labels: &[u8], weights: &ClassWeights) -> Vec<f64> {
    preds
        .branches()
        .map(|b| weighted_bce(b, labels, &weights.weights))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuScore {
    pub au: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_au: Vec<AuScore>,
    pub mean_f1: f64,
    pub threshold: f64,
    pub samples: usize,
}

/// Frame-level F1 per AU after thresholding probabilities.
///
/// `names` labels the AUs in the report; when shorter than the AU count the
/// remaining ones are named `AU<index>`.
pub fn f1_frame(
    probs: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, u8>,
    threshold: f64,
    names: &[String],
) -> Result<EvalReport> {
    if probs.dim() != labels.dim() {
        return Err(Error::Mismatch(format!(
            "predictions are {:?} but labels are {:?}",
            probs.dim(),
            labels.dim()
        )));
    }
    let (n, c) = probs.dim();
    let mut per_au = Vec::with_capacity(c);
    for j in 0..c {
        let mut conf = Confusion::default();
        for i in 0..n {
            let pred = probs[[i, j]] >= threshold;
            let truth = labels[[i, j]] != 0;
            match (pred, truth) {
                (true, true) => conf.tp += 1,
                (true, false) => conf.fp += 1,
                (false, true) => conf.fn_ += 1,
                (false, false) => conf.tn += 1,
            }
        }
        per_au.push(AuScore {
            au: names.get(j).cloned().unwrap_or_else(|| format!("AU{}", j + 1)),
            f1: conf.f1(),
            precision: conf.precision(),
            recall: conf.recall(),
            confusion: conf,
        });
    }
    let mean_f1 = if c == 0 {
        0.0
    } else {
        per_au.iter().map(|s| s.f1).sum::<f64>() / c as f64
    };
    Ok(EvalReport {
        per_au,
        mean_f1,
        threshold,
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn occurrence_examples() {
        assert_eq!(occurrence_rates(array![[1u8, 0], [1, 1]].view()).unwrap(), vec![1.0, 0.5]);
        assert_eq!(occurrence_rates(Array2::<u8>::ones((4, 1)).view()).unwrap(), vec![1.0]);
        let empty = Array2::<u8>::zeros((10, 1));
        assert_eq!(occurrence_rates(empty.view()).unwrap(), vec![0.05]);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(class_weights(&[0.5, 0.5]).unwrap().weights, vec![1.0, 1.0]);
        // 1/0.2 = 5, 1/0.8 = 1.25, sum 6.25: w = (5·2/6.25, 1.25·2/6.25) = (1.6, 0.4).
        let w = class_weights(&[0.2, 0.8]).unwrap().weights;
        assert!((w[0] - 1.6).abs() < 1e-15 && (w[1] - 0.4).abs() < 1e-15);
        assert!(class_weights(&[0.0, 0.5]).is_err());
    }

    #[test]
    fn bce_limits() {
        assert!(weighted_bce(&[20.0], &[1], &[1.0]) < 1e-8);
        let l = weighted_bce(&[0.0, 0.0], &[1, 0], &[1.0, 1.0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(weighted_bce(&[800.0], &[0], &[1.0]).is_finite());
    }

    #[test]
    fn bce_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let c = rng.random_range(1..8);
            let z: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..6.0)).collect();
            let y: Vec<u8> = (0..c).map(|_| u8::from(rng.random_bool(0.4))).collect();
            let w: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..3.0)).collect();
            let naive: f64 = -(0..c)
                .map(|i| {
                    let p = 1.0 / (1.0 + (-z[i]).exp());
                    let yi = y[i] as f64;
                    w[i] * (yi * p.ln() + (1.0 - yi) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / c as f64;
            assert!((weighted_bce(&z, &y, &w) - naive).abs() < 1e-9);
        }
    }

    fn preds(branches: Vec<Vec<f64>>) -> PredictionSet {
        let mut it = branches.into_iter();
        let global = it.next();
        let levels: Vec<Option<Vec<f64>>> = it.map(Some).collect();
        PredictionSet { fused: global.clone().unwrap(), global, levels }
    }

    #[test]
    fn total_loss_is_branch_sum() {
        let w = ClassWeights::uniform(2);
        let y = [1u8, 0];
        let p = vec![0.3, -1.2];
        let single = weighted_bce(&p, &y, &w.weights);
        assert!((total_loss(&preds(vec![p.clone()]), &y, &w) - single).abs() < 1e-15);
        let four = preds(vec![p.clone(), p.clone(), p.clone(), p]);
        assert!((total_loss(&four, &y, &w) - 4.0 * single).abs() < 1e-14);
        let perfect = preds(vec![vec![40.0, -40.0]; 4]);
        assert!(total_loss(&perfect, &y, &w) < 1e-7);
    }

    #[test]
    fn f1_examples() {
        let labels = array![[1u8, 0], [0, 1], [1, 1]];
        let perfect = labels.mapv(|v| v as f64);
        let r = f1_frame(perfect.view(), labels.view(), 0.5, &[]).unwrap();
        assert_eq!(r.mean_f1, 1.0);
        let inverted = labels.mapv(|v| 1.0 - v as f64);
        assert_eq!(f1_frame(inverted.view(), labels.view(), 0.5, &[]).unwrap().mean_f1, 0.0);
        // TP=2, FP=1, FN=1, TN=2.
        let y = array![[1u8], [1], [1], [0], [0], [0]];
        let p = array![[0.9], [0.8], [0.2], [0.7], [0.1], [0.3]];
        let r = f1_frame(p.view(), y.view(), 0.5, &["AU1".into()]).unwrap();
        assert!((r.per_au[0].f1 - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.per_au[0].confusion, Confusion { tp: 2, fp: 1, fn_: 1, tn: 2 });
    }

    #[test]
    fn f1_zero_over_zero_is_zero() {
        let y = Array2::<u8>::zeros((3, 1));
        let p = Array2::<f64>::zeros((3, 1));
        assert_eq!(f1_frame(p.view(), y.view(), 0.5, &[]).unwrap().per_au[0].f1, 0.0);
    }

    proptest! {
        #[test]
        fn weights_sum_to_count(rates in proptest::collection::vec(0.001f64..=1.0, 1..20)) {
            let w = class_weights(&rates).unwrap();
            prop_assert!((w.weights.iter().sum::<f64>() - rates.len() as f64).abs() < 1e-9);
            for i in 0..rates.len() {
                for j in 0..rates.len() {
                    if rates[i] < rates[j] {
                        prop_assert!(w.weights[i] > w.weights[j]);
                    }
                }
            }
        }

        #[test]
        fn bce_nonnegative(z in proptest::collection::vec(-30.0f64..30.0, 1..6), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<u8> = z.iter().map(|_| u8::from(rng.random_bool(0.5))).collect();
            let w = vec![1.0; z.len()];
            prop_assert!(weighted_bce(&z, &y, &w) >= 0.0);
        }

        #[test]
        fn f1_invariant_to_order_and_monotone_transforms(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 20;
            let y = Array2::from_shape_fn((n, 3), |_| u8::from(rng.random_bool(0.4)));
            let p = Array2::from_shape_fn((n, 3), |_| rng.random_range(0.0..1.0));
            let base = f1_frame(p.view(), y.view(), 0.5, &[]).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let yp = Array2::from_shape_fn((n, 3), |(i, j)| y[[order[i], j]]);
            let pp = Array2::from_shape_fn((n, 3), |(i, j)| p[[order[i], j]]);
            prop_assert_eq!(&f1_frame(pp.view(), yp.view(), 0.5, &[]).unwrap().per_au, &base.per_au);
            // x -> x^3 shifted to keep 0.5 fixed preserves the threshold side.
            let pt = p.mapv(|x| 0.5 + 4.0 * (x - 0.5).powi(3));
            prop_assert_eq!(&f1_frame(pt.view(), y.view(), 0.5, &[]).unwrap().per_au, &base.per_au);
        }
    }
}
