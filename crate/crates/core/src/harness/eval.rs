use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, oracle_in_crop, Dataset, Mode};
use crate::error::{Error, Result};
use crate::geometry::Corners;
use crate::network::Model;
use crate::objective::{f1_frame, sigmoid, EvalReport};

/// Fused-prediction F1 on `idx` under test-mode cropping. Also returns the probabilities.
pub fn evaluate(model: &Model, data: &Dataset, idx: &[usize]) -> Result<(EvalReport, Array2<f64>)> {
    let c = data.num_aus();
    if model.config.num_aus != c {
        return Err(Error::Mismatch(format!(
            "num_aus: checkpoint has {} AUs but the dataset has {c}",
            model.config.num_aus
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut probs = Array2::zeros((idx.len(), c));
    let mut labels = Array2::zeros((idx.len(), c));
    for (row, &i) in idx.iter().enumerate() {
        let s = &data.samples[i];
        let a = augment(s, &data.rules, model.config.input_size, Mode::Test, &mut rng)?;
        let preds = model.predict(&a.image, &a.centers)?;
        for j in 0..c {
            probs[[row, j]] = sigmoid(preds.fused[j]);
            labels[[row, j]] = s.labels[j];
        }
    }
    let report = f1_frame(probs.view(), labels.view(), 0.5, &data.au_names)?;
    Ok((report, probs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuIou {
    pub au: String,
    /// Mean oracle box size in pixels.
    pub oracle_width: f64,
    pub oracle_height: f64,
    /// Whether the oracle size differs from the initial box size by more than 10% on some side.
    pub differs_from_prior: bool,
    pub initial: f64,
    pub refined: f64,
}

/// Mean IoU against oracle regions, averaged over samples, sides and active levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_au: Vec<AuIou>,
    /// Means over the AUs whose oracle size differs from the prior.
    pub initial_mean: f64,
    pub refined_mean: f64,
    pub gain: f64,
}

impl IouReport {
    fn summarize(per_au: Vec<AuIou>) -> Self {
        let chosen: Vec<&AuIou> = per_au.iter().filter(|a| a.differs_from_prior).collect();
        let mean = |f: fn(&AuIou) -> f64| {
            if chosen.is_empty() {
                0.0
            } else {
                chosen.iter().map(|a| f(a)).sum::<f64>() / chosen.len() as f64
            }
        };
        let initial_mean = mean(|a| a.initial);
        let refined_mean = mean(|a| a.refined);
        Self {
            per_au,
            initial_mean,
            refined_mean,
            gain: refined_mean - initial_mean,
        }
    }

    /// Keeps this report's initial IoU and takes the refined IoU of `later`
    /// (the same samples scored with a trained model).
    pub fn with_refined(&self, later: &IouReport) -> Self {
        let per_au = self
            .per_au
            .iter()
            .zip(&later.per_au)
            .map(|(a, b)| AuIou {
                refined: b.refined,
                ..a.clone()
            })
            .collect();
        Self::summarize(per_au)
    }
}

/// Initial and refined boxes of one sample mapped to crop pixels, with the oracle.
pub struct BoxPair {
    pub au: usize,
    pub side: usize,
    pub level: usize,
    pub initial: Corners,
    pub refined: Corners,
}

/// Boxes of every ROI for one forward pass, in crop-image pixels.
pub fn image_boxes(model: &Model, cache: &crate::network::ForwardCache) -> Vec<BoxPair> {
    let input = model.config.input_size as f64;
    cache
        .rois()
        .map(|r| {
            let s = input / model.config.level_size(r.roi.level) as f64;
            BoxPair {
                au: r.roi.au_index,
                side: r.roi.side.index(),
                level: r.roi.level,
                initial: r.roi.initial.scaled(s, s),
                refined: r.crop_box.scaled(s, s),
            }
        })
        .collect()
}

pub fn roi_iou(model: &Model, data: &Dataset, idx: &[usize]) -> Result<IouReport> {
    let c = data.num_aus();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut init = vec![0.0; c];
    let mut refined = vec![0.0; c];
    let mut counts = vec![0usize; c];
    let mut sizes = vec![(0.0, 0.0); c];
    let mut prior_sizes = vec![Vec::new(); c];
    for &i in idx {
        let s = &data.samples[i];
        let Some(oracle) = &s.oracle else {
            return Err(Error::Load(format!(
                "no oracle regions for subject {} frame {}",
                s.subject, s.frame
            )));
        };
        let a = augment(s, &data.rules, model.config.input_size, Mode::Test, &mut rng)?;
        let boxes = oracle_in_crop(oracle, &a, s.width);
        let (_, cache) = model.forward(&a.image, &a.centers)?;
        for b in image_boxes(model, &cache) {
            let o = boxes[b.au][b.side];
            init[b.au] += b.initial.iou(&o);
            refined[b.au] += b.refined.iou(&o);
            counts[b.au] += 1;
            sizes[b.au].0 += o.width();
            sizes[b.au].1 += o.height();
            if prior_sizes[b.au].len() < model.config.levels() && !prior_sizes[b.au].iter().any(|(l, _)| *l == b.level) {
                let k = model.config.roi_sizes[b.level] * model.config.stride(b.level) as f64;
                prior_sizes[b.au].push((b.level, k));
            }
        }
    }
    let per_au = (0..c)
        .map(|j| {
            let n = counts[j].max(1) as f64;
            let (w, h) = (sizes[j].0 / n, sizes[j].1 / n);
            let differs = prior_sizes[j]
                .iter()
                .any(|&(_, k)| (w - k).abs() > 0.1 * k || (h - k).abs() > 0.1 * k);
            AuIou {
                au: data.au_names[j].clone(),
                oracle_width: w,
                oracle_height: h,
                differs_from_prior: differs,
                initial: init[j] / n,
                refined: refined[j] / n,
            }
        })
        .collect();
    Ok(IouReport::summarize(per_au))
}
