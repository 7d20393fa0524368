use std::path::Path;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{image_boxes, roi_iou, IouReport};
use crate::data::{augment, Dataset, Mode};
use crate::error::{Error, Result};
use crate::geometry::Corners;
use crate::network::Model;

pub const INITIAL_COLOR: [u8; 3] = [40, 90, 255];
pub const REFINED_COLOR: [u8; 3] = [255, 40, 40];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawnBox {
    pub au: String,
    pub side: String,
    pub level: usize,
    /// Corners in source-image pixels.
    pub initial: [f64; 4],
    pub refined: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub subject: String,
    pub frame: String,
    pub files: Vec<String>,
    pub boxes: Vec<DrawnBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualReport {
    pub overlays: Vec<Overlay>,
    pub iou: Option<IouReport>,
}

fn outline(img: &mut RgbImage, b: &Corners, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let clamp = |v: f64, hi: i64| (v.round() as i64).clamp(0, hi - 1);
    let (x1, x2) = (clamp(b.x1, w), clamp(b.x2, w));
    let (y1, y2) = (clamp(b.y1, h), clamp(b.y2, h));
    for x in x1..=x2 {
        img.put_pixel(x as u32, y1 as u32, Rgb(color));
        img.put_pixel(x as u32, y2 as u32, Rgb(color));
    }
    for y in y1..=y2 {
        img.put_pixel(x1 as u32, y as u32, Rgb(color));
        img.put_pixel(x2 as u32, y as u32, Rgb(color));
    }
}

/// Draws initial and refined boxes of every AU, one PNG per sample and level,
/// plus `iou.json` when the dataset has oracle regions.
pub fn visualize(model: &Model, data: &Dataset, idx: &[usize], out_dir: &Path) -> Result<VisualReport> {
    if model.config.num_aus != data.num_aus() {
        return Err(Error::Mismatch(format!(
            "num_aus: checkpoint has {} AUs but the dataset has {}",
            model.config.num_aus,
            data.num_aus()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut overlays = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &data.samples[i];
        let a = augment(s, &data.rules, model.config.input_size, Mode::Test, &mut rng)?;
        let (ox, oy) = (a.offset.0 as f64, a.offset.1 as f64);
        let shift = |c: Corners| Corners::new(c.x1 + ox, c.y1 + oy, c.x2 + ox, c.y2 + oy);
        let (_, cache) = model.forward(&a.image, &a.centers)?;
        let boxes = image_boxes(model, &cache);
        let mut files = Vec::new();
        let mut drawn = Vec::with_capacity(boxes.len());
        for level in model.config.active_levels() {
            let mut img = RgbImage::from_raw(s.width as u32, s.height as u32, s.rgb.clone())
                .ok_or_else(|| Error::Input(format!("image buffer of {} {} is malformed", s.subject, s.frame)))?;
            for b in boxes.iter().filter(|b| b.level == level) {
                let (init, refined) = (shift(b.initial), shift(b.refined));
                outline(&mut img, &init, INITIAL_COLOR);
                outline(&mut img, &refined, REFINED_COLOR);
                drawn.push(DrawnBox {
                    au: data.au_names[b.au].clone(),
                    side: if b.side == 0 { "left" } else { "right" }.into(),
                    level: level + 1,
                    initial: init.to_array(),
                    refined: refined.to_array(),
                });
            }
            let name = format!("{}_{}_level{}.png", s.subject, s.frame, level + 1);
            let path = out_dir.join(&name);
            img.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
            files.push(name);
        }
        overlays.push(Overlay {
            subject: s.subject.clone(),
            frame: s.frame.clone(),
            files,
            boxes: drawn,
        });
    }
    let iou = if data.has_oracle() && !model.config.active_levels().is_empty() {
        Some(roi_iou(model, data, idx)?)
    } else {
        None
    };
    let report = VisualReport { overlays, iou };
    let path = out_dir.join("iou.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
