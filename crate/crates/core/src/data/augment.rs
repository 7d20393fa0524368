//! Train/test input preparation: crop, optional mirror, intensity scaling.

use rand::Rng;

use super::dataset::Sample;
use crate::error::{Error, Result};
use crate::geometry::{oriented_au_centers, CenterRuleTable, Corners, LandmarkSet, SideCenters};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Maps an 8-bit channel value to `[-1, 1]`.
pub fn intensity(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// A network-ready crop of one sample.
#[derive(Debug, Clone)]
pub struct Augmented {
    /// 3×out×out, intensities in `[-1, 1]`.
    pub image: FeatureMap,
    /// Landmarks in crop coordinates, indices unchanged.
    pub landmarks: LandmarkSet,
    pub centers: SideCenters,
    /// Top-left of the crop in the (possibly mirrored) source image.
    pub offset: (usize, usize),
    pub flipped: bool,
}

/// Crops `sample` to `out × out`. Test mode takes the centered crop; train mode
/// draws the offset uniformly and mirrors with probability one half.
pub fn augment<R: Rng>(
    sample: &Sample,
    rules: &CenterRuleTable,
    out: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Augmented> {
    let (w, h) = (sample.width, sample.height);
    if out == 0 || out > w || out > h {
        return Err(Error::Input(format!(
            "cannot crop {out}x{out} from a {w}x{h} image"
        )));
    }
    let (offset, flipped) = match mode {
        Mode::Test => (((w - out) / 2, (h - out) / 2), false),
        Mode::Train => (
            (rng.random_range(0..=w - out), rng.random_range(0..=h - out)),
            rng.random_bool(0.5),
        ),
    };
    let (ox, oy) = offset;
    let plane = out * out;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..out {
        let row = (y + oy) * w;
        for x in 0..out {
            let sx = if flipped { w - 1 - (x + ox) } else { x + ox };
            let src = 3 * (row + sx);
            for c in 0..3 {
                data[c * plane + y * out + x] = intensity(sample.rgb[src + c]);
            }
        }
    }
    let landmarks = if flipped {
        sample.landmarks.mirrored(w as f64)
    } else {
        sample.landmarks.clone()
    }
    .shifted(-(ox as f64), -(oy as f64));
    let centers = oriented_au_centers(&landmarks, rules, flipped)?;
    Ok(Augmented {
        image: FeatureMap::from_vec(3, out, out, data),
        landmarks,
        centers,
        offset,
        flipped,
    })
}

/// Oracle boxes seen by the left and right stacks of an augmented crop.
/// Mirroring swaps the sides, since each stack keeps looking at its own image half.
pub fn oracle_in_crop(boxes: &[[Corners; 2]], aug: &Augmented, width: usize) -> Vec<[Corners; 2]> {
    let (ox, oy) = (aug.offset.0 as f64, aug.offset.1 as f64);
    let last = width as f64 - 1.0;
    let place = |b: Corners| {
        let b = if aug.flipped {
            Corners::new(last - b.x2, b.y1, last - b.x1, b.y2)
        } else {
            b
        };
        Corners::new(b.x1 - ox, b.y1 - oy, b.x2 - ox, b.y2 - oy)
    };
    boxes
        .iter()
        .map(|&[l, r]| {
            if aug.flipped {
                [place(r), place(l)]
            } else {
                [place(l), place(r)]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample {
        let (w, h) = (10, 8);
        let rgb = (0..w * h * 3).map(|i| (i % 251) as u8).collect();
        Sample {
            subject: "S01".into(),
            frame: "0000".into(),
            width: w,
            height: h,
            rgb,
            landmarks: LandmarkSet::new(vec![Point::new(2.0, 3.0), Point::new(7.0, 3.0)]).unwrap(),
            labels: vec![1],
            oracle: None,
        }
    }

    fn rules() -> CenterRuleTable {
        CenterRuleTable::parse("left 1 0 1 0\nright 1 1 -1 0\n").unwrap()
    }

    #[test]
    fn test_mode_takes_the_center_crop() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(&s, &rules(), 6, Mode::Test, &mut rng).unwrap();
        assert_eq!(a.offset, (2, 1));
        assert!(!a.flipped);
        let src = 3 * ((1 + 1) * 10 + 2 + 3);
        assert_eq!(a.image.at(0, 1, 3), intensity(s.rgb[src]));
        assert_eq!(a.landmarks.points[0], Point::new(0.0, 2.0));
        assert_eq!(a.centers.left[0], Point::new(1.0, 2.0));
    }

    #[test]
    fn flips_mirror_pixels_landmarks_and_sides() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flipped = (0..64)
            .map(|_| augment(&s, &rules(), 6, Mode::Train, &mut rng).unwrap())
            .find(|a| a.flipped)
            .unwrap();
        let (ox, oy) = flipped.offset;
        assert!(ox <= 4 && oy <= 2);
        let sx = 9 - ox;
        assert_eq!(flipped.image.at(2, 0, 0), intensity(s.rgb[3 * (oy * 10 + sx) + 2]));
        // landmark 0 at x=2 mirrors to 7; the left stack now follows landmark 1's mirror
        assert_eq!(flipped.landmarks.points[0].x, 7.0 - ox as f64);
        assert_eq!(flipped.centers.left[0].x, 2.0 - ox as f64 + 1.0);
        assert_eq!(flipped.centers.right[0].x, 7.0 - ox as f64 - 1.0);
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment(&sample(), &rules(), 9, Mode::Test, &mut rng).is_err());
    }
}
