//! A schematic face: an ellipse with 68 fiducials in the iBUG layout, all
//! derived analytically from a handful of style parameters.

use rand::Rng;

use crate::geometry::Point;

pub const LANDMARK_COUNT: usize = 68;

/// Index of the horizontally mirrored counterpart of each 68-point landmark.
pub fn mirror_index(i: usize) -> usize {
    match i {
        0..=16 => 16 - i,
        17..=26 => 43 - i,
        27..=30 => i,
        31..=35 => 66 - i,
        36..=39 => 81 - i,
        40 => 47,
        41 => 46,
        42..=45 => 81 - i,
        46 => 41,
        47 => 40,
        48..=54 => 102 - i,
        55..=59 => 114 - i,
        60..=64 => 124 - i,
        65..=67 => 132 - i,
        _ => i,
    }
}

/// Per-subject appearance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceStyle {
    pub center: Point,
    /// Horizontal and vertical semi-axes in pixels.
    pub radius_x: f64,
    pub radius_y: f64,
    pub eye_spacing: f64,
    pub brow_height: f64,
    pub mouth_width: f64,
    pub skin: [f64; 3],
    pub background: f64,
    pub feature_tone: f64,
}

impl FaceStyle {
    /// A style drawn around the canonical face of an `image_size` image.
    pub fn sample<R: Rng>(rng: &mut R, image_size: f64) -> Self {
        let s = image_size / 200.0;
        let scale = rng.random_range(0.95..1.05);
        let base = rng.random_range(0.0..1.0);
        Self {
            center: Point::new(
                image_size / 2.0 + rng.random_range(-3.0..3.0) * s,
                image_size * 0.52 + rng.random_range(-3.0..3.0) * s,
            ),
            radius_x: 64.0 * s * scale,
            radius_y: 82.0 * s * scale,
            eye_spacing: rng.random_range(0.33..0.39),
            brow_height: rng.random_range(-0.43..-0.38),
            mouth_width: rng.random_range(0.27..0.33),
            skin: [
                0.72 + 0.16 * base,
                0.55 + 0.14 * base,
                0.45 + 0.12 * base,
            ],
            background: rng.random_range(0.25..0.45),
            feature_tone: rng.random_range(0.25..0.4),
        }
    }

    /// Moves and rescales the face, as a small head movement between frames.
    pub fn moved(&self, dx: f64, dy: f64, scale: f64) -> Self {
        Self {
            center: Point::new(self.center.x + dx, self.center.y + dy),
            radius_x: self.radius_x * scale,
            radius_y: self.radius_y * scale,
            ..*self
        }
    }

    /// Face-normalized `(u, v)` in `[-1, 1]` to pixels.
    pub fn to_pixel(&self, u: f64, v: f64) -> Point {
        Point::new(self.center.x + u * self.radius_x, self.center.y + v * self.radius_y)
    }

    /// The 68 fiducials in face-normalized coordinates, image-left first.
    pub fn normalized_landmarks(&self) -> Vec<(f64, f64)> {
        let mut p = Vec::with_capacity(LANDMARK_COUNT);
        // jaw, from the image-left temple around the chin
        for i in 0..17 {
            let phi = std::f64::consts::PI + 0.15 - i as f64 * (std::f64::consts::PI + 0.3) / 16.0;
            p.push((phi.cos(), phi.sin()));
        }
        let brow = |p: &mut Vec<(f64, f64)>, from: f64, to: f64| {
            for i in 0..5 {
                let t = i as f64 / 4.0;
                p.push((from + (to - from) * t, self.brow_height - 0.05 * (std::f64::consts::PI * t).sin()));
            }
        };
        brow(&mut p, -0.62, -0.12);
        brow(&mut p, 0.12, 0.62);
        for i in 0..4 {
            p.push((0.0, -0.22 + 0.11 * i as f64));
        }
        for i in 0..5 {
            let u = -0.16 + 0.08 * i as f64;
            p.push((u, if i == 2 { 0.22 } else { 0.2 }));
        }
        let eye = |p: &mut Vec<(f64, f64)>, cu: f64| {
            let (w, h, cv) = (0.11, 0.045, -0.18);
            // corner, two upper lids, corner, two lower lids (clockwise from image-left corner)
            let shape = [(-w, 0.0), (-w / 3.0, -h), (w / 3.0, -h), (w, 0.0), (w / 3.0, h), (-w / 3.0, h)];
            for (du, dv) in shape {
                p.push((cu + du, cv + dv));
            }
        };
        eye(&mut p, -self.eye_spacing);
        eye(&mut p, self.eye_spacing);
        let (mw, mv) = (self.mouth_width, 0.5);
        // outer lip: corner, upper lip, corner, lower lip
        let outer = [
            (-1.0, 0.0),
            (-0.6, -0.08),
            (-0.25, -0.11),
            (0.0, -0.09),
            (0.25, -0.11),
            (0.6, -0.08),
            (1.0, 0.0),
            (0.6, 0.1),
            (0.25, 0.14),
            (0.0, 0.15),
            (-0.25, 0.14),
            (-0.6, 0.1),
        ];
        for (a, b) in outer {
            p.push((a * mw, mv + b));
        }
        let inner = [(-0.8, 0.0), (-0.3, -0.03), (0.0, -0.03), (0.3, -0.03), (0.8, 0.0), (0.3, 0.04), (0.0, 0.04), (-0.3, 0.04)];
        for (a, b) in inner {
            p.push((a * mw, mv + b));
        }
        debug_assert_eq!(p.len(), LANDMARK_COUNT);
        p
    }

    pub fn landmarks(&self) -> Vec<Point> {
        self.normalized_landmarks()
            .into_iter()
            .map(|(u, v)| self.to_pixel(u, v))
            .collect()
    }
}
