//! Landmark-anchored AU regions and their conversion to crop transforms.
//!
//! The pipeline for one region is
//!
//! 1. [`au_centers`]: landmark + per-AU offset gives an AU center in image pixels,
//! 2. [`map_center`]: proportional mapping onto a feature map,
//! 3. [`initial_box`]: a `k x k` box around the mapped center,
//! 4. [`refine_box`]: every corner coordinate multiplied by its own scale factor,
//! 5. [`sanitize_box`]: clamp into the map and enforce a minimum side,
//! 6. [`box_to_affine`]: the axis-aligned crop transform consumed by the sampler.
//!
//! Feature-map coordinates are continuous over `[0, W] x [0, H]` with the origin
//! at the top-left corner. The normalized coordinate of `x` is `2x/W - 1`, so
//! the full-map box maps to the identity transform.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Which half of the face a region belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(Side::Left),
            "right" | "r" => Ok(Side::Right),
            other => Err(Error::Config(format!("unknown side {other:?}"))),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Width and height of an image or feature map in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub width: f64,
    pub height: f64,
}

impl Extent {
    pub const fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    pub const fn square(side: f64) -> Self {
        Self::new(side, side)
    }
}

/// Ordered facial landmarks in aligned-image pixel coordinates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Input(format!("landmark {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mirrors horizontally inside an image of the given pixel width: `x -> (width - 1) - x`.
    /// Indices are kept; only coordinates move.
    pub fn mirrored(&self, image_width: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| Point::new(image_width - 1.0 - p.x, p.y))
                .collect(),
        }
    }

    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| Point::new(p.x + dx, p.y + dy))
                .collect(),
        }
    }
}

/// One row of a [`CenterRuleTable`]: center = `landmarks[anchor] + (dx, dy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterRule {
    pub anchor: usize,
    pub dx: f64,
    pub dy: f64,
}

/// Landmark-to-AU-center rules, one per AU and side.
///
/// Text format: one rule per line, `side au_index anchor_index dx dy`, with
/// `au_index` starting at 1 and `anchor_index` starting at 0. Fields are separated
/// by whitespace or commas; `#` starts a comment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterRuleTable {
    pub left: Vec<CenterRule>,
    pub right: Vec<CenterRule>,
}

impl CenterRuleTable {
    pub fn num_aus(&self) -> usize {
        self.left.len()
    }

    pub fn side(&self, side: Side) -> &[CenterRule] {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<(Side, usize, CenterRule)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .collect();
            let bad = || Error::Config(format!("rule table line {}: {line:?}", lineno + 1));
            if fields.len() != 5 {
                return Err(bad());
            }
            let side: Side = fields[0].parse().map_err(|_| bad())?;
            let au: usize = fields[1].parse().map_err(|_| bad())?;
            if au == 0 {
                return Err(bad());
            }
            let rule = CenterRule {
                anchor: fields[2].parse().map_err(|_| bad())?,
                dx: fields[3].parse().map_err(|_| bad())?,
                dy: fields[4].parse().map_err(|_| bad())?,
            };
            if !rule.dx.is_finite() || !rule.dy.is_finite() {
                return Err(bad());
            }
            rows.push((side, au - 1, rule));
        }
        let count = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let mut left = vec![None; count];
        let mut right = vec![None; count];
        for (side, au, rule) in rows {
            let slot = match side {
                Side::Left => &mut left[au],
                Side::Right => &mut right[au],
            };
            if slot.replace(rule).is_some() {
                return Err(Error::Config(format!(
                    "rule table: duplicate entry for {side} AU index {}",
                    au + 1
                )));
            }
        }
        let collect = |v: Vec<Option<CenterRule>>, side: Side| -> Result<Vec<CenterRule>> {
            v.into_iter()
                .enumerate()
                .map(|(i, r)| {
                    r.ok_or_else(|| {
                        Error::Config(format!("rule table: missing {side} AU index {}", i + 1))
                    })
                })
                .collect()
        };
        let table = Self {
            left: collect(left, Side::Left)?,
            right: collect(right, Side::Right)?,
        };
        if table.num_aus() == 0 {
            return Err(Error::Config("rule table is empty".into()));
        }
        Ok(table)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# side au_index anchor_index dx dy\n");
        for side in Side::BOTH {
            for (j, r) in self.side(side).iter().enumerate() {
                out.push_str(&format!("{side} {} {} {} {}\n", j + 1, r.anchor, r.dx, r.dy));
            }
        }
        out
    }

    pub fn validate(&self, landmark_count: usize) -> Result<()> {
        if self.left.len() != self.right.len() {
            return Err(Error::Config("rule table sides differ in length".into()));
        }
        for side in Side::BOTH {
            for (j, r) in self.side(side).iter().enumerate() {
                if r.anchor >= landmark_count {
                    return Err(Error::Config(format!(
                        "{side} rule for AU index {} anchors landmark {} but only {landmark_count} landmarks exist",
                        j + 1,
                        r.anchor
                    )));
                }
            }
        }
        Ok(())
    }

    /// Approximate landmark rules for the twelve BP4D AUs
    /// (1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24) on the 68-point scheme.
    /// Offsets assume a 200-pixel aligned face with an inner-eye distance near 40 px.
    pub fn bp4d_default() -> Self {
        // (left anchor, right anchor, dx, dy)
        const ROWS: [(usize, usize, f64, f64); 12] = [
            (21, 22, 0.0, -20.0), // AU1 inner brow raiser
            (17, 26, 0.0, -13.0), // AU2 outer brow raiser
            (19, 24, 0.0, 13.0),  // AU4 brow lowerer
            (41, 46, 0.0, 40.0),  // AU6 cheek raiser
            (38, 43, 0.0, 0.0),   // AU7 lid tightener
            (50, 52, 0.0, 0.0),   // AU10 upper lip raiser
            (48, 54, 0.0, 0.0),   // AU12 lip corner puller
            (48, 54, 0.0, 0.0),   // AU14 dimpler
            (48, 54, 0.0, 0.0),   // AU15 lip corner depressor
            (58, 56, 0.0, 20.0),  // AU17 chin raiser
            (61, 63, 0.0, 0.0),   // AU23 lip tightener
            (67, 65, 0.0, 0.0),   // AU24 lip pressor
        ];
        let left = ROWS
            .iter()
            .map(|&(a, _, dx, dy)| CenterRule { anchor: a, dx, dy })
            .collect();
        let right = ROWS
            .iter()
            .map(|&(_, a, dx, dy)| CenterRule { anchor: a, dx: -dx, dy })
            .collect();
        Self { left, right }
    }
}

/// AU centers for both sides, indexed by AU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideCenters {
    pub left: Vec<Point>,
    pub right: Vec<Point>,
}

impl SideCenters {
    pub fn side(&self, side: Side) -> &[Point] {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

pub fn au_centers(landmarks: &LandmarkSet, rules: &CenterRuleTable) -> Result<SideCenters> {
    rules.validate(landmarks.len())?;
    let apply = |rs: &[CenterRule]| -> Vec<Point> {
        rs.iter()
            .map(|r| {
                let p = landmarks.points[r.anchor];
                Point::new(p.x + r.dx, p.y + r.dy)
            })
            .collect()
    };
    Ok(SideCenters {
        left: apply(&rules.left),
        right: apply(&rules.right),
    })
}

/// AU centers for an image that may have been mirrored by augmentation.
///
/// `landmarks` are the (possibly mirrored) coordinates with their original
/// indices. When `mirrored` is set, each side is computed from the opposite
/// side's rules with the horizontal offset negated, so the left stack keeps
/// looking at the left half of the image it is given.
pub fn oriented_au_centers(
    landmarks: &LandmarkSet,
    rules: &CenterRuleTable,
    mirrored: bool,
) -> Result<SideCenters> {
    if !mirrored {
        return au_centers(landmarks, rules);
    }
    let flip = |rs: &[CenterRule]| -> Vec<CenterRule> {
        rs.iter()
            .map(|r| CenterRule {
                anchor: r.anchor,
                dx: -r.dx,
                dy: r.dy,
            })
            .collect()
    };
    let swapped = CenterRuleTable {
        left: flip(&rules.right),
        right: flip(&rules.left),
    };
    au_centers(landmarks, &swapped)
}

pub fn map_center(center: Point, image: Extent, featmap: Extent) -> Point {
    Point::new(
        center.x * featmap.width / image.width,
        center.y * featmap.height / image.height,
    )
}

/// Axis-aligned box given by its top-left `(x1, y1)` and bottom-right `(x2, y2)` corners.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Corners {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// `[p1, p2, p3, p4]` in the order the scale factors apply to.
    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn iou(&self, other: &Corners) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One AU's region on one level's feature map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub au_index: usize,
    pub side: Side,
    pub level: usize,
    pub initial: Corners,
    pub scale: [f64; 4],
    pub refined: Corners,
}

impl RoiBox {
    /// A box whose refined corners equal its initial corners (all scale factors 1).
    pub fn fixed(au_index: usize, side: Side, level: usize, initial: Corners) -> Self {
        Self {
            au_index,
            side,
            level,
            initial,
            scale: [1.0; 4],
            refined: initial,
        }
    }
}

pub fn initial_box(center: Point, k: f64, featmap: Extent) -> Result<Corners> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::Input(format!("ROI size must be positive, got {k}")));
    }
    let h = k / 2.0;
    Ok(Corners::new(
        (center.x - h).clamp(0.0, featmap.width),
        (center.y - h).clamp(0.0, featmap.height),
        (center.x + h).clamp(0.0, featmap.width),
        (center.y + h).clamp(0.0, featmap.height),
    ))
}

/// `p̂_i = β_i · p_i`, coordinates measured from the map origin.
pub fn refine_box(roi: &RoiBox, beta: [f64; 4]) -> RoiBox {
    let p = roi.initial.to_array();
    RoiBox {
        scale: beta,
        refined: Corners::from_array([
            beta[0] * p[0],
            beta[1] * p[1],
            beta[2] * p[2],
            beta[3] * p[3],
        ]),
        ..*roi
    }
}

/// Derivatives of a sanitized interval `(lo', hi')` with respect to the raw `(lo, hi)`.
pub type IntervalJacobian = [[f64; 2]; 2];

/// Sanitizes one axis: order, clamp into `[0, extent]`, then widen to at least `eps`.
///
/// Returns the new interval and its Jacobian, which is exact on every linear
/// piece of this piecewise-linear map.
pub fn sanitize_interval(lo: f64, hi: f64, extent: f64, eps: f64) -> (f64, f64, IntervalJacobian) {
    debug_assert!(eps > 0.0 && eps <= extent);
    let (mut lo, mut hi, mut jac) = if lo <= hi {
        (lo, hi, [[1.0, 0.0], [0.0, 1.0]])
    } else {
        (hi, lo, [[0.0, 1.0], [1.0, 0.0]])
    };
    if lo < 0.0 || lo > extent {
        lo = lo.clamp(0.0, extent);
        jac[0] = [0.0, 0.0];
    }
    if hi < 0.0 || hi > extent {
        hi = hi.clamp(0.0, extent);
        jac[1] = [0.0, 0.0];
    }
    if hi - lo < eps {
        let center = 0.5 * (lo + hi);
        let mid = [
            0.5 * (jac[0][0] + jac[1][0]),
            0.5 * (jac[0][1] + jac[1][1]),
        ];
        jac = [mid, mid];
        lo = center - 0.5 * eps;
        hi = lo + eps;
        if lo < 0.0 {
            lo = 0.0;
            hi = eps;
            jac = [[0.0; 2]; 2];
        } else if hi > extent {
            hi = extent;
            lo = extent - eps;
            jac = [[0.0; 2]; 2];
        }
        // Rounding can leave the side a few ulps short, which would break idempotence.
        while hi - lo < eps {
            if hi < extent {
                hi = hi.next_up().min(extent);
            } else if lo > 0.0 {
                lo = lo.next_down().max(0.0);
            } else {
                break;
            }
        }
    }
    (lo, hi, jac)
}

/// Jacobian of sanitized refined corners with respect to raw refined corners,
/// per axis: `x` relates `(x1, x2)`, `y` relates `(y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerJacobian {
    pub x: IntervalJacobian,
    pub y: IntervalJacobian,
}

impl CornerJacobian {
    /// Pulls a gradient on sanitized corners back to raw corners.
    pub fn pull_back(&self, grad: [f64; 4]) -> [f64; 4] {
        let [gx1, gy1, gx2, gy2] = grad;
        [
            gx1 * self.x[0][0] + gx2 * self.x[1][0],
            gy1 * self.y[0][0] + gy2 * self.y[1][0],
            gx1 * self.x[0][1] + gx2 * self.x[1][1],
            gy1 * self.y[0][1] + gy2 * self.y[1][1],
        ]
    }
}

pub fn sanitize_corners(c: Corners, featmap: Extent, eps: f64) -> (Corners, CornerJacobian) {
    let (x1, x2, jx) = sanitize_interval(c.x1, c.x2, featmap.width, eps);
    let (y1, y2, jy) = sanitize_interval(c.y1, c.y2, featmap.height, eps);
    (Corners::new(x1, y1, x2, y2), CornerJacobian { x: jx, y: jy })
}

pub fn sanitize_box(roi: &RoiBox, featmap: Extent, eps: f64) -> RoiBox {
    RoiBox {
        refined: sanitize_corners(roi.refined, featmap, eps).0,
        ..*roi
    }
}

/// The crop transform `Θ = [[s_x, 0, t_x], [0, s_y, t_y]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        sx: 1.0,
        sy: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [[self.sx, 0.0, self.tx], [0.0, self.sy, self.ty]]
    }

    /// Maps a normalized output coordinate to a normalized source coordinate.
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        (self.sx * u + self.tx, self.sy * v + self.ty)
    }
}

pub fn corners_to_affine(c: Corners, featmap: Extent) -> AffineParams {
    AffineParams {
        sx: (c.x2 - c.x1) / featmap.width,
        sy: (c.y2 - c.y1) / featmap.height,
        tx: (c.x1 + c.x2) / featmap.width - 1.0,
        ty: (c.y1 + c.y2) / featmap.height - 1.0,
    }
}

/// Gradient of a loss on `(s_x, s_y, t_x, t_y)` pulled back to the corners `[x1, y1, x2, y2]`.
pub fn affine_grad_to_corners(grad: AffineParams, featmap: Extent) -> [f64; 4] {
    let (w, h) = (featmap.width, featmap.height);
    [
        (grad.tx - grad.sx) / w,
        (grad.ty - grad.sy) / h,
        (grad.tx + grad.sx) / w,
        (grad.ty + grad.sy) / h,
    ]
}

pub fn box_to_affine(roi: &RoiBox, featmap: Extent) -> AffineParams {
    corners_to_affine(roi.refined, featmap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn boxed(c: Corners) -> RoiBox {
        RoiBox::fixed(0, Side::Left, 0, c)
    }

    #[test]
    fn zero_offset_rule_returns_anchor() {
        let pts = (0..68).map(|i| Point::new(i as f64, 2.0 * i as f64)).collect();
        let lm = LandmarkSet::new(pts).unwrap();
        let rule = CenterRule { anchor: 30, dx: 0.0, dy: 0.0 };
        let table = CenterRuleTable { left: vec![rule], right: vec![rule] };
        let c = au_centers(&lm, &table).unwrap();
        assert_eq!(c.left[0], lm.points[30]);
        assert_eq!(c.right[0], lm.points[30]);
    }

    #[test]
    fn out_of_range_anchor_is_config_error() {
        let lm = LandmarkSet::new(vec![Point::default(); 68]).unwrap();
        let rule = CenterRule { anchor: 99, dx: 0.0, dy: 0.0 };
        let table = CenterRuleTable { left: vec![rule], right: vec![rule] };
        assert!(matches!(au_centers(&lm, &table), Err(Error::Config(_))));
    }

    #[test]
    fn right_side_uses_right_rules() {
        let lm = LandmarkSet::new(vec![Point::new(10.0, 10.0), Point::new(50.0, 10.0)]).unwrap();
        let table = CenterRuleTable {
            left: vec![CenterRule { anchor: 0, dx: 1.0, dy: 2.0 }],
            right: vec![CenterRule { anchor: 1, dx: -1.0, dy: 2.0 }],
        };
        let c = au_centers(&lm, &table).unwrap();
        assert_eq!(c.left[0], Point::new(11.0, 12.0));
        assert_eq!(c.right[0], Point::new(49.0, 12.0));
    }

    #[test]
    fn mirrored_centers_are_mirror_images_with_swapped_sides() {
        let lm = LandmarkSet::new(vec![Point::new(30.0, 40.0), Point::new(150.0, 44.0)]).unwrap();
        let table = CenterRuleTable {
            left: vec![CenterRule { anchor: 0, dx: 5.0, dy: -3.0 }],
            right: vec![CenterRule { anchor: 1, dx: -7.0, dy: 1.0 }],
        };
        let plain = au_centers(&lm, &table).unwrap();
        let flipped = oriented_au_centers(&lm.mirrored(200.0), &table, true).unwrap();
        assert_eq!(flipped.left[0], Point::new(199.0 - plain.right[0].x, plain.right[0].y));
        assert_eq!(flipped.right[0], Point::new(199.0 - plain.left[0].x, plain.left[0].y));
    }

    #[test]
    fn rule_table_text_round_trip() {
        let t = CenterRuleTable::bp4d_default();
        assert_eq!(t.num_aus(), 12);
        assert_eq!(CenterRuleTable::parse(&t.to_text()).unwrap(), t);
        assert!(t.validate(68).is_ok());
    }

    #[test]
    fn rule_table_rejects_gaps_and_duplicates() {
        assert!(CenterRuleTable::parse("left 1 0 0 0\nright 1 0 0 0\nleft 3 0 0 0\nright 3 0 0 0\n").is_err());
        assert!(CenterRuleTable::parse("left 1 0 0 0\nleft 1 0 0 0\nright 1 0 0 0\n").is_err());
        assert!(CenterRuleTable::parse("left 1 0 0\n").is_err());
        assert!(CenterRuleTable::parse("# nothing\n").is_err());
    }

    #[test]
    fn map_center_examples() {
        let img = Extent::square(192.0);
        assert_eq!(map_center(Point::new(96.0, 96.0), img, Extent::square(24.0)), Point::new(12.0, 12.0));
        assert_eq!(map_center(Point::new(0.0, 0.0), img, Extent::square(24.0)), Point::new(0.0, 0.0));
        assert_eq!(map_center(Point::new(192.0, 192.0), img, Extent::square(6.0)), Point::new(6.0, 6.0));
    }

    #[test]
    fn initial_box_examples() {
        let map = Extent::square(24.0);
        assert_eq!(initial_box(Point::new(12.0, 12.0), 10.0, map).unwrap(), Corners::new(7.0, 7.0, 17.0, 17.0));
        // 1 - 5 = -4 clips to 0, 1 + 5 = 6 stays.
        assert_eq!(initial_box(Point::new(1.0, 1.0), 10.0, map).unwrap(), Corners::new(0.0, 0.0, 6.0, 6.0));
        assert!(initial_box(Point::new(12.0, 12.0), 0.0, map).is_err());
    }

    #[test]
    fn refine_box_examples() {
        let b = boxed(Corners::new(2.0, 3.0, 8.0, 9.0));
        assert_eq!(refine_box(&b, [1.0; 4]).refined, b.initial);
        assert_eq!(refine_box(&b, [0.5, 1.0, 1.5, 1.0]).refined, Corners::new(1.0, 3.0, 12.0, 9.0));
        assert_eq!(refine_box(&b, [0.0; 4]).refined, Corners::new(0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn sanitize_box_examples() {
        let map = Extent::square(24.0);
        let valid = boxed(Corners::new(3.0, 4.0, 10.0, 12.5));
        assert_eq!(sanitize_box(&valid, map, 1.0), valid);
        let zero = boxed(Corners::new(0.0, 0.0, 0.0, 0.0));
        assert_eq!(sanitize_box(&zero, map, 1.0).refined, Corners::new(0.0, 0.0, 1.0, 1.0));
        let wide = boxed(Corners::new(-3.0, 5.0, 30.0, 9.0));
        assert_eq!(sanitize_box(&wide, map, 1.0).refined, Corners::new(0.0, 5.0, 24.0, 9.0));
    }

    #[test]
    fn sanitize_inverted_and_far_outside() {
        let map = Extent::square(24.0);
        let inv = boxed(Corners::new(9.0, 9.0, 3.0, 3.0));
        assert_eq!(sanitize_box(&inv, map, 1.0).refined, Corners::new(3.0, 3.0, 9.0, 9.0));
        let out = boxed(Corners::new(30.0, 30.0, 40.0, 40.0));
        assert_eq!(sanitize_box(&out, map, 1.0).refined, Corners::new(23.0, 23.0, 24.0, 24.0));
        let thin = boxed(Corners::new(5.0, 5.0, 5.2, 10.0));
        let s = sanitize_box(&thin, map, 1.0).refined;
        assert!((s.x1 - 4.6).abs() < 1e-12 && (s.x2 - 5.6).abs() < 1e-12);
    }

    #[test]
    fn affine_examples() {
        let full = boxed(Corners::new(0.0, 0.0, 12.0, 12.0));
        assert_eq!(box_to_affine(&full, Extent::square(12.0)), AffineParams::IDENTITY);
        let mid = boxed(Corners::new(3.0, 3.0, 9.0, 9.0));
        assert_eq!(
            box_to_affine(&mid, Extent::square(12.0)),
            AffineParams { sx: 0.5, sy: 0.5, tx: 0.0, ty: 0.0 }
        );
        let corner = boxed(Corners::new(0.0, 0.0, 6.0, 6.0));
        assert_eq!(
            box_to_affine(&corner, Extent::square(12.0)),
            AffineParams { sx: 0.5, sy: 0.5, tx: -0.5, ty: -0.5 }
        );
    }

    #[test]
    fn iou_basics() {
        let a = Corners::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Corners::new(1.0, 0.0, 3.0, 2.0)), 2.0 / 6.0);
        assert_eq!(a.iou(&Corners::new(5.0, 5.0, 6.0, 6.0)), 0.0);
    }

    fn arb_corners() -> impl Strategy<Value = Corners> {
        (-10.0..40.0f64, -10.0..40.0f64, -10.0..40.0f64, -10.0..40.0f64)
            .prop_map(|(a, b, c, d)| Corners::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn sanitize_is_idempotent_and_valid(c in arb_corners(), w in 2usize..30, h in 2usize..30, eps in 0.1f64..2.0) {
            let map = Extent::new(w as f64, h as f64);
            let once = sanitize_box(&boxed(c), map, eps);
            let twice = sanitize_box(&once, map, eps);
            prop_assert_eq!(once, twice);
            let r = once.refined;
            prop_assert!(0.0 <= r.x1 && r.x1 < r.x2 && r.x2 <= map.width);
            prop_assert!(0.0 <= r.y1 && r.y1 < r.y2 && r.y2 <= map.height);
            prop_assert!(r.width() >= eps && r.height() >= eps);
        }

        #[test]
        fn unit_scale_is_identity(c in arb_corners()) {
            prop_assert_eq!(refine_box(&boxed(c), [1.0; 4]).refined, c);
        }

        #[test]
        fn full_map_is_identity_transform(w in 1usize..200, h in 1usize..200) {
            let map = Extent::new(w as f64, h as f64);
            let full = boxed(Corners::new(0.0, 0.0, map.width, map.height));
            prop_assert_eq!(box_to_affine(&full, map), AffineParams::IDENTITY);
        }

        #[test]
        fn affine_maps_unit_corners_onto_box(c in arb_corners(), w in 2usize..40, h in 2usize..40) {
            let map = Extent::new(w as f64, h as f64);
            let b = sanitize_box(&boxed(c), map, 1.0);
            let theta = box_to_affine(&b, map);
            let (u1, v1) = theta.apply(-1.0, -1.0);
            let (u2, v2) = theta.apply(1.0, 1.0);
            let r = b.refined;
            prop_assert!((u1 - (2.0 * r.x1 / map.width - 1.0)).abs() < 1e-12);
            prop_assert!((v1 - (2.0 * r.y1 / map.height - 1.0)).abs() < 1e-12);
            prop_assert!((u2 - (2.0 * r.x2 / map.width - 1.0)).abs() < 1e-12);
            prop_assert!((v2 - (2.0 * r.y2 / map.height - 1.0)).abs() < 1e-12);
            prop_assert!(theta.tx.abs() <= 1.0 + theta.sx + 1e-12);
            prop_assert!(theta.ty.abs() <= 1.0 + theta.sy + 1e-12);
        }

        #[test]
        fn map_center_commutes_with_uniform_scaling(x in 0.0..200.0f64, y in 0.0..200.0f64, alpha in 0.1..10.0f64, f in 1usize..64) {
            let img = Extent::square(200.0);
            let feat = Extent::square(f as f64);
            let a = map_center(Point::new(alpha * x, alpha * y), Extent::square(alpha * 200.0), feat);
            let b = map_center(Point::new(x, y), img, feat);
            prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
    }
}
