//! Differentiable crop-and-resize: an affine sampling grid followed by
//! bilinear interpolation.
//!
//! Conventions:
//!
//! * the output lattice spans `[-1, 1]` with its end points on the outermost
//!   output cells (align-corners); a single output cell sits at `0`;
//! * a normalized source coordinate `u` addresses the continuous pixel index
//!   `(u + 1) / 2 · (W - 1)`;
//! * neighbour indices outside the map are clamped to the edge.
//!
//! With these conventions the identity transform at the input resolution
//! reproduces the input exactly, and every output value is a convex combination
//! of input values.

use serde::{Deserialize, Serialize};

pub use crate::geometry::AffineParams;
pub use crate::tensor::FeatureMap;

/// Normalized source points for each output cell, row-major `(u, v)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    pub height: usize,
    pub width: usize,
    pub points: Vec<(f64, f64)>,
}

impl SampleGrid {
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        self.points[i * self.width + j]
    }
}

/// Lattice coordinate of output index `i` out of `n` cells.
#[inline]
pub fn lattice(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

pub fn make_grid(theta: &AffineParams, out_height: usize, out_width: usize) -> SampleGrid {
    assert!(out_height > 0 && out_width > 0, "output size must be positive");
    let mut points = Vec::with_capacity(out_height * out_width);
    for i in 0..out_height {
        let v = lattice(i, out_height);
        for j in 0..out_width {
            points.push(theta.apply(lattice(j, out_width), v));
        }
    }
    SampleGrid {
        height: out_height,
        width: out_width,
        points,
    }
}

/// Continuous pixel index addressed by a normalized coordinate.
#[inline]
pub fn source_index(u: f64, size: usize) -> f64 {
    (u + 1.0) * 0.5 * (size as f64 - 1.0)
}

/// Interpolation stencil along one axis: the two neighbour indices (already
/// clamped), the fractional weight of the upper neighbour, and the derivative of
/// the continuous index with respect to the normalized coordinate.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    lo: usize,
    hi: usize,
    frac: f64,
    dindex: f64,
}

#[inline]
fn stencil(u: f64, size: usize) -> Stencil {
    let x = source_index(u, size);
    let fl = x.floor();
    let frac = x - fl;
    let max = size as i64 - 1;
    let i0 = fl as i64;
    let lo = i0.clamp(0, max) as usize;
    let hi = (i0 + 1).clamp(0, max) as usize;
    Stencil {
        lo,
        hi,
        frac,
        dindex: 0.5 * (size as f64 - 1.0),
    }
}

pub fn bilinear_sample(f: &FeatureMap, grid: &SampleGrid) -> FeatureMap {
    let mut out = FeatureMap::zeros(f.channels, grid.height, grid.width);
    let n_out = grid.height * grid.width;
    let stencils: Vec<(Stencil, Stencil)> = grid
        .points
        .iter()
        .map(|&(u, v)| (stencil(u, f.width), stencil(v, f.height)))
        .collect();
    for c in 0..f.channels {
        let plane = f.plane(c);
        let dst = &mut out.data[c * n_out..(c + 1) * n_out];
        for (o, (sx, sy)) in stencils.iter().enumerate() {
            let r0 = sy.lo * f.width;
            let r1 = sy.hi * f.width;
            let top = plane[r0 + sx.lo] * (1.0 - sx.frac) + plane[r0 + sx.hi] * sx.frac;
            let bot = plane[r1 + sx.lo] * (1.0 - sx.frac) + plane[r1 + sx.hi] * sx.frac;
            dst[o] = top * (1.0 - sy.frac) + bot * sy.frac;
        }
    }
    out
}

/// Gradients of [`bilinear_sample`] given the gradient of its output.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub features: FeatureMap,
    /// `(d/du, d/dv)` per grid point.
    pub grid: Vec<(f64, f64)>,
}

pub fn bilinear_sample_backward(f: &FeatureMap, grid: &SampleGrid, grad_out: &FeatureMap) -> SampleGrad {
    let mut features = FeatureMap::zeros(f.channels, f.height, f.width);
    let mut dgrid = vec![(0.0, 0.0); grid.points.len()];
    bilinear_sample_backward_into(f, grid, grad_out, &mut features, &mut dgrid);
    SampleGrad {
        features,
        grid: dgrid,
    }
}

/// Accumulating form of [`bilinear_sample_backward`]: adds into `grad_features`
/// and overwrites `grad_grid`.
pub fn bilinear_sample_backward_into(
    f: &FeatureMap,
    grid: &SampleGrid,
    grad_out: &FeatureMap,
    grad_features: &mut FeatureMap,
    grad_grid: &mut [(f64, f64)],
) {
    debug_assert_eq!(grad_out.shape(), (f.channels, grid.height, grid.width));
    debug_assert!(grad_features.same_shape(f));
    let n_out = grid.height * grid.width;
    for g in grad_grid.iter_mut() {
        *g = (0.0, 0.0);
    }
    let stencils: Vec<(Stencil, Stencil)> = grid
        .points
        .iter()
        .map(|&(u, v)| (stencil(u, f.width), stencil(v, f.height)))
        .collect();
    let n_in = f.plane_len();
    for c in 0..f.channels {
        let plane = f.plane(c);
        let gplane = &mut grad_features.data[c * n_in..(c + 1) * n_in];
        let go = &grad_out.data[c * n_out..(c + 1) * n_out];
        for (o, (sx, sy)) in stencils.iter().enumerate() {
            let g = go[o];
            if g == 0.0 {
                continue;
            }
            let r0 = sy.lo * f.width;
            let r1 = sy.hi * f.width;
            let (wx0, wx1) = (1.0 - sx.frac, sx.frac);
            let (wy0, wy1) = (1.0 - sy.frac, sy.frac);
            gplane[r0 + sx.lo] += g * wx0 * wy0;
            gplane[r0 + sx.hi] += g * wx1 * wy0;
            gplane[r1 + sx.lo] += g * wx0 * wy1;
            gplane[r1 + sx.hi] += g * wx1 * wy1;
            let (v00, v01) = (plane[r0 + sx.lo], plane[r0 + sx.hi]);
            let (v10, v11) = (plane[r1 + sx.lo], plane[r1 + sx.hi]);
            // With both neighbours clamped onto the same edge pixel these differences vanish.
            let dx = (v01 - v00) * wy0 + (v11 - v10) * wy1;
            let dy = (v10 - v00) * wx0 + (v11 - v01) * wx1;
            grad_grid[o].0 += g * dx * sx.dindex;
            grad_grid[o].1 += g * dy * sy.dindex;
        }
    }
}

/// Pulls a per-point grid gradient back to the transform parameters.
pub fn grid_backward(grad_grid: &[(f64, f64)], out_height: usize, out_width: usize) -> AffineParams {
    let mut g = AffineParams {
        sx: 0.0,
        sy: 0.0,
        tx: 0.0,
        ty: 0.0,
    };
    for i in 0..out_height {
        let v = lattice(i, out_height);
        for j in 0..out_width {
            let u = lattice(j, out_width);
            let (gu, gv) = grad_grid[i * out_width + j];
            g.sx += gu * u;
            g.tx += gu;
            g.sy += gv * v;
            g.ty += gv;
        }
    }
    g
}

/// Distance from a normalized coordinate's source index to the nearest integer
/// lattice point, where bilinear interpolation is not differentiable.
pub fn kink_distance(u: f64, size: usize) -> f64 {
    let x = source_index(u, size);
    (x - x.round()).abs()
}
