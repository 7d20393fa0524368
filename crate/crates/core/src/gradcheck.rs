//! Finite-difference and reference-implementation checks for every
//! differentiable operation.
//!
//! Errors are normwise: `max |a - n| / max(max |a|, max |n|, 1e-12)` over one
//! input tensor, so a single tiny component cannot dominate.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{
    affine_grad_to_corners, corners_to_affine, refine_box, sanitize_corners, Corners, Extent, Point, RoiBox, Side,
    SideCenters,
};
use crate::graph::{cooccurrence, gcn_backward, gcn_forward_trace, Activation, GcnLayer, GcnParams};
use crate::network::{BranchGrads, Model, ModelConfig, Preset};
use crate::objective::{weighted_bce, weighted_bce_grad, ClassWeights};
use crate::sampler::{
    bilinear_sample, bilinear_sample_backward, grid_backward, kink_distance, make_grid, AffineParams, FeatureMap,
    SampleGrid,
};

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Suites that can be requested by name.
pub const SUITES: &[&str] = &["sampler", "aroi", "gcn", "bce", "model", "oracle"];

/// Operations that exist but have no derivative to check.
pub const NON_DIFFERENTIABLE: &[&str] = &["f1_frame", "cooccurrence", "build_intra", "sanitize", "make_folds"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub probes: usize,
    pub skipped: usize,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, max_error: f64, tolerance: f64, probes: usize, skipped: usize) -> Self {
        Self {
            name: name.into(),
            max_error,
            tolerance,
            probes,
            skipped,
            passed: max_error.is_finite() && max_error < tolerance && probes > 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn from_checks(checks: Vec<CheckResult>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { checks, passed }
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {:<28} max_err={:.3e} tol={:.0e} probes={}{}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_error,
                    c.tolerance,
                    c.probes,
                    if c.skipped > 0 { format!(" skipped={}", c.skipped) } else { String::new() }
                )
            })
            .collect()
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-12, f64::max);
    diff / scale
}

pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn random_map<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn grid_clear_of_kinks(grid: &SampleGrid, w: usize, h: usize, margin: f64) -> bool {
    grid.points
        .iter()
        .all(|&(u, v)| kink_distance(u, w) > margin && kink_distance(v, h) > margin && u.abs() < 1.0 && v.abs() < 1.0)
}

/// A transform whose grid points all stay `margin` index units away from lattice points.
fn kink_free_theta<R: Rng>(rng: &mut R, f: &FeatureMap, oh: usize, ow: usize) -> AffineParams {
    loop {
        let theta = AffineParams {
            sx: rng.random_range(0.2..0.8),
            sy: rng.random_range(0.2..0.8),
            tx: rng.random_range(-0.2..0.2),
            ty: rng.random_range(-0.2..0.2),
        };
        if grid_clear_of_kinks(&make_grid(&theta, oh, ow), f.width, f.height, 1e-3) {
            return theta;
        }
    }
}

/// Gradient of `Σ g · sample(f, Θ)` with respect to the feature values.
pub fn check_sampler_features(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let trials = 5;
    for _ in 0..trials {
        let f = random_map(&mut rng, 2, 6, 7);
        let theta = kink_free_theta(&mut rng, &f, 4, 5);
        let grid = make_grid(&theta, 4, 5);
        let g = random_map(&mut rng, 2, 4, 5);
        let analytic = bilinear_sample_backward(&f, &grid, &g).features.data;
        let numeric = central_difference(
            |x| dot(&bilinear_sample(&FeatureMap::from_vec(2, 6, 7, x.to_vec()), &grid).data, &g.data),
            &f.data,
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    CheckResult::new("sampler.features", worst, OP_TOLERANCE, trials, 0)
}

fn theta_vec(t: &AffineParams) -> [f64; 4] {
    [t.sx, t.sy, t.tx, t.ty]
}

fn vec_theta(v: &[f64]) -> AffineParams {
    AffineParams {
        sx: v[0],
        sy: v[1],
        tx: v[2],
        ty: v[3],
    }
}

/// Gradient of `Σ g · sample(f, Θ)` with respect to `(s_x, s_y, t_x, t_y)`.
pub fn check_sampler_theta(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let trials = 5;
    for _ in 0..trials {
        let f = random_map(&mut rng, 2, 6, 7);
        let theta = kink_free_theta(&mut rng, &f, 4, 5);
        let grid = make_grid(&theta, 4, 5);
        let g = random_map(&mut rng, 2, 4, 5);
        let analytic = theta_vec(&grid_backward(&bilinear_sample_backward(&f, &grid, &g).grid, 4, 5));
        let numeric = central_difference(
            |t| dot(&bilinear_sample(&f, &make_grid(&vec_theta(t), 4, 5)).data, &g.data),
            &theta_vec(&theta),
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    CheckResult::new("sampler.theta", worst, OP_TOLERANCE, trials, 0)
}

/// Crops `f` through scale factors `beta` applied to `initial`, analytic gradient included.
fn crop_objective(
    f: &FeatureMap,
    initial: Corners,
    beta: [f64; 4],
    g: &FeatureMap,
    eps: f64,
) -> (f64, [f64; 4], SampleGrid) {
    let fm = Extent::new(f.width as f64, f.height as f64);
    let roi = refine_box(&RoiBox::fixed(0, Side::Left, 0, initial), beta);
    let (c, jac) = sanitize_corners(roi.refined, fm, eps);
    let grid = make_grid(&corners_to_affine(c, fm), g.height, g.width);
    let out = bilinear_sample(f, &grid);
    let sg = bilinear_sample_backward(f, &grid, g);
    let dc = jac.pull_back(affine_grad_to_corners(grid_backward(&sg.grid, g.height, g.width), fm));
    let p = initial.to_array();
    (dot(&out.data, &g.data), std::array::from_fn(|i| dc[i] * p[i]), grid)
}

/// Gradient of a crop with respect to the four scale factors, through
/// refine, sanitize, the affine conversion and the sampler.
pub fn check_aroi_chain(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let (mut probes, mut skipped) = (0, 0);
    while probes < 5 {
        let f = random_map(&mut rng, 2, 10, 10);
        let g = random_map(&mut rng, 2, 3, 3);
        let initial = Corners::new(
            rng.random_range(1.5..3.5),
            rng.random_range(1.5..3.5),
            rng.random_range(5.5..8.0),
            rng.random_range(5.5..8.0),
        );
        let beta: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.8..1.2));
        let (_, analytic, grid) = crop_objective(&f, initial, beta, &g, 1.0);
        if !grid_clear_of_kinks(&grid, 10, 10, 1e-3) {
            skipped += 1;
            continue;
        }
        let numeric = central_difference(
            |b| crop_objective(&f, initial, [b[0], b[1], b[2], b[3]], &g, 1.0).0,
            &beta,
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
        probes += 1;
    }
    CheckResult::new("aroi.beta", worst, OP_TOLERANCE, probes, skipped)
}

fn gcn_setup(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Array2<f64>, Array2<f64>, GcnParams, Array2<f64>) {
    let mut a = Array2::from_shape_fn((n, n), |(i, j)| if i == j || rng.random_bool(0.4) { 1.0 } else { 0.0 });
    a = &a + &a.t();
    a.mapv_inplace(|v: f64| v.min(1.0));
    let a = crate::graph::normalize(a.view(), crate::graph::Normalization::Symmetric).expect("self loops");
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let params = GcnParams {
        layers: (0..2)
            .map(|_| GcnLayer {
                weight: Array2::from_shape_fn((d, d), |_| rng.random_range(-1.0..1.0)),
                activation: Activation::Relu,
            })
            .collect(),
    };
    let g = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    (a, x, params, g)
}

fn gcn_kink_margin(a: &Array2<f64>, x: &Array2<f64>, params: &GcnParams) -> f64 {
    let trace = gcn_forward_trace(x.view(), a.view(), params).expect("shapes");
    trace.pre.iter().flat_map(|p| p.iter()).map(|v| v.abs()).fold(f64::INFINITY, f64::min)
}

/// Gradients of a two-layer ReLU GCN with respect to node features and each weight.
pub fn check_gcn(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (6, 4);
    let (mut wx, mut ww) = (0.0f64, 0.0f64);
    let (mut probes, mut skipped) = (0, 0);
    while probes < 4 {
        let (a, x, params, g) = gcn_setup(&mut rng, n, d);
        if gcn_kink_margin(&a, &x, &params) < 1e-3 {
            skipped += 1;
            continue;
        }
        let objective = |x: &Array2<f64>, p: &GcnParams| -> f64 {
            let z = gcn_forward_trace(x.view(), a.view(), p).expect("shapes").output;
            (&z * &g).sum()
        };
        let trace = gcn_forward_trace(x.view(), a.view(), &params).expect("shapes");
        let grad = gcn_backward(&trace, a.view(), &params, g.view());
        let xs = x.as_slice().unwrap().to_vec();
        let numeric = central_difference(
            |v| objective(&Array2::from_shape_vec((n, d), v.to_vec()).unwrap(), &params),
            &xs,
            STEP,
        );
        wx = wx.max(relative_error(grad.input.as_slice().unwrap(), &numeric));
        for (l, gw) in grad.weights.iter().enumerate() {
            let w0 = params.layers[l].weight.as_slice().unwrap().to_vec();
            let numeric = central_difference(
                |v| {
                    let mut p = params.clone();
                    p.layers[l].weight = Array2::from_shape_vec((d, d), v.to_vec()).unwrap();
                    objective(&x, &p)
                },
                &w0,
                STEP,
            );
            ww = ww.max(relative_error(gw.as_slice().unwrap(), &numeric));
        }
        probes += 1;
    }
    vec![
        CheckResult::new("gcn.features", wx, OP_TOLERANCE, probes, skipped),
        CheckResult::new("gcn.weights", ww, OP_TOLERANCE, probes, skipped),
    ]
}

pub fn check_bce(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let trials = 10;
    for _ in 0..trials {
        let c = rng.random_range(1..8);
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..6.0)).collect();
        let y: Vec<u8> = (0..c).map(|_| rng.random_range(0..2)).collect();
        let w: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..3.0)).collect();
        let analytic = weighted_bce_grad(&z, &y, &w);
        let numeric = central_difference(|v| weighted_bce(v, &y, &w), &z, STEP);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    CheckResult::new("bce.logits", worst, OP_TOLERANCE, trials, 0)
}

/// The configuration used by the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        num_aus: 2,
        input_size: 32,
        stem_pool: 1,
        channels: vec![3, 4, 4],
        roi_sizes: vec![6.0, 3.0, 2.0],
        crop_size: 3,
        squeeze_channels: 3,
        regional_channels: 2,
        feature_dim: 3,
        ..ModelConfig::default()
    }
    .with_preset(Preset::Margl)
}

/// Parameter group a parameter name belongs to.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("backbone") {
        "backbone"
    } else if name.starts_with("global") {
        "global"
    } else if name.starts_with("gcn") {
        "gcn"
    } else if name.contains(".squeeze") {
        "squeeze"
    } else if name.contains(".aroi") {
        "aroi"
    } else if name.contains(".conv") {
        "regional"
    } else {
        "head"
    }
}

pub const PARAM_GROUPS: [&str; 7] = ["backbone", "global", "squeeze", "aroi", "regional", "gcn", "head"];

struct TinyProblem {
    model: Model,
    image: FeatureMap,
    centers: SideCenters,
    labels: Vec<u8>,
    weights: ClassWeights,
}

impl TinyProblem {
    fn new(seed: u64) -> Self {
        let cfg = tiny_model_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::new(cfg.clone(), seed).expect("valid tiny config");
        // Zero biases put ReLU inputs exactly on the kink wherever a crop is all zero.
        for p in model.params_mut() {
            if p.name.ends_with(".bias") {
                p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
        }
        for b in &mut model.branches {
            if let Some(h) = &mut b.aroi {
                h.weight.value.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
                h.bias.value.iter_mut().for_each(|w| *w = rng.random_range(-0.3..0.3));
            }
        }
        let mut a0 = Array2::eye(2);
        a0[[0, 1]] = 1.0;
        a0[[1, 0]] = 1.0;
        model.set_intra(a0).expect("valid relation matrix");
        let n = cfg.input_size;
        let image = FeatureMap::from_vec(3, n, n, (0..3 * n * n).map(|_| rng.random::<f64>()).collect());
        let mut pts = || -> Vec<Point> {
            (0..2)
                .map(|_| Point::new(rng.random_range(11.0..21.0), rng.random_range(11.0..21.0)))
                .collect()
        };
        let centers = SideCenters { left: pts(), right: pts() };
        Self {
            model,
            image,
            centers,
            labels: vec![1, 0],
            weights: ClassWeights {
                weights: vec![0.7, 1.3],
                rates: vec![0.6, 0.3],
            },
        }
    }

    fn loss(&self) -> f64 {
        let p = self.model.predict(&self.image, &self.centers).expect("tiny forward");
        p.branches().map(|b| weighted_bce(b, &self.labels, &self.weights.weights)).sum()
    }
}

/// End-to-end gradient of the summed branch loss with respect to every
/// parameter group of a tiny model.
///
/// Probes on or next to a non-differentiable point (a ReLU or interpolation
/// kink) are skipped: there the central differences at `h` and `h/2`
/// disagree, or the two one-sided differences do.
pub fn check_model(seed: u64, probes_per_param: usize) -> Vec<CheckResult> {
    let mut prob = TinyProblem::new(seed);
    let (preds, cache) = prob.model.forward(&prob.image, &prob.centers).expect("tiny forward");
    prob.model.zero_grad();
    let grads = BranchGrads::from_loss(&preds, &prob.labels, &prob.weights);
    prob.model.backward(&cache, &grads);
    let analytic: Vec<(String, Vec<f64>)> = prob
        .model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut per_group: Vec<(Vec<f64>, Vec<f64>, usize)> = vec![(Vec::new(), Vec::new(), 0); PARAM_GROUPS.len()];
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let gi = PARAM_GROUPS.iter().position(|g| *g == param_group(name)).unwrap();
        let mut idx: Vec<usize> = (0..grad.len()).collect();
        if idx.len() > probes_per_param {
            for i in 0..probes_per_param {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(probes_per_param);
        }
        for k in idx {
            let mut eval = |h: f64| {
                let orig = prob.model.params()[pi].value[k];
                prob.model.params_mut()[pi].value[k] = orig + h;
                let v = prob.loss();
                prob.model.params_mut()[pi].value[k] = orig;
                v
            };
            let (up, mid, down) = (eval(STEP), eval(0.0), eval(-STEP));
            let n1 = (up - down) / (2.0 * STEP);
            let n2 = (eval(STEP / 2.0) - eval(-STEP / 2.0)) / STEP;
            let one_sided_gap = ((up - mid) - (mid - down)).abs() / STEP;
            let entry = &mut per_group[gi];
            if (n1 - n2).abs() > 1e-6 * n1.abs().max(1e-3) || one_sided_gap > 1e-3 * n1.abs().max(1e-2) {
                entry.2 += 1;
                continue;
            }
            entry.0.push(grad[k]);
            entry.1.push(n1);
        }
    }
    PARAM_GROUPS
        .iter()
        .zip(per_group)
        .map(|(g, (a, n, skipped))| {
            let err = if a.is_empty() { f64::NAN } else { relative_error(&a, &n) };
            CheckResult::new(format!("model.{g}"), err, MODEL_TOLERANCE, a.len(), skipped)
        })
        .collect()
}

/// Straightforward per-pixel bilinear interpolation with edge clamping.
pub fn reference_bilinear(f: &FeatureMap, theta: &AffineParams, oh: usize, ow: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(f.channels, oh, ow);
    let pix = |f: &FeatureMap, c: usize, y: i64, x: i64| {
        f.at(
            c,
            y.clamp(0, f.height as i64 - 1) as usize,
            x.clamp(0, f.width as i64 - 1) as usize,
        )
    };
    for c in 0..f.channels {
        for i in 0..oh {
            for j in 0..ow {
                let v = if oh > 1 { -1.0 + 2.0 * i as f64 / (oh - 1) as f64 } else { 0.0 };
                let u = if ow > 1 { -1.0 + 2.0 * j as f64 / (ow - 1) as f64 } else { 0.0 };
                let xs = (theta.sx * u + theta.tx + 1.0) / 2.0 * (f.width - 1) as f64;
                let ys = (theta.sy * v + theta.ty + 1.0) / 2.0 * (f.height - 1) as f64;
                let (x0, y0) = (xs.floor() as i64, ys.floor() as i64);
                let (ax, ay) = (xs - x0 as f64, ys - y0 as f64);
                *out.at_mut(c, i, j) = (1.0 - ay) * ((1.0 - ax) * pix(f, c, y0, x0) + ax * pix(f, c, y0, x0 + 1))
                    + ay * ((1.0 - ax) * pix(f, c, y0 + 1, x0) + ax * pix(f, c, y0 + 1, x0 + 1));
            }
        }
    }
    out
}

/// The sampler and co-occurrence statistics against direct reference computations.
pub fn check_oracles(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let cases = 50;
    for _ in 0..cases {
        let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..9), rng.random_range(1..9));
        let f = random_map(&mut rng, c, h, w);
        let theta = AffineParams {
            sx: rng.random_range(-1.5..1.5),
            sy: rng.random_range(-1.5..1.5),
            tx: rng.random_range(-1.5..1.5),
            ty: rng.random_range(-1.5..1.5),
        };
        let (oh, ow) = (rng.random_range(1..7), rng.random_range(1..7));
        let got = bilinear_sample(&f, &make_grid(&theta, oh, ow));
        let want = reference_bilinear(&f, &theta, oh, ow);
        let err = got.data.iter().zip(&want.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    let sampler = CheckResult::new("oracle.sampler", worst, 1e-9, cases, 0);

    let mut mismatches = 0.0;
    for _ in 0..cases {
        let (n, c) = (rng.random_range(1..40), rng.random_range(1..6));
        let y = Array2::from_shape_fn((n, c), |_| u8::from(rng.random_bool(0.4)));
        let stats = cooccurrence(y.view()).expect("binary labels");
        for i in 0..c {
            for j in 0..c {
                let cond = (0..n).filter(|&r| y[[r, j]] == 1).count();
                let both = (0..n).filter(|&r| y[[r, j]] == 1 && y[[r, i]] == 1).count();
                let want = if i == j {
                    1.0
                } else if cond == 0 {
                    0.0
                } else {
                    both as f64 / cond as f64
                };
                if (stats.conditional[[i, j]] - want).abs() > 1e-12 {
                    mismatches += 1.0;
                }
            }
        }
    }
    let graph = CheckResult::new("oracle.cooccurrence", mismatches, 0.5, cases, 0);
    vec![sampler, graph]
}

/// A sampler feature-gradient check whose analytic side is deliberately wrong;
/// the harness must report it as a failure.
pub fn corrupted_fixture(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = random_map(&mut rng, 1, 5, 5);
    let theta = kink_free_theta(&mut rng, &f, 3, 3);
    let grid = make_grid(&theta, 3, 3);
    let g = random_map(&mut rng, 1, 3, 3);
    let mut analytic = bilinear_sample_backward(&f, &grid, &g).features.data;
    for v in &mut analytic {
        *v *= 1.01;
    }
    let numeric = central_difference(
        |x| dot(&bilinear_sample(&FeatureMap::from_vec(1, 5, 5, x.to_vec()), &grid).data, &g.data),
        &f.data,
        STEP,
    );
    CheckResult::new("fixture.corrupted", relative_error(&analytic, &numeric), OP_TOLERANCE, 1, 0)
}

/// Runs the named suites (all when `only` is empty).
pub fn run_suites(only: &[String], seed: u64) -> Result<SuiteReport> {
    for s in only {
        if NON_DIFFERENTIABLE.contains(&s.as_str()) {
            return Err(Error::Usage(format!("{s} is not differentiable; nothing to check")));
        }
        if !SUITES.contains(&s.as_str()) {
            return Err(Error::Usage(format!(
                "unknown gradient-check suite {s:?} (expected one of {})",
                SUITES.join(", ")
            )));
        }
    }
    let wants = |s: &str| only.is_empty() || only.iter().any(|o| o == s);
    let mut checks = Vec::new();
    if wants("sampler") {
        checks.push(check_sampler_features(seed));
        checks.push(check_sampler_theta(seed + 1));
    }
    if wants("aroi") {
        checks.push(check_aroi_chain(seed + 2));
    }
    if wants("gcn") {
        checks.extend(check_gcn(seed + 3));
    }
    if wants("bce") {
        checks.push(check_bce(seed + 4));
    }
    if wants("model") {
        checks.extend(check_model(seed + 5, 6));
    }
    if wants("oracle") {
        checks.extend(check_oracles(seed + 6));
    }
    Ok(SuiteReport::from_checks(checks))
}
