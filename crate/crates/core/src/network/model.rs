//! The full forward and backward pass.

use std::hash::Hasher;

use fnv::FnvHasher;
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{
    avg_pool, global_avg_pool, global_avg_pool_backward, relu_backward_inplace, relu_inplace, ConvCache, Conv2d,
    Linear, Param,
};
use crate::error::{Error, Result};
use crate::geometry::{
    affine_grad_to_corners, corners_to_affine, initial_box, map_center, refine_box, sanitize_corners, CornerJacobian,
    Corners, Extent, RoiBox, Side, SideCenters,
};
use crate::graph::{gcn_backward, gcn_forward_trace, Activation, GcnLayer, GcnParams, GcnTrace, GraphOptions, RelationGraph};
use crate::objective::{weighted_bce, weighted_bce_grad, ClassWeights, PredictionSet};
use crate::sampler::{bilinear_sample, bilinear_sample_backward_into, grid_backward, make_grid, SampleGrid};
use crate::tensor::FeatureMap;

/// A generator private to one named component, so its initial values do not
/// depend on which other components exist.
pub fn component_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = FnvHasher::default();
    h.write(name.as_bytes());
    ChaCha8Rng::seed_from_u64(seed ^ h.finish())
}

fn conv(seed: u64, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv2d {
    Conv2d::new(name, cin, cout, k, stride, pad, &mut component_rng(seed, name))
}

fn linear(seed: u64, name: &str, cin: usize, cout: usize) -> Linear {
    Linear::new(name, cin, cout, &mut component_rng(seed, name))
}

/// Elementwise maximum over branch logits.
pub fn fuse(branches: &[&[f64]]) -> Vec<f64> {
    let mut it = branches.iter();
    let mut out = it.next().expect("at least one branch").to_vec();
    for b in it {
        for (o, v) in out.iter_mut().zip(b.iter()) {
            *o = o.max(*v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub down: Conv2d,
    pub res: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionalNet {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

/// Everything attached to one active level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelBranch {
    pub level: usize,
    pub squeeze: Conv2d,
    /// Scale-factor head; outputs are ordered side, AU, corner.
    pub aroi: Option<Linear>,
    /// Indexed by side, then AU.
    pub regional: [Vec<RegionalNet>; 2],
    pub heads: Vec<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stages: Vec<Stage>,
    pub global_head: Linear,
    pub branches: Vec<LevelBranch>,
    /// GCN weights per side, `d x d` per layer.
    pub gcn: [Vec<Param>; 2],
    graph: RelationGraph,
}

#[derive(Debug, Clone)]
struct StageCache {
    a: FeatureMap,
    down: ConvCache,
    res: ConvCache,
    out: FeatureMap,
}

/// Per-ROI intermediates.
#[derive(Debug, Clone)]
pub struct RoiCache {
    /// Initial corners, scale factors and raw refined corners.
    pub roi: RoiBox,
    /// Corners actually cropped, after sanitizing.
    pub crop_box: Corners,
    jac: CornerJacobian,
    grid: SampleGrid,
    crop: FeatureMap,
    c1: ConvCache,
    h1: FeatureMap,
    c2: ConvCache,
    h2: FeatureMap,
}

#[derive(Debug, Clone)]
struct LevelCache {
    sq: FeatureMap,
    sq_conv: ConvCache,
    gap: Vec<f64>,
    z: Vec<f64>,
    rois: [Vec<RoiCache>; 2],
}

/// Intermediates of one forward pass, consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pooled: FeatureMap,
    stages: Vec<StageCache>,
    global_in: Vec<f64>,
    levels: Vec<LevelCache>,
    gcn: Vec<GcnTrace>,
    avg: Option<Array2<f64>>,
}

impl ForwardCache {
    /// Cropped boxes of every active level, in feature-map coordinates.
    pub fn rois(&self) -> impl Iterator<Item = &RoiCache> {
        self.levels.iter().flat_map(|l| l.rois.iter().flatten())
    }

    /// Backbone output of each level.
    pub fn level_maps(&self) -> impl Iterator<Item = &FeatureMap> {
        self.stages.iter().map(|s| &s.out)
    }
}

/// Loss gradients with respect to each branch's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGrads {
    pub global: Option<Vec<f64>>,
    pub levels: Vec<Option<Vec<f64>>>,
}

impl BranchGrads {
    /// Gradients of the summed weighted cross-entropy over every present branch.
    pub fn from_loss(preds: &PredictionSet, labels: &[u8], weights: &ClassWeights) -> Self {
        let g = |p: &Vec<f64>| weighted_bce_grad(p, labels, &weights.weights);
        Self {
            global: preds.global.as_ref().map(g),
            levels: preds.levels.iter().map(|l| l.as_ref().map(g)).collect(),
        }
    }
}

fn gcn_params(weights: &[Param]) -> GcnParams {
    GcnParams {
        layers: weights
            .iter()
            .map(|p| GcnLayer {
                weight: Array2::from_shape_vec((p.shape[0], p.shape[1]), p.value.clone()).expect("gcn weight shape"),
                activation: Activation::Relu,
            })
            .collect(),
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.num_aus;
        let mut stages = Vec::new();
        let mut cin = 3;
        for (s, &ch) in config.channels.iter().enumerate() {
            let name = format!("backbone.stage{}", s + 1);
            stages.push(Stage {
                down: conv(seed, &format!("{name}.down"), cin, ch, 3, 2, 1),
                res: conv(seed, &format!("{name}.res"), ch, ch, 3, 1, 1),
            });
            cin = ch;
        }
        let global_head = linear(seed, "global.fc", cin, c);
        let (sq, r, d) = (config.squeeze_channels, config.regional_channels, config.feature_dim);
        let branches = config
            .active_levels()
            .into_iter()
            .map(|l| {
                let name = format!("level{}", l + 1);
                let regional = Side::BOTH.map(|side| {
                    (0..c)
                        .map(|j| {
                            let n = format!("{name}.{side}.au{}", j + 1);
                            RegionalNet {
                                conv1: conv(seed, &format!("{n}.conv1"), sq, r, 3, 1, 1),
                                conv2: conv(seed, &format!("{n}.conv2"), r, d, 3, 1, 1),
                            }
                        })
                        .collect()
                });
                LevelBranch {
                    level: l,
                    squeeze: conv(seed, &format!("{name}.squeeze"), config.channels[l], sq, 1, 1, 0),
                    aroi: config
                        .switches
                        .use_adaptive
                        .then(|| Linear::zeroed(&format!("{name}.aroi"), sq, 2 * c * 4)),
                    regional,
                    heads: (0..c)
                        .map(|j| linear(seed, &format!("{name}.au{}.head", j + 1), d, 1))
                        .collect(),
                }
            })
            .collect::<Vec<_>>();
        let gcn = Side::BOTH.map(|side| {
            if branches.is_empty() {
                return Vec::new();
            }
            (0..config.gcn_layers)
                .map(|l| {
                    let name = format!("gcn.{side}.layer{}.weight", l + 1);
                    Param::normal(name.clone(), vec![d, d], (2.0 / d as f64).sqrt(), &mut component_rng(seed, &name))
                })
                .collect()
        });
        let mut model = Self {
            config,
            stages,
            global_head,
            branches,
            gcn,
            graph: RelationGraph::identity(1),
        };
        model.set_intra(Array2::eye(c))?;
        Ok(model)
    }

    pub fn graph_options(&self) -> GraphOptions {
        GraphOptions {
            p_pos: self.config.p_pos,
            symmetrize: self.config.symmetrize,
            normalization: self.config.normalization,
            levels: self.branches.len().max(1),
            use_intra: self.config.switches.use_intra_graph,
            use_inter: self.config.switches.use_inter_graph,
        }
    }

    /// Installs the per-level AU relation matrix and rebuilds the normalized graph
    /// for the active levels.
    pub fn set_intra(&mut self, intra: Array2<f64>) -> Result<()> {
        let c = self.config.num_aus;
        if intra.dim() != (c, c) {
            return Err(Error::Input(format!("relation matrix is {:?}, expected {c}x{c}", intra.dim())));
        }
        if intra.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input("relation matrix entries must be 0 or 1".into()));
        }
        self.graph = RelationGraph::from_intra(intra, &self.graph_options())?;
        Ok(())
    }

    pub fn graph(&self) -> &RelationGraph {
        &self.graph
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend(s.down.params());
            out.extend(s.res.params());
        }
        out.extend(self.global_head.params());
        for b in &self.branches {
            out.extend(b.squeeze.params());
            if let Some(a) = &b.aroi {
                out.extend(a.params());
            }
            for net in b.regional.iter().flatten() {
                out.extend(net.conv1.params());
                out.extend(net.conv2.params());
            }
            for h in &b.heads {
                out.extend(h.params());
            }
        }
        out.extend(self.gcn.iter().flatten());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.extend(s.down.params_mut());
            out.extend(s.res.params_mut());
        }
        out.extend(self.global_head.params_mut());
        for b in &mut self.branches {
            out.extend(b.squeeze.params_mut());
            if let Some(a) = &mut b.aroi {
                out.extend(a.params_mut());
            }
            for net in b.regional.iter_mut().flatten() {
                out.extend(net.conv1.params_mut());
                out.extend(net.conv2.params_mut());
            }
            for h in &mut b.heads {
                out.extend(h.params_mut());
            }
        }
        out.extend(self.gcn.iter_mut().flatten());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn check_input(&self, image: &FeatureMap, centers: &SideCenters) -> Result<()> {
        let n = self.config.input_size;
        if image.shape() != (3, n, n) {
            return Err(Error::Input(format!(
                "image is {:?}, expected (3, {n}, {n})",
                image.shape()
            )));
        }
        let c = self.config.num_aus;
        if centers.left.len() != c || centers.right.len() != c {
            return Err(Error::Input(format!(
                "expected {c} AU centers per side, got {} and {}",
                centers.left.len(),
                centers.right.len()
            )));
        }
        if !image.is_finite() {
            return Err(Error::Input("image contains non-finite values".into()));
        }
        Ok(())
    }

    /// Forward pass on one `3 x input_size x input_size` image with AU centers
    /// given in input pixel coordinates.
    pub fn forward(&self, image: &FeatureMap, centers: &SideCenters) -> Result<(PredictionSet, ForwardCache)> {
        self.check_input(image, centers)?;
        let cfg = &self.config;
        let c = cfg.num_aus;

        let pooled = avg_pool(image, cfg.stem_pool);
        let mut stages: Vec<StageCache> = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            let x = match stages.last() {
                Some(prev) if s > 0 => &prev.out,
                _ => &pooled,
            };
            let (mut a, down) = stage.down.forward(x);
            relu_inplace(&mut a);
            let (mut out, res) = stage.res.forward(&a);
            out.add_assign(&a);
            relu_inplace(&mut out);
            stages.push(StageCache { a, down, res, out });
        }
        let global_in = global_avg_pool(&stages.last().unwrap().out);
        let global = self.global_head.forward(&global_in);

        let image_extent = Extent::new(cfg.input_size as f64, cfg.input_size as f64);
        let mut levels = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let size = cfg.level_size(b.level) as f64;
            let fm = Extent::new(size, size);
            let (mut sq, sq_conv) = b.squeeze.forward(&stages[b.level].out);
            relu_inplace(&mut sq);
            let gap = global_avg_pool(&sq);
            let z = b.aroi.as_ref().map(|h| h.forward(&gap)).unwrap_or_default();
            let mut rois: [Vec<RoiCache>; 2] = [Vec::with_capacity(c), Vec::with_capacity(c)];
            for side in Side::BOTH {
                for j in 0..c {
                    let center = map_center(centers.side(side)[j], image_extent, fm);
                    let initial = initial_box(center, cfg.roi_sizes[b.level], fm)?;
                    let mut roi = RoiBox::fixed(j, side, b.level, initial);
                    if !z.is_empty() {
                        let o = (side.index() * c + j) * 4;
                        let beta = std::array::from_fn(|i| 1.0 + cfg.alpha * z[o + i].tanh());
                        roi = refine_box(&roi, beta);
                    }
                    let (crop_box, jac) = sanitize_corners(roi.refined, fm, cfg.min_side);
                    let grid = make_grid(&corners_to_affine(crop_box, fm), cfg.crop_size, cfg.crop_size);
                    let crop = bilinear_sample(&sq, &grid);
                    let net = &b.regional[side.index()][j];
                    let (mut h1, c1) = net.conv1.forward(&crop);
                    relu_inplace(&mut h1);
                    let (mut h2, c2) = net.conv2.forward(&h1);
                    relu_inplace(&mut h2);
                    rois[side.index()].push(RoiCache {
                        roi,
                        crop_box,
                        jac,
                        grid,
                        crop,
                        c1,
                        h1,
                        c2,
                        h2,
                    });
                }
            }
            levels.push(LevelCache {
                sq,
                sq_conv,
                gap,
                z,
                rois,
            });
        }

        let mut level_logits = vec![None; cfg.levels()];
        let mut gcn = Vec::new();
        let mut avg = None;
        if !self.branches.is_empty() {
            let d = cfg.feature_dim;
            let nodes = self.branches.len() * c;
            let a_norm = self.graph.normalized.view();
            for side in Side::BOTH {
                let mut x = Array2::zeros((nodes, d));
                for (li, lc) in levels.iter().enumerate() {
                    for (j, rc) in lc.rois[side.index()].iter().enumerate() {
                        let f = global_avg_pool(&rc.h2);
                        x.row_mut(li * c + j).assign(&ndarray::ArrayView1::from(&f));
                    }
                }
                gcn.push(gcn_forward_trace(x.view(), a_norm, &gcn_params(&self.gcn[side.index()]))?);
            }
            let mean = (&gcn[0].output + &gcn[1].output) * 0.5;
            for (li, b) in self.branches.iter().enumerate() {
                let logits: Vec<f64> = (0..c)
                    .map(|j| b.heads[j].forward(mean.row(li * c + j).as_slice().unwrap())[0])
                    .collect();
                level_logits[b.level] = Some(logits);
            }
            avg = Some(mean);
        }

        let fused = {
            let mut parts: Vec<&[f64]> = vec![&global];
            parts.extend(level_logits.iter().flatten().map(|v| v.as_slice()));
            fuse(&parts)
        };
        let preds = PredictionSet {
            global: Some(global),
            levels: level_logits,
            fused,
        };
        if preds.fused.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok((
            preds,
            ForwardCache {
                pooled,
                stages,
                global_in,
                levels,
                gcn,
                avg,
            },
        ))
    }

    pub fn predict(&self, image: &FeatureMap, centers: &SideCenters) -> Result<PredictionSet> {
        Ok(self.forward(image, centers)?.0)
    }

    /// Accumulates parameter gradients for the given branch-logit gradients.
    pub fn backward(&mut self, cache: &ForwardCache, grads: &BranchGrads) {
        let cfg = self.config.clone();
        let c = cfg.num_aus;
        let mut dmaps: Vec<FeatureMap> = cache
            .stages
            .iter()
            .map(|s| FeatureMap::zeros(s.out.channels, s.out.height, s.out.width))
            .collect();

        if let Some(g) = &grads.global {
            let dg = self.global_head.backward(&cache.global_in, g);
            let last = dmaps.last_mut().unwrap();
            last.add_assign(&global_avg_pool_backward(&dg, last.height, last.width));
        }

        if let Some(avg) = &cache.avg {
            let mut davg = Array2::<f64>::zeros(avg.dim());
            for (li, b) in self.branches.iter_mut().enumerate() {
                let Some(g) = grads.levels.get(b.level).and_then(|g| g.as_ref()) else {
                    continue;
                };
                for j in 0..c {
                    let row = li * c + j;
                    let dx = b.heads[j].backward(avg.row(row).as_slice().unwrap(), &[g[j]]);
                    davg.row_mut(row).iter_mut().zip(&dx).for_each(|(a, v)| *a += v);
                }
            }
            let dz = davg * 0.5;
            let a_norm = self.graph.normalized.clone();
            let mut dfeat: Vec<Array2<f64>> = Vec::with_capacity(2);
            for side in Side::BOTH {
                let params = gcn_params(&self.gcn[side.index()]);
                let gg = gcn_backward(&cache.gcn[side.index()], a_norm.view(), &params, dz.view());
                for (p, gw) in self.gcn[side.index()].iter_mut().zip(&gg.weights) {
                    p.grad.iter_mut().zip(gw.iter()).for_each(|(a, v)| *a += v);
                }
                dfeat.push(gg.input);
            }

            for (li, b) in self.branches.iter_mut().enumerate() {
                let lc = &cache.levels[li];
                let size = cfg.level_size(b.level) as f64;
                let fm = Extent::new(size, size);
                let mut dsq = FeatureMap::zeros(lc.sq.channels, lc.sq.height, lc.sq.width);
                let mut dz_aroi = vec![0.0; lc.z.len()];
                let mut dgrid = vec![(0.0, 0.0); cfg.crop_size * cfg.crop_size];
                for side in Side::BOTH {
                    for j in 0..c {
                        let rc = &lc.rois[side.index()][j];
                        let df = dfeat[side.index()].row(li * c + j);
                        let mut dh2 = global_avg_pool_backward(df.as_slice().unwrap(), rc.h2.height, rc.h2.width);
                        relu_backward_inplace(&rc.h2, &mut dh2);
                        let net = &mut b.regional[side.index()][j];
                        let mut dh1 = net.conv2.backward(&rc.h1, &rc.c2, &dh2, true).unwrap();
                        relu_backward_inplace(&rc.h1, &mut dh1);
                        let dcrop = net.conv1.backward(&rc.crop, &rc.c1, &dh1, true).unwrap();
                        bilinear_sample_backward_into(&lc.sq, &rc.grid, &dcrop, &mut dsq, &mut dgrid);
                        if lc.z.is_empty() {
                            continue;
                        }
                        let dtheta = grid_backward(&dgrid, cfg.crop_size, cfg.crop_size);
                        let draw = rc.jac.pull_back(affine_grad_to_corners(dtheta, fm));
                        let p = rc.roi.initial.to_array();
                        let o = (side.index() * c + j) * 4;
                        for i in 0..4 {
                            let t = lc.z[o + i].tanh();
                            dz_aroi[o + i] = draw[i] * p[i] * cfg.alpha * (1.0 - t * t);
                        }
                    }
                }
                if let Some(head) = &mut b.aroi {
                    let dgap = head.backward(&lc.gap, &dz_aroi);
                    dsq.add_assign(&global_avg_pool_backward(&dgap, lc.sq.height, lc.sq.width));
                }
                relu_backward_inplace(&lc.sq, &mut dsq);
                let dx = b
                    .squeeze
                    .backward(&cache.stages[b.level].out, &lc.sq_conv, &dsq, true)
                    .unwrap();
                dmaps[b.level].add_assign(&dx);
            }
        }

        for s in (0..self.stages.len()).rev() {
            let sc = &cache.stages[s];
            let mut dsum = std::mem::replace(&mut dmaps[s], FeatureMap::zeros(0, 0, 0));
            relu_backward_inplace(&sc.out, &mut dsum);
            let stage = &mut self.stages[s];
            let mut da = stage.res.backward(&sc.a, &sc.res, &dsum, true).unwrap();
            da.add_assign(&dsum);
            relu_backward_inplace(&sc.a, &mut da);
            let input = if s == 0 { &cache.pooled } else { &cache.stages[s - 1].out };
            if let Some(dx) = stage.down.backward(input, &sc.down, &da, s > 0) {
                dmaps[s - 1].add_assign(&dx);
            }
        }
    }

    /// Summed branch loss for one sample, accumulating its gradients.
    pub fn accumulate(
        &mut self,
        image: &FeatureMap,
        centers: &SideCenters,
        labels: &[u8],
        weights: &ClassWeights,
    ) -> Result<(PredictionSet, Vec<f64>)> {
        let (preds, cache) = self.forward(image, centers)?;
        let losses: Vec<f64> = preds.branches().map(|b| weighted_bce(b, labels, &weights.weights)).collect();
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numerical("loss is not finite".into()));
        }
        self.backward(&cache, &BranchGrads::from_loss(&preds, labels, weights));
        Ok((preds, losses))
    }

    /// Normalized adjacency currently used by the relation embedding.
    pub fn adjacency(&self) -> ArrayView2<'_, f64> {
        self.graph.normalized.view()
    }
}
