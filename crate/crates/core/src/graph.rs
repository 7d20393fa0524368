//! AU relation graph: label co-occurrence statistics, the thresholded
//! intra-level adjacency, the multi-level block adjacency that ties every AU
//! to itself on the other levels, its normalization, and graph convolution.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conditional occurrence statistics of a binary label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceStats {
    /// `conditional[[i, j]] = p(y_i = 1 | y_j = 1)`; zero where undefined except the diagonal.
    pub conditional: Array2<f64>,
    /// Whether column `j` had any positive sample.
    pub defined: Vec<bool>,
    pub positives: Vec<usize>,
    pub samples: usize,
}

pub fn cooccurrence(labels: ArrayView2<'_, u8>) -> Result<CooccurrenceStats> {
    let (n, c) = labels.dim();
    if n == 0 {
        return Err(Error::Input("co-occurrence needs at least one sample".into()));
    }
    if let Some(((row, col), v)) = labels.indexed_iter().find(|(_, &v)| v > 1) {
        return Err(Error::Input(format!(
            "label at row {row}, column {col} is {v}; labels must be 0 or 1"
        )));
    }
    let y = labels.mapv(|v| v as f64);
    // joint[i, j] = number of samples where both i and j are active.
    let joint = y.t().dot(&y);
    let positives: Vec<usize> = (0..c).map(|j| joint[[j, j]] as usize).collect();
    let defined: Vec<bool> = positives.iter().map(|&p| p > 0).collect();
    let mut conditional = Array2::zeros((c, c));
    for j in 0..c {
        if defined[j] {
            for i in 0..c {
                conditional[[i, j]] = joint[[i, j]] / positives[j] as f64;
            }
        }
        conditional[[j, j]] = 1.0;
    }
    Ok(CooccurrenceStats {
        conditional,
        defined,
        positives,
        samples: n,
    })
}

/// Binary adjacency: edge `(i, j)` when `p(y_i | y_j) >= p_pos`, self loops forced.
pub fn build_intra(stats: &CooccurrenceStats, p_pos: f64, symmetrize: bool) -> Array2<f64> {
    let c = stats.conditional.nrows();
    let mut a0 = stats
        .conditional
        .mapv(|p| if p >= p_pos { 1.0 } else { 0.0 });
    for i in 0..c {
        a0[[i, i]] = 1.0;
    }
    if symmetrize {
        let t = a0.t().to_owned();
        a0.zip_mut_with(&t, |a, &b| *a = f64::max(*a, b));
    }
    a0
}

/// Block adjacency with `a0` on every diagonal block and the identity on every
/// off-diagonal block.
pub fn build_multilevel(a0: ArrayView2<'_, f64>, levels: usize) -> Array2<f64> {
    let c = a0.nrows();
    let mut a = Array2::zeros((levels * c, levels * c));
    for bi in 0..levels {
        for bj in 0..levels {
            let mut block = a.slice_mut(s![bi * c..(bi + 1) * c, bj * c..(bj + 1) * c]);
            if bi == bj {
                block.assign(&a0);
            } else {
                block.diag_mut().fill(1.0);
            }
        }
    }
    a
}

/// Block-diagonal repetition of `a0`: the intra-level graph without cross-level edges.
pub fn block_diagonal(a0: ArrayView2<'_, f64>, levels: usize) -> Array2<f64> {
    let c = a0.nrows();
    let mut a = Array2::zeros((levels * c, levels * c));
    for b in 0..levels {
        a.slice_mut(s![b * c..(b + 1) * c, b * c..(b + 1) * c])
            .assign(&a0);
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// `D^-1/2 A D^-1/2`
    Symmetric,
    /// `D^-1 A`
    Row,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(Normalization::Symmetric),
            "row" => Ok(Normalization::Row),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::Symmetric => "symmetric",
            Normalization::Row => "row",
        })
    }
}

pub fn normalize(a: ArrayView2<'_, f64>, mode: Normalization) -> Result<Array2<f64>> {
    let degree = a.sum_axis(Axis(1));
    if let Some(i) = degree.iter().position(|&d| d <= 0.0) {
        return Err(Error::Input(format!("node {i} has zero degree")));
    }
    let mut out = a.to_owned();
    match mode {
        Normalization::Symmetric => {
            let inv_sqrt = degree.mapv(|d| 1.0 / d.sqrt());
            for ((i, j), v) in out.indexed_iter_mut() {
                *v *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        Normalization::Row => {
            for ((i, _), v) in out.indexed_iter_mut() {
                *v /= degree[i];
            }
        }
    }
    Ok(out)
}

/// Which edges a relation graph keeps, and how it is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphOptions {
    pub p_pos: f64,
    pub symmetrize: bool,
    pub normalization: Normalization,
    pub levels: usize,
    pub use_intra: bool,
    pub use_inter: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            p_pos: 0.3,
            symmetrize: true,
            normalization: Normalization::Symmetric,
            levels: 3,
            use_intra: true,
            use_inter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    pub intra: Array2<f64>,
    pub adjacency: Array2<f64>,
    pub normalized: Array2<f64>,
    pub p_pos: f64,
}

impl RelationGraph {
    pub fn build(stats: &CooccurrenceStats, opts: &GraphOptions) -> Result<Self> {
        if !(opts.p_pos > 0.0 && opts.p_pos < 1.0) {
            return Err(Error::Config(format!("p_pos must lie in (0, 1), got {}", opts.p_pos)));
        }
        if opts.levels == 0 {
            return Err(Error::Config("graph needs at least one level".into()));
        }
        let intra = build_intra(stats, opts.p_pos, opts.symmetrize);
        Self::from_intra(intra, opts)
    }

    pub fn from_intra(intra: Array2<f64>, opts: &GraphOptions) -> Result<Self> {
        let c = intra.nrows();
        let per_level = if opts.use_intra {
            intra.clone()
        } else {
            Array2::eye(c)
        };
        let adjacency = if opts.use_inter && opts.levels > 1 {
            build_multilevel(per_level.view(), opts.levels)
        } else {
            block_diagonal(per_level.view(), opts.levels)
        };
        let normalized = normalize(adjacency.view(), opts.normalization)?;
        Ok(Self {
            intra,
            adjacency,
            normalized,
            p_pos: opts.p_pos,
        })
    }

    /// A graph with only self loops.
    pub fn identity(nodes: usize) -> Self {
        Self {
            intra: Array2::eye(nodes),
            adjacency: Array2::eye(nodes),
            normalized: Array2::eye(nodes),
            p_pos: 0.3,
        }
    }

    pub fn node_count(&self) -> usize {
        self.normalized.nrows()
    }

    /// Number of undirected edges among distinct nodes of `adjacency`-style matrices.
    pub fn edge_count(a: &Array2<f64>) -> usize {
        let n = a.nrows();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| a[[i, j]] != 0.0 || a[[j, i]] != 0.0)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative given the pre-activation.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    /// `d_in x d_out`
    pub weight: Array2<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub layers: Vec<GcnLayer>,
}

impl GcnParams {
    fn check(&self, x: ArrayView2<'_, f64>, a_norm: ArrayView2<'_, f64>) -> Result<()> {
        let n = x.nrows();
        if a_norm.dim() != (n, n) {
            return Err(Error::Input(format!(
                "adjacency is {:?} but there are {n} nodes",
                a_norm.dim()
            )));
        }
        let mut width = x.ncols();
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weight.nrows() != width {
                return Err(Error::Input(format!(
                    "GCN layer {l} expects width {} but receives {width}",
                    layer.weight.nrows()
                )));
            }
            width = layer.weight.ncols();
        }
        Ok(())
    }
}

/// Intermediate values of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GcnTrace {
    /// Input to each layer.
    pub inputs: Vec<Array2<f64>>,
    /// `Ã X W` of each layer, before the activation.
    pub pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

pub fn gcn_forward_trace(
    x: ArrayView2<'_, f64>,
    a_norm: ArrayView2<'_, f64>,
    params: &GcnParams,
) -> Result<GcnTrace> {
    params.check(x, a_norm)?;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut h = x.to_owned();
    for layer in &params.layers {
        let z = a_norm.dot(&h).dot(&layer.weight);
        let act = layer.activation;
        let next = z.mapv(|v| act.apply(v));
        inputs.push(h);
        pre.push(z);
        h = next;
    }
    Ok(GcnTrace {
        inputs,
        pre,
        output: h,
    })
}

/// `Z = σ(Ã X W)` per layer, chained.
pub fn gcn_forward(
    x: ArrayView2<'_, f64>,
    a_norm: ArrayView2<'_, f64>,
    params: &GcnParams,
) -> Result<Array2<f64>> {
    Ok(gcn_forward_trace(x, a_norm, params)?.output)
}

#[derive(Debug, Clone)]
pub struct GcnGrad {
    pub input: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
}

pub fn gcn_backward(
    trace: &GcnTrace,
    a_norm: ArrayView2<'_, f64>,
    params: &GcnParams,
    grad_out: ArrayView2<'_, f64>,
) -> GcnGrad {
    let mut g = grad_out.to_owned();
    let mut weights = vec![Array2::zeros((0, 0)); params.layers.len()];
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let act = layer.activation;
        let mut dz = g;
        dz.zip_mut_with(&trace.pre[l], |d, &p| *d *= act.derivative(p));
        // Z = (Ã H) W
        let ah = a_norm.dot(&trace.inputs[l]);
        weights[l] = ah.t().dot(&dz);
        g = a_norm.t().dot(&dz.dot(&layer.weight.t()));
    }
    GcnGrad { input: g, weights }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force counting, one pair at a time.
    fn counting_oracle(labels: &Array2<u8>) -> Array2<f64> {
        let (n, c) = labels.dim();
        let mut p = Array2::zeros((c, c));
        for i in 0..c {
            for j in 0..c {
                let mut both = 0usize;
                let mut cond = 0usize;
                for r in 0..n {
                    if labels[[r, j]] == 1 {
                        cond += 1;
                        if labels[[r, i]] == 1 {
                            both += 1;
                        }
                    }
                }
                p[[i, j]] = if i == j {
                    1.0
                } else if cond == 0 {
                    0.0
                } else {
                    both as f64 / cond as f64
                };
            }
        }
        p
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<u8> {
        Array2::from_shape_fn((n, c), |_| u8::from(rng.random_bool(0.35)))
    }

    #[test]
    fn four_sample_example() {
        let labels = array![[1u8, 1], [1, 0], [0, 1], [1, 1]];
        let stats = cooccurrence(labels.view()).unwrap();
        assert!((stats.conditional[[0, 1]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((stats.conditional[[1, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(build_intra(&stats, 0.3, true), Array2::<f64>::ones((2, 2)));
    }

    #[test]
    fn all_ones_and_empty_columns() {
        let ones = Array2::<u8>::ones((5, 3));
        assert_eq!(cooccurrence(ones.view()).unwrap().conditional, Array2::<f64>::ones((3, 3)));
        let labels = array![[1u8, 0], [1, 0]];
        let stats = cooccurrence(labels.view()).unwrap();
        assert!(!stats.defined[1]);
        assert_eq!(stats.conditional[[0, 1]], 0.0);
        assert_eq!(stats.conditional[[1, 1]], 1.0);
    }

    #[test]
    fn rejects_non_binary_labels() {
        let labels = array![[1u8, 2]];
        assert!(matches!(cooccurrence(labels.view()), Err(Error::Input(_))));
    }

    #[test]
    fn below_threshold_gives_identity() {
        let stats = CooccurrenceStats {
            conditional: array![[1.0, 0.1, 0.1], [0.1, 1.0, 0.1], [0.1, 0.1, 1.0]],
            defined: vec![true; 3],
            positives: vec![10; 3],
            samples: 100,
        };
        assert_eq!(build_intra(&stats, 0.3, true), Array2::<f64>::eye(3));
        assert_eq!(GraphOptions::default().p_pos, 0.3);
    }

    #[test]
    fn symmetrization_is_optional() {
        let stats = CooccurrenceStats {
            conditional: array![[1.0, 0.9], [0.1, 1.0]],
            defined: vec![true; 2],
            positives: vec![10; 2],
            samples: 20,
        };
        assert_eq!(build_intra(&stats, 0.3, false), array![[1.0, 1.0], [0.0, 1.0]]);
        assert_eq!(build_intra(&stats, 0.3, true), array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn multilevel_examples() {
        let a = build_multilevel(Array2::<f64>::eye(2).view(), 3);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(a[[i, j]], if i % 2 == j % 2 { 1.0 } else { 0.0 });
            }
        }
        let a = build_multilevel(Array2::<f64>::ones((2, 2)).view(), 3);
        for bi in 0..3 {
            for bj in 0..3 {
                let block = a.slice(s![bi * 2..bi * 2 + 2, bj * 2..bj * 2 + 2]);
                if bi == bj {
                    assert_eq!(block, Array2::<f64>::ones((2, 2)));
                } else {
                    assert_eq!(block, Array2::<f64>::eye(2));
                }
            }
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize(Array2::<f64>::eye(4).view(), Normalization::Symmetric).unwrap(), Array2::<f64>::eye(4));
        let half = normalize(Array2::<f64>::ones((2, 2)).view(), Normalization::Symmetric).unwrap();
        assert!(half.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let a = array![[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]];
        let row = normalize(a.view(), Normalization::Row).unwrap();
        for r in row.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-15);
        }
        assert!(normalize(Array2::<f64>::zeros((2, 2)).view(), Normalization::Row).is_err());
    }

    #[test]
    fn switches_select_blocks() {
        let intra = array![[1.0, 1.0], [1.0, 1.0]];
        let mut opts = GraphOptions { use_inter: false, ..GraphOptions::default() };
        let g = RelationGraph::from_intra(intra.clone(), &opts).unwrap();
        assert_eq!(g.adjacency, block_diagonal(intra.view(), 3));
        opts.use_intra = false;
        let g = RelationGraph::from_intra(intra.clone(), &opts).unwrap();
        assert_eq!(g.normalized, Array2::<f64>::eye(6));
        opts.use_inter = true;
        let g = RelationGraph::from_intra(intra, &opts).unwrap();
        assert_eq!(g.adjacency, build_multilevel(Array2::<f64>::eye(2).view(), 3));
    }

    #[test]
    fn identity_probe() {
        let a = array![[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]];
        let an = normalize(a.view(), Normalization::Symmetric).unwrap();
        let params = GcnParams {
            layers: vec![GcnLayer { weight: Array2::eye(3), activation: Activation::Identity }],
        };
        let z = gcn_forward(Array2::<f64>::eye(3).view(), an.view(), &params).unwrap();
        assert_eq!(z, an);
    }

    #[test]
    fn single_node_is_a_plain_linear_layer() {
        let x = array![[0.5, -2.0]];
        let w = array![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]];
        let params = GcnParams { layers: vec![GcnLayer { weight: w.clone(), activation: Activation::Relu }] };
        let z = gcn_forward(x.view(), array![[1.0]].view(), &params).unwrap();
        assert_eq!(z, x.dot(&w).mapv(|v: f64| v.max(0.0)));
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let params = GcnParams { layers: vec![GcnLayer { weight: Array2::zeros((3, 2)), activation: Activation::Relu }] };
        let x = Array2::<f64>::zeros((2, 4));
        assert!(gcn_forward(x.view(), Array2::<f64>::eye(2).view(), &params).is_err());
        let x = Array2::<f64>::zeros((2, 3));
        assert!(gcn_forward(x.view(), Array2::<f64>::eye(3).view(), &params).is_err());
    }

    #[test]
    fn matches_per_node_neighbor_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let a = Array2::from_shape_fn((n, n), |(i, j)| if i == j || rng.random_bool(0.4) { 1.0 } else { 0.0 });
        let a = &a + &a.t();
        let an = normalize(a.view(), Normalization::Symmetric).unwrap();
        let x = Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let params = GcnParams { layers: vec![GcnLayer { weight: w.clone(), activation: Activation::Relu }] };
        let z = gcn_forward(x.view(), an.view(), &params).unwrap();
        let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[[i, j]]).sum()).collect();
        for v in 0..n {
            let mut agg = vec![0.0; 4];
            for u in 0..n {
                if a[[v, u]] != 0.0 {
                    let coef = a[[v, u]] / (deg[v] * deg[u]).sqrt();
                    for k in 0..4 {
                        agg[k] += coef * x[[u, k]];
                    }
                }
            }
            for o in 0..3 {
                let val: f64 = (0..4).map(|k| agg[k] * w[[k, o]]).sum::<f64>().max(0.0);
                assert!((z[[v, o]] - val).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn cooccurrence_matches_counting_oracle(seed in 0u64..10_000, n in 1usize..=64, c in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = random_labels(&mut rng, n, c);
            let stats = cooccurrence(labels.view()).unwrap();
            prop_assert_eq!(stats.conditional, counting_oracle(&labels));
        }

        #[test]
        fn block_structure_holds(seed in 0u64..10_000, c in 1usize..7, levels in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a0 = Array2::from_shape_fn((c, c), |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            let a = build_multilevel(a0.view(), levels);
            for bi in 0..levels {
                for bj in 0..levels {
                    let block = a.slice(s![bi * c..(bi + 1) * c, bj * c..(bj + 1) * c]);
                    if bi == bj {
                        prop_assert_eq!(block, a0.view());
                    } else {
                        prop_assert_eq!(block.to_owned(), Array2::<f64>::eye(c));
                    }
                }
            }
        }

        #[test]
        fn diagonal_is_one_when_every_au_occurs(seed in 0u64..10_000, n in 1usize..40, c in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels = random_labels(&mut rng, n, c);
            for j in 0..c {
                labels[[j % n, j]] = 1;
            }
            let stats = cooccurrence(labels.view()).unwrap();
            let a0 = build_intra(&stats, 0.3, false);
            prop_assert!((0..c).all(|i| a0[[i, i]] == 1.0));
        }

        #[test]
        fn gcn_is_permutation_equivariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let a = Array2::from_shape_fn((n, n), |(i, j)| if i == j || rng.random_bool(0.3) { 1.0 } else { 0.0 });
            let a = normalize((&a + &a.t()).view(), Normalization::Symmetric).unwrap();
            let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
            let params = GcnParams { layers: vec![
                GcnLayer { weight: Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)), activation: Activation::Relu },
                GcnLayer { weight: Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)), activation: Activation::Relu },
            ]};
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let p = Array2::from_shape_fn((n, n), |(i, j)| if perm[i] == j { 1.0 } else { 0.0 });
            let lhs = gcn_forward(p.dot(&x).view(), p.dot(&a).dot(&p.t()).view(), &params).unwrap();
            let rhs = p.dot(&gcn_forward(x.view(), a.view(), &params).unwrap());
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }
    }
}
