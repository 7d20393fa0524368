//! Trainable building blocks with hand-written backward passes.
//!
//! Every layer owns its [`Param`]s; backward passes accumulate into
//! `Param::grad` and return the gradient with respect to the layer input.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{gemm, FeatureMap};

/// A named parameter tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn normal<R: Rng>(name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, shape);
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in &mut p.value {
            *v = dist.sample(rng);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// 2-D convolution over a [`FeatureMap`], square kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Lowered input kept by [`Conv2d::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Option<Vec<f64>>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// He-normal weights, zero bias. Each parameter draws from its own generator
    /// so enabling or disabling other components never perturbs it.
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::normal(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                (2.0 / fan_in as f64).sqrt(),
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &FeatureMap, ho: usize, wo: usize) -> Vec<f64> {
        let k = self.kernel;
        let n = ho * wo;
        let mut cols = vec![0.0; x.channels * k * k * n];
        let (h, w) = (x.height as isize, x.width as isize);
        for c in 0..x.channels {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..][..x.width];
                        let dst = &mut row[oy * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], shape: (usize, usize, usize), ho: usize, wo: usize) -> FeatureMap {
        let (channels, height, width) = shape;
        let k = self.kernel;
        let n = ho * wo;
        let mut x = FeatureMap::zeros(channels, height, width);
        let (h, w) = (height as isize, width as isize);
        for c in 0..channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let base = (c * height + iy as usize) * width;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w {
                                x.data[base + ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, ConvCache) {
        assert_eq!(x.channels, self.in_channels, "{}: input channels", self.weight.name);
        let (ho, wo) = self.output_size(x.height, x.width);
        let n = ho * wo;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut y = FeatureMap::zeros(self.out_channels, ho, wo);
        for (o, b) in self.bias.value.iter().enumerate() {
            y.data[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        let cols = if self.is_pointwise() {
            gemm(self.out_channels, kdim, n, 1.0, &self.weight.value, false, &x.data, false, 1.0, &mut y.data);
            None
        } else {
            let cols = self.im2col(x, ho, wo);
            gemm(self.out_channels, kdim, n, 1.0, &self.weight.value, false, &cols, false, 1.0, &mut y.data);
            Some(cols)
        };
        (
            y,
            ConvCache {
                cols,
                in_shape: x.shape(),
                out_hw: (ho, wo),
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when `need_input` is set.
    pub fn backward(
        &mut self,
        x: &FeatureMap,
        cache: &ConvCache,
        grad_out: &FeatureMap,
        need_input: bool,
    ) -> Option<FeatureMap> {
        let (ho, wo) = cache.out_hw;
        let n = ho * wo;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let cols: &[f64] = cache.cols.as_deref().unwrap_or(&x.data);
        gemm(self.out_channels, n, kdim, 1.0, &grad_out.data, false, cols, true, 1.0, &mut self.weight.grad);
        for (o, g) in self.bias.grad.iter_mut().enumerate() {
            *g += grad_out.data[o * n..(o + 1) * n].iter().sum::<f64>();
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![0.0; kdim * n];
        gemm(kdim, self.out_channels, n, 1.0, &self.weight.value, true, &grad_out.data, false, 0.0, &mut dcols);
        if self.is_pointwise() {
            let (c, h, w) = cache.in_shape;
            Some(FeatureMap::from_vec(c, h, w, dcols))
        } else {
            Some(self.col2im(&dcols, cache.in_shape, ho, wo))
        }
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let std = (2.0 / (in_features + out_features) as f64).sqrt();
        Self {
            weight: Param::normal(format!("{name}.weight"), vec![out_features, in_features], std, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![out_features]),
            in_features,
            out_features,
        }
    }

    pub fn zeroed(name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), vec![out_features, in_features]),
            bias: Param::zeros(format!("{name}.bias"), vec![out_features]),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_features);
        self.weight
            .value
            .chunks_exact(self.in_features)
            .zip(&self.bias.value)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_features];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.bias.grad[o] += g;
            let row = &self.weight.value[o * self.in_features..][..self.in_features];
            let grow = &mut self.weight.grad[o * self.in_features..][..self.in_features];
            for i in 0..self.in_features {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

pub fn relu_inplace(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` where the ReLU output `y` was clipped.
pub fn relu_backward_inplace(y: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &v) in grad.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn global_avg_pool(x: &FeatureMap) -> Vec<f64> {
    let n = x.plane_len() as f64;
    (0..x.channels)
        .map(|c| x.plane(c).iter().sum::<f64>() / n)
        .collect()
}

pub fn global_avg_pool_backward(grad: &[f64], height: usize, width: usize) -> FeatureMap {
    let n = height * width;
    let mut out = FeatureMap::zeros(grad.len(), height, width);
    for (c, g) in grad.iter().enumerate() {
        let v = g / n as f64;
        out.data[c * n..(c + 1) * n].iter_mut().for_each(|x| *x = v);
    }
    out
}

/// Non-overlapping `factor x factor` average pooling; trailing rows/columns that
/// do not fill a window are dropped.
pub fn avg_pool(x: &FeatureMap, factor: usize) -> FeatureMap {
    if factor == 1 {
        return x.clone();
    }
    let (ho, wo) = (x.height / factor, x.width / factor);
    let mut out = FeatureMap::zeros(x.channels, ho, wo);
    let scale = 1.0 / (factor * factor) as f64;
    for c in 0..x.channels {
        let plane = x.plane(c);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..factor {
                    let row = &plane[(oy * factor + dy) * x.width + ox * factor..][..factor];
                    s += row.iter().sum::<f64>();
                }
                *out.at_mut(c, oy, ox) = s * scale;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn conv_oracle(conv: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let (ho, wo) = conv.output_size(x.height, x.width);
        let k = conv.kernel;
        let mut y = FeatureMap::zeros(conv.out_channels, ho, wo);
        for o in 0..conv.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = conv.bias.value[o];
                    for c in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                    s += conv.weight.value[((o * conv.in_channels + c) * k + ky) * k + kx]
                                        * x.at(c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    *y.at_mut(o, oy, ox) = s;
                }
            }
        }
        y
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let mut conv = Conv2d::new("c", 3, 4, k, s, p, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_map(&mut rng, 3, 7, 6);
            let (y, _) = conv.forward(&x);
            let want = conv_oracle(&conv, &x);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new("c", 2, 3, k, s, p, &mut rng);
            let x = random_map(&mut rng, 2, 5, 5);
            let (y, cache) = conv.forward(&x);
            let g = random_map(&mut rng, y.channels, y.height, y.width);
            let dx = conv.backward(&x, &cache, &g, true).unwrap();
            let objective = |conv: &Conv2d, x: &FeatureMap| -> f64 {
                conv.forward(x).0.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            for i in [0, 7, 13, 24, 49] {
                let mut xp = x.clone();
                xp.data[i] += h;
                let mut xm = x.clone();
                xm.data[i] -= h;
                let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * h);
                assert!((fd - dx.data[i]).abs() < 1e-7);
            }
            for i in 0..conv.weight.len() {
                let mut cp = conv.clone();
                cp.weight.value[i] += h;
                let mut cm = conv.clone();
                cm.weight.value[i] -= h;
                let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * h);
                assert!((fd - conv.weight.grad[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::new("l", 4, 3, &mut rng);
        let x = vec![0.3, -0.1, 0.7, 0.2];
        let g = vec![1.0, -2.0, 0.5];
        let dx = lin.backward(&x, &g);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let f = |v: &[f64]| lin.forward(v).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
            assert!(((f(&xp) - f(&xm)) / (2.0 * h) - dx[i]).abs() < 1e-8);
        }
        assert_eq!(lin.bias.grad, g);
    }

    #[test]
    fn pooling() {
        let x = FeatureMap::from_vec(1, 2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(avg_pool(&x, 2).data, vec![3.5, 5.5]);
        assert_eq!(global_avg_pool(&x), vec![4.5]);
        assert_eq!(global_avg_pool_backward(&[8.0], 2, 4).data, vec![1.0; 8]);
    }
}
