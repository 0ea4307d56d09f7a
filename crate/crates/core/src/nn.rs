//! Minimal convolutional building blocks with explicit backward passes,
//! double precision throughout. Convolutions run as im2col + GEMM; layers
//! optionally apply per-channel spatial normalization before the activation
//! (batch statistics over one image, so results are deterministic and
//! identical between training and inference).

use ndarray::{s, Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const NORM_EPS: f64 = 1e-5;

/// A convolution with optional normalization and leaky-ReLU activation.
/// When `normalize` is set, `bias` acts as the post-normalization shift and
/// `gamma` as the scale; otherwise `gamma` is unused.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_channels, in_channels, k, k)
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub gamma: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    /// Negative-side slope; `None` means a linear layer.
    pub leaky: Option<f64>,
    pub normalize: bool,
}

struct NormCache {
    xhat: Array3<f64>,
    sigma: Array1<f64>,
}

/// Values cached by a training-mode forward pass, needed for backward.
pub struct ConvCache {
    in_dim: (usize, usize, usize),
    cols: Array2<f64>,
    preact: Array3<f64>,
    norm: Option<NormCache>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        leaky: Option<f64>,
        normalize: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // He-uniform init; same-padding for 3x3, none for 1x1.
        let fan_in = (in_ch * kernel * kernel) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let weight = Array4::from_shape_fn((out_ch, in_ch, kernel, kernel), |_| {
            rng.gen_range(-limit..limit)
        });
        Conv2d {
            weight,
            bias: Array1::zeros(out_ch),
            gamma: Array1::ones(out_ch),
            stride,
            pad: kernel / 2,
            leaky,
            normalize,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn apply_activation(&self, z: &Array3<f64>) -> Array3<f64> {
        match self.leaky {
            Some(slope) => z.mapv(|v| if v > 0.0 { v } else { slope * v }),
            None => z.clone(),
        }
    }

    /// Convolution plus either bias or normalization with scale/shift.
    fn pre_activation(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>, Option<NormCache>) {
        let (in_ch, h, w) = x.dim();
        debug_assert_eq!(in_ch, self.in_channels());
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, self.kernel(), self.stride, self.pad, oh, ow);
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((self.out_channels(), self.in_channels() * self.kernel() * self.kernel()))
            .expect("contiguous weight");
        let y2 = w2.dot(&cols);
        let mut z = y2
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("reshape conv output");
        if self.normalize {
            let n = (oh * ow) as f64;
            let mut sigma = Array1::zeros(self.out_channels());
            let mut xhat = Array3::zeros(z.dim());
            for c in 0..self.out_channels() {
                let plane = z.slice(s![c, .., ..]);
                let mu = plane.sum() / n;
                let var = plane.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                let sd = (var + NORM_EPS).sqrt();
                sigma[c] = sd;
                let mut out = xhat.slice_mut(s![c, .., ..]);
                ndarray::Zip::from(&mut out).and(&plane).for_each(|o, &v| *o = (v - mu) / sd);
            }
            for c in 0..self.out_channels() {
                let g = self.gamma[c];
                let b = self.bias[c];
                ndarray::Zip::from(z.slice_mut(s![c, .., ..]))
                    .and(xhat.slice(s![c, .., ..]))
                    .for_each(|zz, &xh| *zz = g * xh + b);
            }
            (z, cols, Some(NormCache { xhat, sigma }))
        } else {
            for (mut plane, &b) in z.outer_iter_mut().zip(self.bias.iter()) {
                plane += b;
            }
            (z, cols, None)
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (z, _, _) = self.pre_activation(x);
        self.apply_activation(&z)
    }

    pub fn forward_train(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (z, cols, norm) = self.pre_activation(x);
        let out = self.apply_activation(&z);
        (
            out,
            ConvCache { in_dim: x.dim(), cols, preact: z, norm },
        )
    }

    /// Backward through activation, normalization and convolution.
    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// w.r.t. the input.
    pub fn backward(&self, cache: &ConvCache, dout: &Array3<f64>, grad: &mut ConvGrad) -> Array3<f64> {
        let (oc, oh, ow) = dout.dim();
        debug_assert_eq!(oc, self.out_channels());
        let mut dz = dout.clone();
        if let Some(slope) = self.leaky {
            ndarray::Zip::from(&mut dz).and(&cache.preact).for_each(|d, &z| {
                if z <= 0.0 {
                    *d *= slope;
                }
            });
        }

        let dz0 = if let Some(norm) = &cache.norm {
            // dz holds the gradient at gamma*xhat + bias
            let n = (oh * ow) as f64;
            let mut dz0 = Array3::zeros(dz.dim());
            for c in 0..oc {
                let dslice = dz.slice(s![c, .., ..]);
                let xh = norm.xhat.slice(s![c, .., ..]);
                grad.db[c] += dslice.sum();
                let dgamma: f64 = dslice.iter().zip(xh.iter()).map(|(d, x)| d * x).sum();
                grad.dgamma[c] += dgamma;
                let g = self.gamma[c];
                let mean_dxh = dslice.sum() * g / n;
                let mean_dxh_xh = dgamma * g / n;
                let inv_sd = 1.0 / norm.sigma[c];
                ndarray::Zip::from(dz0.slice_mut(s![c, .., ..]))
                    .and(&dslice)
                    .and(&xh)
                    .for_each(|o, &d, &x| {
                        *o = inv_sd * (d * g - mean_dxh - x * mean_dxh_xh);
                    });
            }
            dz0
        } else {
            for (c, plane) in dz.outer_iter().enumerate() {
                grad.db[c] += plane.sum();
            }
            dz
        };

        let dz2 = dz0
            .view()
            .into_shape_with_order((oc, oh * ow))
            .expect("contiguous dz");
        let kk = self.in_channels() * self.kernel() * self.kernel();
        let dw2 = dz2.dot(&cache.cols.t());
        let dw = dw2
            .into_shape_with_order(self.weight.dim())
            .expect("reshape dw");
        grad.dw += &dw;
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((oc, kk))
            .expect("contiguous weight");
        let dcols = w2.t().dot(&dz2);
        col2im(&dcols, cache.in_dim, self.kernel(), self.stride, self.pad, oh, ow)
    }

    pub fn zero_grad_like(&self) -> ConvGrad {
        ConvGrad {
            dw: Array4::zeros(self.weight.dim()),
            db: Array1::zeros(self.bias.len()),
            dgamma: Array1::zeros(self.gamma.len()),
        }
    }
}

/// Gradient buffers matching one [`Conv2d`].
#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub dw: Array4<f64>,
    pub db: Array1<f64>,
    pub dgamma: Array1<f64>,
}

impl ConvGrad {
    pub fn accumulate(&mut self, other: &ConvGrad) {
        self.dw += &other.dw;
        self.db += &other.db;
        self.dgamma += &other.dgamma;
    }

    pub fn scale(&mut self, factor: f64) {
        self.dw *= factor;
        self.db *= factor;
        self.dgamma *= factor;
    }

    pub fn sq_norm(&self) -> f64 {
        self.dw.iter().map(|v| v * v).sum::<f64>()
            + self.db.iter().map(|v| v * v).sum::<f64>()
            + self.dgamma.iter().map(|v| v * v).sum::<f64>()
    }
}

fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (in_ch, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((in_ch * k * k, oh * ow));
    for c in 0..in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let mut out_row = cols.slice_mut(s![row, ..]);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * ow + ox] = x[(c, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    in_dim: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let (in_ch, h, w) = in_dim;
    let mut dx = Array3::<f64>::zeros(in_dim);
    for c in 0..in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = dcols.slice(s![row, ..]);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(c, iy as usize, ix as usize)] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    dx
}

/// Whole-tensor standardization: zero mean, unit variance over all elements.
/// Channel-to-channel contrasts (the modulation pattern) survive; the global
/// scale does not, which keeps the prediction head's input well-conditioned
/// regardless of the embedding magnitude.
pub struct FeatureNormCache {
    y: Array3<f64>,
    sigma: f64,
}

pub fn feature_norm(x: &Array3<f64>) -> (Array3<f64>, FeatureNormCache) {
    let n = x.len() as f64;
    let mu = x.sum() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let sigma = (var + NORM_EPS).sqrt();
    let y = x.mapv(|v| (v - mu) / sigma);
    (y.clone(), FeatureNormCache { y, sigma })
}

pub fn feature_norm_backward(cache: &FeatureNormCache, dy: &Array3<f64>) -> Array3<f64> {
    let n = dy.len() as f64;
    let mean_dy = dy.sum() / n;
    let mean_dy_y: f64 = dy.iter().zip(cache.y.iter()).map(|(d, y)| d * y).sum::<f64>() / n;
    let mut dx = Array3::zeros(dy.dim());
    ndarray::Zip::from(&mut dx)
        .and(dy)
        .and(&cache.y)
        .for_each(|o, &d, &y| *o = (d - mean_dy - y * mean_dy_y) / cache.sigma);
    dx
}

/// Global max pooling over the spatial axes, with the argmax positions kept
/// for backward. Ties route the gradient to the first (row-major) maximum.
pub fn global_max_pool(x: &Array3<f64>) -> (Array1<f64>, Vec<(usize, usize)>) {
    masked_max_pool(x, None)
}

/// Max pooling restricted to the cells where `cover` is true; `None` (or an
/// all-false cover) pools over every cell.
pub fn masked_max_pool(
    x: &Array3<f64>,
    cover: Option<&ndarray::Array2<bool>>,
) -> (Array1<f64>, Vec<(usize, usize)>) {
    let (c, h, w) = x.dim();
    let use_cover = cover.map(|m| m.iter().any(|&v| v)).unwrap_or(false);
    let mut out = Array1::zeros(c);
    let mut argmax = vec![(0usize, 0usize); c];
    for ci in 0..c {
        let mut best = f64::NEG_INFINITY;
        for y in 0..h {
            for xx in 0..w {
                if use_cover && !cover.unwrap()[(y, xx)] {
                    continue;
                }
                let v = x[(ci, y, xx)];
                if v > best {
                    best = v;
                    argmax[ci] = (y, xx);
                }
            }
        }
        out[ci] = best;
    }
    (out, argmax)
}

pub fn global_max_pool_backward(
    dvec: &Array1<f64>,
    argmax: &[(usize, usize)],
    in_dim: (usize, usize, usize),
) -> Array3<f64> {
    let mut dx = Array3::zeros(in_dim);
    for (c, &(y, x)) in argmax.iter().enumerate() {
        dx[(c, y, x)] = dvec[c];
    }
    dx
}

/// SGD with momentum, L2 weight decay and optional global-norm gradient
/// clipping, operating over an ordered list of conv layers.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    velocity: Vec<ConvGrad>,
}

impl Sgd {
    pub fn new(layers: &[&Conv2d], momentum: f64, weight_decay: f64, grad_clip: Option<f64>) -> Self {
        Sgd {
            momentum,
            weight_decay,
            grad_clip,
            velocity: layers.iter().map(|l| l.zero_grad_like()).collect(),
        }
    }

    /// One update step. `layers` must be the same layers, in the same order,
    /// used at construction. Weight decay applies to conv weights only.
    pub fn step(&mut self, layers: Vec<&mut Conv2d>, grads: &mut [ConvGrad], lr: f64) {
        assert_eq!(layers.len(), self.velocity.len());
        assert_eq!(grads.len(), self.velocity.len());
        if let Some(max_norm) = self.grad_clip {
            let total: f64 = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
            if total > max_norm {
                let scale = max_norm / total;
                for g in grads.iter_mut() {
                    g.scale(scale);
                }
            }
        }
        for ((layer, grad), vel) in layers.into_iter().zip(grads.iter()).zip(self.velocity.iter_mut()) {
            ndarray::Zip::from(&mut vel.dw)
                .and(&grad.dw)
                .and(&layer.weight)
                .for_each(|v, &g, &w| *v = self.momentum * *v + g + self.weight_decay * w);
            ndarray::Zip::from(&mut vel.db)
                .and(&grad.db)
                .for_each(|v, &g| *v = self.momentum * *v + g);
            ndarray::Zip::from(&mut vel.dgamma)
                .and(&grad.dgamma)
                .for_each(|v, &g| *v = self.momentum * *v + g);
            ndarray::Zip::from(&mut layer.weight)
                .and(&vel.dw)
                .for_each(|w, &v| *w -= lr * v);
            ndarray::Zip::from(&mut layer.bias)
                .and(&vel.db)
                .for_each(|b, &v| *b -= lr * v);
            ndarray::Zip::from(&mut layer.gamma)
                .and(&vel.dgamma)
                .for_each(|g, &v| *g -= lr * v);
        }
    }
}
