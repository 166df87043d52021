//! Primitive neural operations on [`FeatureMap`] and [`Matrix`].
//!
//! Every function here is pure. The autodiff graph in [`crate::graph`] calls
//! the same forward kernels and pairs each with the backward kernel defined
//! alongside it, so the values seen by the tape and by direct callers are
//! bit-identical.

use crate::error::{Error, Result};
use crate::fault;
use crate::tensor::{FeatureMap, Matrix};

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at `x`, given `y = apply(x)`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax direction for [`softmax`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to one.
    Rows,
    /// Each column sums to one.
    Cols,
}

// ---------------------------------------------------------------------------
// 1x1 convolution

pub(crate) fn conv1x1_kernel(
    x: &[f64],
    d_in: usize,
    hw: usize,
    w: &[f64],
    d_out: usize,
    b: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; d_out * hw];
    for d in 0..d_out {
        let row = &mut out[d * hw..(d + 1) * hw];
        if let Some(b) = b {
            row.iter_mut().for_each(|v| *v = b[d]);
        }
        for c in 0..d_in {
            let wv = w[d * d_in + c];
            if wv == 0.0 {
                continue;
            }
            let xs = &x[c * hw..(c + 1) * hw];
            for (o, xv) in row.iter_mut().zip(xs) {
                *o += wv * xv;
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv1x1_backward(
    g: &[f64],
    x: &[f64],
    d_in: usize,
    hw: usize,
    w: &[f64],
    d_out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; d_in * hw];
    let mut dw = vec![0.0; d_out * d_in];
    let mut db = vec![0.0; d_out];
    for d in 0..d_out {
        let gs = &g[d * hw..(d + 1) * hw];
        db[d] = gs.iter().sum();
        for c in 0..d_in {
            let xs = &x[c * hw..(c + 1) * hw];
            dw[d * d_in + c] = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
            let wv = w[d * d_in + c];
            for (dxv, gv) in dx[c * hw..(c + 1) * hw].iter_mut().zip(gs) {
                *dxv += wv * gv;
            }
        }
    }
    (dx, dw, db)
}

/// Pointwise convolution: `out[d,i,j] = Σ_c w[d,c]·x[c,i,j] + b[d]`.
pub fn conv1x1(x: &FeatureMap, w: &Matrix, b: &[f64]) -> Result<FeatureMap> {
    let (d_in, h, wd) = x.shape();
    if w.cols() != d_in || b.len() != w.rows() {
        return Err(Error::shape(
            "conv1x1",
            format!("x{:?}", x.shape()),
            format!("w{:?} b[{}]", w.shape(), b.len()),
        ));
    }
    let out = conv1x1_kernel(x.data(), d_in, h * wd, w.data(), w.rows(), Some(b));
    FeatureMap::new(w.rows(), h, wd, out)
}

// ---------------------------------------------------------------------------
// Depthwise convolution

/// Geometry of a strided depthwise convolution with `⌊k/2⌋` zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthwiseGeom {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl DepthwiseGeom {
    pub fn new(d: usize, h: usize, w: usize, k: usize, stride: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::pre("depthwise_conv", format!("kernel side {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::pre("depthwise_conv", "stride must be >= 1"));
        }
        if !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
            return Err(Error::pre(
                "depthwise_conv",
                format!("map {h}x{w} not divisible by stride {stride}"),
            ));
        }
        Ok(Self { d, h, w, k, stride })
    }

    pub fn out_h(&self) -> usize {
        self.h / self.stride
    }

    pub fn out_w(&self) -> usize {
        self.w / self.stride
    }

    /// Visits every (output index, input index, kernel index) triple that
    /// lands inside the map.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let half = (self.k / 2) as isize;
        let kk = self.k * self.k;
        for c in 0..self.d {
            for oi in 0..oh {
                for oj in 0..ow {
                    let o = (c * oh + oi) * ow + oj;
                    let ci = (oi * self.stride) as isize;
                    let cj = (oj * self.stride) as isize;
                    for a in 0..self.k {
                        let ii = ci + a as isize - half;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for b in 0..self.k {
                            let jj = cj + b as isize - half;
                            if jj < 0 || jj >= self.w as isize {
                                continue;
                            }
                            let x = (c * self.h + ii as usize) * self.w + jj as usize;
                            f(o, x, c * kk + a * self.k + b);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_kernel(geom: &DepthwiseGeom, x: &[f64], kernels: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut out = vec![0.0; geom.d * oh * ow];
    if let Some(b) = bias {
        for c in 0..geom.d {
            out[c * oh * ow..(c + 1) * oh * ow].iter_mut().for_each(|v| *v = b[c]);
        }
    }
    geom.for_each_tap(|o, xi, ki| out[o] += kernels[ki] * x[xi]);
    out
}

/// Returns `(dx, dkernels, dbias)`.
pub(crate) fn depthwise_backward(
    geom: &DepthwiseGeom,
    g: &[f64],
    x: &[f64],
    kernels: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernels.len()];
    geom.for_each_tap(|o, xi, ki| {
        dx[xi] += kernels[ki] * g[o];
        dk[ki] += x[xi] * g[o];
    });
    let per = geom.out_h() * geom.out_w();
    let db = (0..geom.d).map(|c| g[c * per..(c + 1) * per].iter().sum()).collect();
    (dx, dk, db)
}

/// Per-channel `k×k` convolution with stride `stride` and zero padding of
/// `⌊k/2⌋`. `kernels` is `[D, k·k]`, each row a row-major kernel.
pub fn depthwise_conv(x: &FeatureMap, kernels: &Matrix, bias: &[f64], k: usize, stride: usize) -> Result<FeatureMap> {
    let (d, h, w) = x.shape();
    let geom = DepthwiseGeom::new(d, h, w, k, stride)?;
    if kernels.shape() != (d, k * k) || bias.len() != d {
        return Err(Error::shape(
            "depthwise_conv",
            format!("x{:?} k={k}", x.shape()),
            format!("kernels{:?} bias[{}]", kernels.shape(), bias.len()),
        ));
    }
    let out = depthwise_kernel(&geom, x.data(), kernels.data(), Some(bias));
    FeatureMap::new(d, geom.out_h(), geom.out_w(), out)
}

// ---------------------------------------------------------------------------
// LayerNorm over channels

/// Normalized values and per-location inverse standard deviations.
pub(crate) fn layer_norm_kernel(
    x: &[f64],
    d: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; d * hw];
    let mut xhat = vec![0.0; d * hw];
    let mut inv_std = vec![0.0; hw];
    for p in 0..hw {
        let mean = (0..d).map(|c| x[c * hw + p]).sum::<f64>() / d as f64;
        let var = (0..d).map(|c| (x[c * hw + p] - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[p] = is;
        for c in 0..d {
            let n = (x[c * hw + p] - mean) * is;
            xhat[c * hw + p] = n;
            out[c * hw + p] = gamma[c] * n + beta[c];
        }
    }
    (out, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    g: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    d: usize,
    hw: usize,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; d * hw];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let n = d as f64;
    for p in 0..hw {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            let i = c * hw + p;
            dgamma[c] += g[i] * xhat[i];
            dbeta[c] += g[i];
            let dxh = g[i] * gamma[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[i];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        for c in 0..d {
            let i = c * hw + p;
            let dxh = g[i] * gamma[c];
            dx[i] = inv_std[p] * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Channel-wise LayerNorm at every spatial location, then `γ·x̂ + β`.
pub fn layer_norm(x: &FeatureMap, gamma: &[f64], beta: &[f64], eps: f64) -> Result<FeatureMap> {
    let (d, h, w) = x.shape();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), (gamma.len(), beta.len())));
    }
    let (out, _, _) = layer_norm_kernel(x.data(), d, h * w, gamma, beta, eps);
    FeatureMap::new(d, h, w, out)
}

pub fn activation(x: &FeatureMap, kind: Activation) -> FeatureMap {
    let (d, h, w) = x.shape();
    let data = x.data().iter().map(|&v| kind.apply(v)).collect();
    FeatureMap::new(d, h, w, data).expect("same shape")
}

pub fn activation_matrix(x: &Matrix, kind: Activation) -> Matrix {
    let data = x.data().iter().map(|&v| kind.apply(v)).collect();
    Matrix::new(x.rows(), x.cols(), data).expect("same shape")
}

// ---------------------------------------------------------------------------
// Softmax

pub(crate) fn softmax_rows_kernel(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - max).exp();
            sum += *o;
        }
        dst.iter_mut().for_each(|o| *o /= sum);
    }
    if fault::softmax_corrupted() {
        out.iter_mut().for_each(|v| *v *= 1.5);
    }
    out
}

pub(crate) fn softmax_rows_backward(g: &[f64], y: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
        for i in span {
            dx[i] = y[i] * (g[i] - dot);
        }
    }
    dx
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Matrix, axis: Axis) -> Matrix {
    match axis {
        Axis::Rows => {
            Matrix::new(x.rows(), x.cols(), softmax_rows_kernel(x.data(), x.rows(), x.cols())).expect("same shape")
        }
        Axis::Cols => softmax(&x.transpose(), Axis::Rows).transpose(),
    }
}

// ---------------------------------------------------------------------------
// Bilinear sampling

/// Distance below which a pixel coordinate is snapped to the integer grid, so
/// that normalized grid coordinates gather exactly despite rounding in the
/// normalization round trip.
const GRID_SNAP: f64 = 1e-12;

/// Maps a normalized coordinate in `[-1, 1]` to pixel-index space using the
/// align-corners convention (`-1 → 0`, `+1 → size-1`).
#[inline]
pub fn denormalize(v: f64, size: usize) -> f64 {
    (v + 1.0) * 0.5 * (size as f64 - 1.0)
}

/// Inverse of [`denormalize`]; a size-1 axis maps to 0.
#[inline]
pub fn normalize(p: f64, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        2.0 * p / (size as f64 - 1.0) - 1.0
    }
}

#[inline]
fn snap(p: f64) -> f64 {
    let r = p.round();
    if (p - r).abs() < GRID_SNAP {
        r
    } else {
        p
    }
}

/// Four taps `(flat pixel index or None when outside, weight)` plus the
/// fractional parts used by the coordinate gradient.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTaps {
    pub x0: isize,
    pub y0: isize,
    pub fx: f64,
    pub fy: f64,
}

impl BilinearTaps {
    #[inline]
    pub fn at_pixel(px: f64, py: f64) -> Self {
        let (px, py) = (snap(px), snap(py));
        let x0 = px.floor();
        let y0 = py.floor();
        Self {
            x0: x0 as isize,
            y0: y0 as isize,
            fx: px - x0,
            fy: py - y0,
        }
    }

    /// `(pixel offset within a channel, weight)` for each in-bounds corner.
    #[inline]
    pub fn corners(&self, h: usize, w: usize) -> [(Option<usize>, f64); 4] {
        let idx = |y: isize, x: isize| {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                Some(y as usize * w + x as usize)
            } else {
                None
            }
        };
        [
            (idx(self.y0, self.x0), (1.0 - self.fx) * (1.0 - self.fy)),
            (idx(self.y0, self.x0 + 1), self.fx * (1.0 - self.fy)),
            (idx(self.y0 + 1, self.x0), (1.0 - self.fx) * self.fy),
            (idx(self.y0 + 1, self.x0 + 1), self.fx * self.fy),
        ]
    }
}

/// Samples `x` at pixel-space points `(px[n], py[n])`; result is `[D, N]`.
pub(crate) fn bilinear_px_kernel(x: &[f64], d: usize, h: usize, w: usize, px: &[f64], py: &[f64]) -> Vec<f64> {
    let n = px.len();
    let hw = h * w;
    let mut out = vec![0.0; d * n];
    for s in 0..n {
        let taps = BilinearTaps::at_pixel(px[s], py[s]);
        for (idx, wt) in taps.corners(h, w) {
            if let Some(p) = idx {
                if wt == 0.0 {
                    continue;
                }
                for c in 0..d {
                    out[c * n + s] += wt * x[c * hw + p];
                }
            }
        }
    }
    out
}

/// Returns `(dx, dpx, dpy)` for [`bilinear_px_kernel`].
pub(crate) fn bilinear_px_backward(
    g: &[f64],
    x: &[f64],
    d: usize,
    h: usize,
    w: usize,
    px: &[f64],
    py: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = px.len();
    let hw = h * w;
    let mut dx = vec![0.0; d * hw];
    let mut dpx = vec![0.0; n];
    let mut dpy = vec![0.0; n];
    for s in 0..n {
        let taps = BilinearTaps::at_pixel(px[s], py[s]);
        let [c00, c01, c10, c11] = taps.corners(h, w);
        let val = |idx: Option<usize>, c: usize| idx.map_or(0.0, |p| x[c * hw + p]);
        for c in 0..d {
            let gs = g[c * n + s];
            if gs == 0.0 {
                continue;
            }
            for (idx, wt) in [c00, c01, c10, c11] {
                if let Some(p) = idx {
                    dx[c * hw + p] += wt * gs;
                }
            }
            let (v00, v01, v10, v11) = (val(c00.0, c), val(c01.0, c), val(c10.0, c), val(c11.0, c));
            dpx[s] += gs * ((1.0 - taps.fy) * (v01 - v00) + taps.fy * (v11 - v10));
            dpy[s] += gs * ((1.0 - taps.fx) * (v10 - v00) + taps.fx * (v11 - v01));
        }
    }
    (dx, dpx, dpy)
}

/// Bilinear sampling at normalized coordinates. `coords` is `[2, N]` with row 0
/// holding x (column axis) and row 1 holding y (row axis). Points outside the
/// map blend in zeros. Returns `[D, N]`.
pub fn bilinear_sample(x: &FeatureMap, coords: &Matrix) -> Result<Matrix> {
    if coords.rows() != 2 {
        return Err(Error::shape("bilinear_sample", x.shape(), coords.shape()));
    }
    let (d, h, w) = x.shape();
    let n = coords.cols();
    let px: Vec<f64> = coords.row(0).iter().map(|&v| denormalize(v, w)).collect();
    let py: Vec<f64> = coords.row(1).iter().map(|&v| denormalize(v, h)).collect();
    Matrix::new(d, n, bilinear_px_kernel(x.data(), d, h, w, &px, &py))
}

/// Bilinear sampling at pixel-index coordinates (`(0,0)` is the centre of the
/// top-left pixel). Returns `[D, N]`.
pub fn bilinear_sample_px(x: &FeatureMap, px: &[f64], py: &[f64]) -> Result<Matrix> {
    if px.len() != py.len() {
        return Err(Error::shape("bilinear_sample_px", px.len(), py.len()));
    }
    let (d, h, w) = x.shape();
    Matrix::new(d, px.len(), bilinear_px_kernel(x.data(), d, h, w, px, py))
}

// ---------------------------------------------------------------------------
// Matrix products

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_kernel(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Matrix::new(
        a.rows(),
        b.cols(),
        matmul_kernel(a.data(), b.data(), a.rows(), a.cols(), b.cols()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(d, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv1x1_identity_and_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_map(&mut rng, 3, 2, 5);
        let y = conv1x1(&x, &Matrix::identity(3), &[0.0; 3]).unwrap();
        assert_eq!(y, x);

        let ones = FeatureMap::filled(2, 1, 1, 1.0);
        let w = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let y = conv1x1(&ones, &w, &[0.5]).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn conv1x1_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_map(&mut rng, 3, 4, 4);
        let w = rand_matrix(&mut rng, 5, 3);
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv1x1(&x, &w, &b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for d in 0..5 {
                    let mut acc = b[d];
                    for c in 0..3 {
                        acc += w.at(d, c) * x.at(c, i, j);
                    }
                    assert!((y.at(d, i, j) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv1x1_shape_error_names_both_shapes() {
        let x = FeatureMap::zeros(3, 2, 2);
        let err = conv1x1(&x, &Matrix::zeros(2, 4), &[0.0; 2]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(3, 2, 2)") && msg.contains("(2, 4)"), "{msg}");
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_map(&mut rng, 2, 3, 5);
        let k = Matrix::from_fn(2, 1, |_, _| 1.0);
        assert_eq!(depthwise_conv(&x, &k, &[0.0; 2], 1, 1).unwrap(), x);
    }

    #[test]
    fn depthwise_counts_covered_cells() {
        let x = FeatureMap::filled(1, 4, 4, 1.0);
        let k = Matrix::from_fn(1, 9, |_, _| 1.0);
        let y = depthwise_conv(&x, &k, &[0.0], 3, 2).unwrap();
        assert_eq!(y.shape(), (1, 2, 2));
        assert_eq!(y.at(0, 0, 0), 4.0);
        assert_eq!(y.at(0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 1), 6.0);
    }

    #[test]
    fn depthwise_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_map(&mut rng, 2, 6, 6);
        let k = rand_matrix(&mut rng, 2, 9);
        let y = depthwise_conv(&x, &k, &[0.1, -0.2], 3, 2).unwrap();
        let padded = |c: usize, i: isize, j: isize| {
            if i < 0 || j < 0 || i >= 6 || j >= 6 {
                0.0
            } else {
                x.at(c, i as usize, j as usize)
            }
        };
        for c in 0..2 {
            for oi in 0..3 {
                for oj in 0..3 {
                    let mut acc = [0.1, -0.2][c];
                    for a in 0..3 {
                        for b in 0..3 {
                            acc += k.at(c, a * 3 + b) * padded(c, (2 * oi + a) as isize - 1, (2 * oj + b) as isize - 1);
                        }
                    }
                    assert!((y.at(c, oi, oj) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_rejects_ragged_and_even() {
        let x = FeatureMap::zeros(1, 5, 4);
        let k = Matrix::zeros(1, 9);
        assert!(matches!(
            depthwise_conv(&x, &k, &[0.0], 3, 2),
            Err(Error::Precondition { .. })
        ));
        let k = Matrix::zeros(1, 4);
        assert!(depthwise_conv(&FeatureMap::zeros(1, 4, 4), &k, &[0.0], 2, 1).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let x = FeatureMap::filled(3, 2, 2, 4.2);
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = FeatureMap::new(2, 1, 1, vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-14).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_map(&mut rng, 4, 2, 2);
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-12).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let v = y.pixel(i, j);
                let mean = v.iter().sum::<f64>() / 4.0;
                let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn activations_basic() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
    }

    /// Maclaurin series of erf, summed until terms vanish; independent of libm.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-20 {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_matches_series_oracle() {
        for x in [-2.0, 0.0, 1.0] {
            let oracle = 0.5 * x * (1.0 + erf_series(x / 2f64.sqrt()));
            assert!((Activation::Gelu.apply(x) - oracle).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn softmax_cases() {
        let u = Matrix::from_rows(&[vec![3.0; 4]]).unwrap();
        assert!(softmax(&u, Axis::Rows).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let s = softmax(&Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap(), Axis::Rows);
        assert_eq!(s.at(0, 0), 1.0);
        assert!(s.at(0, 1) < 1e-300 && s.is_finite());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_matrix(&mut rng, 6, 5);
        let c = rng.random_range(-50.0..50.0);
        let shifted = Matrix::from_fn(6, 5, |r, k| x.at(r, k) + c);
        assert!(softmax(&x, Axis::Rows).max_abs_diff(&softmax(&shifted, Axis::Rows)) < 1e-12);

        let cols = softmax(&x, Axis::Cols);
        for k in 0..5 {
            let s: f64 = (0..6).map(|r| cols.at(r, k)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_cases() {
        let x = FeatureMap::from_fn(2, 3, 4, |c, i, j| (c * 12 + i * 4 + j) as f64);
        // grid point (col 2, row 1)
        let coords = Matrix::new(2, 1, vec![normalize(2.0, 4), normalize(1.0, 3)]).unwrap();
        let s = bilinear_sample(&x, &coords).unwrap();
        assert_eq!(s.data(), &[x.at(0, 1, 2), x.at(1, 1, 2)]);

        let coords = Matrix::new(2, 1, vec![normalize(0.5, 4), normalize(2.0, 3)]).unwrap();
        let s = bilinear_sample(&x, &coords).unwrap();
        assert!((s.at(0, 0) - 0.5 * (x.at(0, 2, 0) + x.at(0, 2, 1))).abs() < 1e-12);

        let s = bilinear_sample(&x, &Matrix::new(2, 1, vec![-3.0, -3.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    #[test]
    fn bilinear_border_blends_with_zero() {
        let x = FeatureMap::filled(1, 2, 2, 1.0);
        // half a pixel left of column 0
        let s = bilinear_sample_px(&x, &[-0.5], &[0.0]).unwrap();
        assert!((s.at(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matmul_cases() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &Matrix::identity(2)).unwrap(), a);
        let one = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &one).unwrap().data(), &[3.0, 7.0]);
        assert!(matmul(&a, &Matrix::zeros(3, 1)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_matrix(&mut rng, 5, 7);
        let b = rand_matrix(&mut rng, 7, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.at(i, k) * b.at(k, j);
                }
                assert!((c.at(i, j) - acc).abs() < 1e-12);
            }
        }
    }
}
