//! Forward and backward kernels for the layers the backbones use.
//!
//! Convolutions are lowered to `im2col` + SGEMM one sample at a time; the
//! column buffer is recomputed in the backward pass instead of cached.

use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// `C = A·B + beta·C` with optional transposes; all operands row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f32],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

/// 2-d convolution without bias. `w` is `[out, in, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, k, _) = w.dims4();
    assert_eq!(c, wc, "conv input channels");
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(wd, k, stride, pad);
    let plane = ho * wo;
    let ckk = c * k * k;
    let mut y = Tensor::zeros(&[n, o, ho, wo]);
    let mut col = vec![0.0; if is_pointwise(k, stride, pad) { 0 } else { ckk * plane }];
    for i in 0..n {
        let xi = x.item(i);
        let yi = &mut y.data_mut()[i * o * plane..(i + 1) * o * plane];
        if is_pointwise(k, stride, pad) {
            sgemm(o, ckk, plane, w.data(), false, xi, false, yi, 0.0);
        } else {
            im2col(xi, c, h, wd, k, stride, pad, ho, wo, &mut col);
            sgemm(o, ckk, plane, w.data(), false, &col, false, yi, 0.0);
        }
    }
    y
}

/// Accumulates the weight gradient into `dw` and returns the input gradient
/// when `want_dx` is set.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    dw: &mut [f32],
    want_dx: bool,
) -> Option<Tensor> {
    let (n, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let (_, _, ho, wo) = dy.dims4();
    let plane = ho * wo;
    let ckk = c * k * k;
    let pointwise = is_pointwise(k, stride, pad);
    let mut col = vec![0.0; ckk * plane];
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    for i in 0..n {
        let xi = x.item(i);
        let dyi = dy.item(i);
        let cols: &[f32] = if pointwise {
            xi
        } else {
            im2col(xi, c, h, wd, k, stride, pad, ho, wo, &mut col);
            &col
        };
        sgemm(o, plane, ckk, dyi, false, cols, true, dw, 1.0);
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd];
            if pointwise {
                sgemm(ckk, o, plane, w.data(), true, dyi, false, dxi, 1.0);
            } else {
                sgemm(ckk, o, plane, w.data(), true, dyi, false, &mut col, 0.0);
                col2im(&col, c, h, wd, k, stride, pad, ho, wo, dxi);
            }
        }
    }
    dx
}

pub struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Training-mode batch norm. Updates the running statistics in place.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &mut [f32],
    running_var: &mut [f32],
) -> (Tensor, BnCache) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let m = (n * plane) as f32;
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            sum += x.data()[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = (sum / m as f64) as f32;
        let mut sq = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            sq += x.data()[off..off + plane]
                .iter()
                .map(|&v| ((v - mean) as f64).powi(2))
                .sum::<f64>();
        }
        let var = (sq / m as f64) as f32;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = istd;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                let xh = (x.data()[j] - mean) * istd;
                xhat[j] = xh;
                y.data_mut()[j] = gamma[ch] * xh + beta[ch];
            }
        }
        let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
        running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * mean;
        running_var[ch] = (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * unbiased;
    }
    (y, BnCache { xhat, inv_std })
}

pub fn batch_norm_eval(x: &Tensor, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32]) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut y = x.clone();
    for ch in 0..c {
        let scale = gamma[ch] / (var[ch] + BN_EPS).sqrt();
        let shift = beta[ch] - mean[ch] * scale;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for v in &mut y.data_mut()[off..off + plane] {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

pub fn batch_norm_backward(
    dy: &Tensor,
    cache: &BnCache,
    gamma: &[f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Tensor {
    let (n, c, h, w) = dy.dims4();
    let plane = h * w;
    let m = (n * plane) as f32;
    let mut dx = Tensor::zeros(dy.shape());
    for ch in 0..c {
        let mut sum_dy = 0.0f32;
        let mut sum_dy_xhat = 0.0f32;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                sum_dy += dy.data()[j];
                sum_dy_xhat += dy.data()[j] * cache.xhat[j];
            }
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let k = gamma[ch] * cache.inv_std[ch] / m;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                dx.data_mut()[j] = k * (m * dy.data()[j] - sum_dy - cache.xhat[j] * sum_dy_xhat);
            }
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward(dy: &Tensor, y: &Tensor) -> Tensor {
    let data = dy
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

pub fn add_inplace(a: &mut Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

/// `[n, in] × [out, in]ᵀ + bias`.
pub fn linear(x: &Tensor, w: &Tensor, b: &[f32]) -> Tensor {
    let (n, i) = x.dims2();
    let (o, wi) = w.dims2();
    assert_eq!(i, wi, "linear input features");
    let mut y = Tensor::zeros(&[n, o]);
    for row in y.data_mut().chunks_mut(o) {
        row.copy_from_slice(b);
    }
    sgemm(n, i, o, x.data(), false, w.data(), true, y.data_mut(), 1.0);
    y
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor, dw: &mut [f32], db: &mut [f32]) -> Tensor {
    let (n, i) = x.dims2();
    let (o, _) = w.dims2();
    sgemm(o, n, i, dy.data(), true, x.data(), false, dw, 1.0);
    for row in dy.data().chunks(o) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dx = Tensor::zeros(&[n, i]);
    sgemm(n, o, i, dy.data(), false, w.data(), false, dx.data_mut(), 0.0);
    dx
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f32>() / plane as f32)
        .collect();
    Tensor::from_vec(&[n, c], data).expect("pooled shape")
}

pub fn global_avg_pool_backward(dy: &Tensor, input_shape: &[usize]) -> Tensor {
    let plane: usize = input_shape[2..].iter().product();
    let mut dx = Tensor::zeros(input_shape);
    for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        chunk.fill(g / plane as f32);
    }
    dx
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    for (src, dst) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let (iy, ix) = (2 * oy, 2 * ox);
                dst[oy * wo + ox] = 0.25
                    * (src[iy * w + ix] + src[iy * w + ix + 1] + src[(iy + 1) * w + ix] + src[(iy + 1) * w + ix + 1]);
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &Tensor, input_shape: &[usize]) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(input_shape);
    for (src, dst) in dy.data().chunks(ho * wo).zip(dx.data_mut().chunks_mut(h * w)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = 0.25 * src[oy * wo + ox];
                let (iy, ix) = (2 * oy, 2 * ox);
                dst[iy * w + ix] += g;
                dst[iy * w + ix + 1] += g;
                dst[(iy + 1) * w + ix] += g;
                dst[(iy + 1) * w + ix + 1] += g;
            }
        }
    }
    dx
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial dims");
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data).expect("concat shape")
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(d: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = d.dims4();
    let plane = h * w;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for i in 0..n {
        let item = d.item(i);
        a.extend_from_slice(&item[..first * plane]);
        b.extend_from_slice(&item[first * plane..]);
    }
    (
        Tensor::from_vec(&[n, first, h, w], a).expect("split shape"),
        Tensor::from_vec(&[n, c - first, h, w], b).expect("split shape"),
    )
}

/// Row-wise softmax of a `[n, classes]` slice.
pub fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f32 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
