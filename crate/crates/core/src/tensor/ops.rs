//! Single-threaded reference kernels.

use std::sync::Arc;

use super::{AllocTracker, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f32 = 1e-5;

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Growable workspace whose capacity is reported to the allocation tracker.
#[derive(Default)]
pub struct Scratch {
    buf: Vec<f32>,
    tracker: Option<Arc<AllocTracker>>,
}

impl Scratch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, n: usize) -> &mut [f32] {
        if self.buf.len() < n {
            if self.tracker.is_none() {
                self.tracker = AllocTracker::current();
            }
            if let Some(t) = &self.tracker {
                t.track_alloc((n - self.buf.len()) * 4);
            }
            self.buf.resize(n, 0.0);
        }
        &mut self.buf[..n]
    }

    pub fn capacity(&self) -> usize {
        self.buf.len()
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        if let Some(t) = self.tracker.take() {
            let _ = t.track_free(self.buf.len() * 4);
        }
    }
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2().map_err(|_| shape_err("matmul", a.shape(), b.shape()))?;
    let (k2, n) = b.dims2().map_err(|_| shape_err("matmul", a.shape(), b.shape()))?;
    if k != k2 {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(row, ad[i * k + kk], &bd[kk * n..(kk + 1) * n]);
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `x [n, in]`, `weight [out, in]` -> `x . weight^T + bias`, shape `[n, out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d_in) = x.dims2().map_err(|_| shape_err("linear", x.shape(), weight.shape()))?;
    let (d_out, d_in2) = weight
        .dims2()
        .map_err(|_| shape_err("linear", x.shape(), weight.shape()))?;
    if d_in != d_in2 {
        return Err(shape_err("linear", x.shape(), weight.shape()));
    }
    if let Some(b) = bias {
        if b.len() != d_out {
            return Err(shape_err("linear bias", weight.shape(), b.shape()));
        }
    }
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0f32; n * d_out];
    for i in 0..n {
        let xi = &xd[i * d_in..(i + 1) * d_in];
        for o in 0..d_out {
            let mut v = dot(xi, &wd[o * d_in..(o + 1) * d_in]);
            if let Some(b) = bias {
                v += b.data()[o];
            }
            out[i * d_out + o] = v;
        }
    }
    Ok(Tensor::from_parts(vec![n, d_out], out))
}

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Cross-correlation of `x [c_in, h, w]` with `weight [c_out, c_in, kh, kw]`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv2d_scratch(x, weight, bias, stride, padding, &mut Scratch::new())
}

/// [`conv2d`] with a caller-owned im2col workspace; results are bit-identical.
pub fn conv2d_scratch(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    scratch: &mut Scratch,
) -> Result<Tensor> {
    conv2d_impl(x, weight, bias, stride, padding, scratch, usize::MAX)
}

/// Workspace cap (in floats) for [`conv2d_tiled`].
pub const CONV_TILE_FLOATS: usize = 4096;

/// [`conv2d`] that unfolds only a band of output positions at a time, so the
/// workspace stays near `max_floats` instead of `c_in * kh * kw * oh * ow`.
/// Every output element accumulates in the same order, so results are
/// bit-identical to [`conv2d`].
pub fn conv2d_tiled(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    scratch: &mut Scratch,
    max_floats: usize,
) -> Result<Tensor> {
    conv2d_impl(x, weight, bias, stride, padding, scratch, max_floats)
}

/// Writes the receptive field of output positions `p0..p0 + count` into
/// `cols`, one contiguous `kdim` patch per position.
fn im2col_patches(
    xd: &[f32],
    (c_in, h, w): (usize, usize, usize),
    (kh, kw, stride, padding): (usize, usize, usize, usize),
    ow: usize,
    (p0, count): (usize, usize),
    cols: &mut [f32],
) {
    let kdim = c_in * kh * kw;
    for (i, patch) in cols[..count * kdim].chunks_exact_mut(kdim).enumerate() {
        let (oy, ox) = ((p0 + i) / ow, (p0 + i) % ow);
        let mut k = 0;
        for ic in 0..c_in {
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                let row = (0..h as isize)
                    .contains(&iy)
                    .then(|| &xd[(ic * h + iy as usize) * w..(ic * h + iy as usize + 1) * w]);
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    patch[k] = match row {
                        Some(r) if (0..w as isize).contains(&ix) => r[ix as usize],
                        _ => 0.0,
                    };
                    k += 1;
                }
            }
        }
    }
}

fn conv2d_impl(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    scratch: &mut Scratch,
    max_floats: usize,
) -> Result<Tensor> {
    let (c_in, h, w) = x.dims3().map_err(|_| shape_err("conv2d", x.shape(), weight.shape()))?;
    let (c_out, c_in2, kh, kw) = weight
        .dims4()
        .map_err(|_| shape_err("conv2d", x.shape(), weight.shape()))?;
    if c_in != c_in2 {
        return Err(Error::Shape(format!(
            "conv2d: input has {c_in} channels but weight {:?} expects {c_in2}",
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(shape_err("conv2d bias", weight.shape(), b.shape()));
        }
    }
    let oh = conv_output_size(h, kh, stride, padding)
        .ok_or_else(|| shape_err("conv2d", x.shape(), weight.shape()))?;
    let ow = conv_output_size(w, kw, stride, padding)
        .ok_or_else(|| shape_err("conv2d", x.shape(), weight.shape()))?;
    let plane = oh * ow;
    let kdim = c_in * kh * kw;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0f32; c_out * plane];

    let band = (max_floats / kdim).clamp(1, plane);
    let cols = scratch.get(kdim * band);
    let mut p0 = 0;
    while p0 < plane {
        let count = band.min(plane - p0);
        im2col_patches(xd, (c_in, h, w), (kh, kw, stride, padding), ow, (p0, count), cols);
        for (i, patch) in cols[..count * kdim].chunks_exact(kdim).enumerate() {
            for oc in 0..c_out {
                let mut v = dot(&wd[oc * kdim..(oc + 1) * kdim], patch);
                if let Some(b) = bias {
                    v += b.data()[oc];
                }
                out[oc * plane + p0 + i] = v;
            }
        }
        p0 += count;
    }
    Ok(Tensor::from_parts(vec![c_out, oh, ow], out))
}

pub fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Scaled dot-product attention, `softmax(q k^T / sqrt(d)) v`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, d) = q.dims2().map_err(|_| shape_err("attention", q.shape(), k.shape()))?;
    let (m, dk) = k.dims2().map_err(|_| shape_err("attention", q.shape(), k.shape()))?;
    let (mv, dv) = v.dims2().map_err(|_| shape_err("attention", k.shape(), v.shape()))?;
    if d != dk {
        return Err(shape_err("attention q/k", q.shape(), k.shape()));
    }
    if m != mv || dv != d {
        return Err(shape_err("attention k/v", k.shape(), v.shape()));
    }
    let scale = 1.0 / (d as f32).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0f32; n * d];
    let mut scores = vec![0.0f32; m];
    for i in 0..n {
        let qi = &qd[i * d..(i + 1) * d];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qi, &kd[j * d..(j + 1) * d]) * scale;
        }
        softmax_inplace(&mut scores);
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, &p) in scores.iter().enumerate() {
            axpy(oi, p, &vd[j * d..(j + 1) * d]);
        }
    }
    Ok(Tensor::from_parts(vec![n, d], out))
}

/// Group normalization over `x [c, ...]` with per-channel affine.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let mut out = x.clone();
    group_norm_inplace(&mut out, groups, gamma, beta, eps)?;
    Ok(out)
}

pub fn group_norm_inplace(
    x: &mut Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<()> {
    let c = x.shape()[0];
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "group_norm: {groups} groups do not divide {c} channels"
        )));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err("group_norm affine", x.shape(), gamma.shape()));
    }
    let plane = x.len() / c;
    let per_group = c / groups;
    let (g_data, b_data) = (gamma.data(), beta.data());
    let data = x.data_mut();
    for g in 0..groups {
        let span = &mut data[g * per_group * plane..(g + 1) * per_group * plane];
        let (mean, inv) = moments(span, eps);
        for (ci, chunk) in span.chunks_mut(plane).enumerate() {
            let ch = g * per_group + ci;
            let (ga, be) = (g_data[ch], b_data[ch]);
            for v in chunk {
                *v = ((*v - mean) * inv) * ga + be;
            }
        }
    }
    Ok(())
}

fn moments(xs: &[f32], eps: f32) -> (f32, f32) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, (1.0 / (var + eps as f64).sqrt()) as f32)
}

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = *x.shape().last().expect("tensor has rank >= 1");
    if gamma.len() != d || beta.len() != d {
        return Err(shape_err("layer_norm affine", x.shape(), gamma.shape()));
    }
    let mut out = x.clone();
    let (g, b) = (gamma.data(), beta.data());
    for row in out.data_mut().chunks_mut(d) {
        let (mean, inv) = moments(row, eps);
        for (i, v) in row.iter_mut().enumerate() {
            *v = ((*v - mean) * inv) * g[i] + b[i];
        }
    }
    Ok(out)
}

#[inline]
pub fn silu_scalar(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu_scalar(v: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * v * (1.0 + (C * (v + 0.044_715 * v * v * v)).tanh())
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn silu_inplace(x: &mut Tensor) {
    x.map_inplace(silu_scalar)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_inplace(x: &mut Tensor) {
    x.map_inplace(gelu_scalar)
}

/// Nearest-neighbour upsampling of `x [c, h, w]` by an integer factor.
pub fn resize_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if factor == 0 {
        return Err(Error::InvalidArgument("resize factor must be >= 1".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let src = &xd[(ch * h + oy / factor) * w..(ch * h + oy / factor + 1) * w];
            let dst = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (ox, v) in dst.iter_mut().enumerate() {
                *v = src[ox / factor];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    add_inplace(&mut out, b)?;
    Ok(out)
}

pub fn add_inplace(a: &mut Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a.shape(), b.shape()));
    }
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(())
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("sub", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    a.map(|v| v * s)
}

/// `x [c, h, w] += bias[c]`.
pub fn add_channel_bias_inplace(x: &mut Tensor, bias: &[f32]) -> Result<()> {
    let c = x.shape()[0];
    if bias.len() != c {
        return Err(Error::Shape(format!(
            "channel bias of length {} for tensor {:?}",
            bias.len(),
            x.shape()
        )));
    }
    let plane = x.len() / c;
    for (chunk, &b) in x.data_mut().chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
    Ok(())
}

/// Concatenate `[c1, h, w]` and `[c2, h, w]` along channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[1..] != b.shape()[1..] {
        return Err(shape_err("concat_channels", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    let shape = vec![a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]];
    Ok(Tensor::from_parts(shape, data))
}

pub fn transpose2d(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let xd = x.data();
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// Columns `[start, start + width)` of a rank-2 tensor.
pub fn column_slice(x: &Tensor, start: usize, width: usize) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if start + width > c {
        return Err(Error::Shape(format!(
            "column slice {start}..{} out of range for {:?}",
            start + width,
            x.shape()
        )));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(r * width);
    for i in 0..r {
        out.extend_from_slice(&xd[i * c + start..i * c + start + width]);
    }
    Ok(Tensor::from_parts(vec![r, width], out))
}

/// Writes `src [r, width]` into columns `[start, start + width)` of `dst`.
pub fn write_columns(dst: &mut Tensor, src: &Tensor, start: usize) -> Result<()> {
    let (r, c) = dst.dims2()?;
    let (r2, width) = src.dims2()?;
    if r != r2 || start + width > c {
        return Err(shape_err("write_columns", dst.shape(), src.shape()));
    }
    let sd = src.data();
    let dd = dst.data_mut();
    for i in 0..r {
        dd[i * c + start..i * c + start + width].copy_from_slice(&sd[i * width..(i + 1) * width]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_small() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("dimension"), "{msg}");
    }

    #[test]
    fn conv_identity_kernel_and_bias_only() {
        let mut rng = Rng::new(1);
        let x = rng.gaussian_tensor(&[1, 5, 5]);
        let id = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &id, Some(&Tensor::zeros(&[1])), 1, 0).unwrap(), x);
        let zero = Tensor::zeros(&[2, 1, 3, 3]);
        let b = t(&[2], &[0.5, -1.5]);
        let y = conv2d(&x, &zero, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 5]);
        assert!(y.channel(0).iter().all(|&v| v == 0.5));
        assert!(y.channel(1).iter().all(|&v| v == -1.5));
    }

    #[test]
    fn conv_channel_mismatch() {
        let err = conv2d(&Tensor::zeros(&[3, 4, 4]), &Tensor::zeros(&[2, 2, 3, 3]), None, 1, 1);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn conv_stride_output_size() {
        let y = conv2d(&Tensor::zeros(&[1, 8, 8]), &Tensor::zeros(&[1, 1, 3, 3]), None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
    }

    #[test]
    fn scratch_reuse_is_bit_identical() {
        let mut rng = Rng::new(2);
        let x = rng.gaussian_tensor(&[3, 6, 6]);
        let w = rng.gaussian_tensor(&[4, 3, 3, 3]);
        let mut s = Scratch::new();
        let a = conv2d_scratch(&x, &w, None, 1, 1, &mut s).unwrap();
        let b = conv2d_scratch(&x, &w, None, 1, 1, &mut s).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.bit_eq(&conv2d(&x, &w, None, 1, 1).unwrap()));
    }

    #[test]
    fn attention_single_key_and_zero_query() {
        let mut rng = Rng::new(3);
        let q = rng.gaussian_tensor(&[3, 4]);
        let k = rng.gaussian_tensor(&[1, 4]);
        let v = rng.gaussian_tensor(&[1, 4]);
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v.row(0));
        }
        let q0 = Tensor::zeros(&[2, 4]);
        let k = rng.gaussian_tensor(&[5, 4]);
        let v = rng.gaussian_tensor(&[5, 4]);
        let out = attention(&q0, &k, &v).unwrap();
        for j in 0..4 {
            let mean: f32 = (0..5).map(|r| v.row(r)[j]).sum::<f32>() / 5.0;
            assert!((out.row(0)[j] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn group_norm_constant_is_beta() {
        let x = Tensor::full(&[4, 3, 3], 0.1);
        let gamma = t(&[4], &[2.0, 3.0, 4.0, 5.0]);
        let beta = t(&[4], &[0.25, -0.5, 1.0, 7.0]);
        let y = group_norm(&x, 2, &gamma, &beta, DEFAULT_EPS).unwrap();
        for c in 0..4 {
            assert!(y.channel(c).iter().all(|&v| v == beta.data()[c]));
        }
        assert!(group_norm(&x, 3, &gamma, &beta, DEFAULT_EPS).is_err());
    }

    #[test]
    fn silu_zero_and_resize() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert_eq!(gelu_scalar(0.0), 0.0);
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = resize_nearest(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn column_roundtrip() {
        let x = Tensor::from_fn(&[3, 6], |i| i as f32);
        let s = column_slice(&x, 2, 3).unwrap();
        let mut y = Tensor::zeros(&[3, 6]);
        write_columns(&mut y, &s, 2).unwrap();
        assert_eq!(y.row(1)[2..5], x.row(1)[2..5]);
    }
}
