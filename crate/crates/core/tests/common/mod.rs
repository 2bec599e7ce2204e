//! Naive reference implementations used as test oracles. Written for clarity,
//! independently of the library kernels.
#![allow(dead_code)]

use diffserve_core::preprocess::GrayImage;
use diffserve_core::Tensor;

pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0f64;
            for p in 0..k {
                s += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
            out[i * n + j] = s as f32;
        }
    }
    out
}

/// Direct-summation cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&[f32]>, stride: usize, pad: usize) -> Vec<f32> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = bias.map_or(0.0, |b| b[o] as f64);
                for c in 0..ci {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (xx * stride + j) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = xd[(c * h + iy as usize) * wd + ix as usize] as f64;
                            let wv = wdat[((o * ci + c) * kh + i) * kw + j] as f64;
                            s += xv * wv;
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = s as f32;
            }
        }
    }
    out
}

pub fn attention(q: &[f32], k: &[f32], v: &[f32], n: usize, m: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let scores: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|p| q[i * d + p] as f64 * k[j * d + p] as f64).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for p in 0..d {
            out[i * d + p] = (0..m).map(|j| e[j] / z * v[j * d + p] as f64).sum::<f64>() as f32;
        }
    }
    out
}

pub fn group_norm(x: &[f32], c: usize, groups: usize, gamma: &[f32], beta: &[f32], eps: f64) -> Vec<f32> {
    let plane = x.len() / c;
    let per = c / groups;
    let mut out = vec![0.0; x.len()];
    for g in 0..groups {
        let lo = g * per * plane;
        let hi = (g + 1) * per * plane;
        let n = (hi - lo) as f64;
        let mean = x[lo..hi].iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x[lo..hi].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        for i in lo..hi {
            let ch = i / plane;
            out[i] = (((x[i] as f64 - mean) / (var + eps).sqrt()) * gamma[ch] as f64 + beta[ch] as f64) as f32;
        }
    }
    out
}

pub fn layer_norm(x: &[f32], d: usize, gamma: &[f32], beta: &[f32], eps: f64) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / d {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        for i in 0..d {
            out[r * d + i] = (((row[i] as f64 - mean) / (var + eps).sqrt()) * gamma[i] as f64 + beta[i] as f64) as f32;
        }
    }
    out
}

/// Running product of `1 - beta_t` for a linear beta ramp.
pub fn alpha_bars_linear(t_max: usize, b0: f64, b1: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for t in 0..t_max {
        let beta = b0 + (b1 - b0) * t as f64 / (t_max - 1) as f64;
        acc *= 1.0 - beta;
        out.push(acc);
    }
    out
}

fn mirror(mut i: isize, n: isize) -> usize {
    // Reflect repeatedly until inside [0, n).
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Straightforward canny: 2-D gaussian kernel, explicit Sobel masks, sector
/// lookup, fixed-point hysteresis sweeps.
pub fn canny(img: &GrayImage, low: f64, high: f64, sigma: f64) -> Vec<f32> {
    let (h, w) = (img.height as isize, img.width as isize);
    let px = |y: isize, x: isize| img.data[(y * w + x) as usize] as f64;
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel = vec![vec![0.0f64; (2 * r + 1) as usize]; (2 * r + 1) as usize];
    let mut ksum = 0.0;
    for i in -r..=r {
        for j in -r..=r {
            let g = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() * (-((j * j) as f64) / (2.0 * sigma * sigma)).exp();
            kernel[(i + r) as usize][(j + r) as usize] = g;
            ksum += g;
        }
    }
    let mut blur = vec![0.0f64; (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for i in -r..=r {
                for j in -r..=r {
                    s += kernel[(i + r) as usize][(j + r) as usize] / ksum
                        * px(mirror(y + i, h) as isize, mirror(x + j, w) as isize);
                }
            }
            blur[(y * w + x) as usize] = s;
        }
    }
    let b = |y: isize, x: isize| blur[(mirror(y, h) as isize * w + mirror(x, w) as isize) as usize];
    let sx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let sy = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let n = (h * w) as usize;
    let (mut gx, mut gy, mut mag) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..h {
        for x in 0..w {
            let (mut a, mut c) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let v = b(y + i as isize - 1, x + j as isize - 1);
                    a += sx[i][j] * v;
                    c += sy[i][j] * v;
                }
            }
            let k = (y * w + x) as usize;
            gx[k] = a;
            gy[k] = c;
            mag[k] = (a * a + c * c).sqrt();
        }
    }
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    let mut edges = vec![0.0f32; n];
    if peak == 0.0 {
        return edges;
    }
    for m in mag.iter_mut() {
        *m /= peak;
    }
    // (lower-index neighbour, other neighbour) per sector.
    let table: [((isize, isize), (isize, isize)); 4] = [
        ((0, -1), (0, 1)),
        ((-1, -1), (1, 1)),
        ((-1, 0), (1, 0)),
        ((-1, 1), (1, -1)),
    ];
    let mut nms = vec![0.0f64; n];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let k = (y * w + x) as usize;
            if mag[k] == 0.0 {
                continue;
            }
            let deg = gy[k].atan2(gx[k]).to_degrees().rem_euclid(180.0);
            let sector = if deg < 22.5 || deg >= 157.5 {
                0
            } else if deg < 67.5 {
                1
            } else if deg < 112.5 {
                2
            } else {
                3
            };
            let ((ay, ax), (by, bx)) = table[sector];
            let a = mag[((y + ay) * w + x + ax) as usize];
            let c = mag[((y + by) * w + x + bx) as usize];
            if a < mag[k] - 1e-6 && c <= mag[k] + 1e-6 {
                nms[k] = mag[k];
            }
        }
    }
    for k in 0..n {
        if nms[k] >= high {
            edges[k] = 1.0;
        }
    }
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let k = (y * w + x) as usize;
                if edges[k] == 1.0 || nms[k] < low {
                    continue;
                }
                let touches = (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (yy, xx) = (y + dy, x + dx);
                        yy >= 0 && xx >= 0 && yy < h && xx < w && edges[(yy * w + xx) as usize] == 1.0
                    })
                });
                if touches {
                    edges[k] = 1.0;
                    changed = true;
                }
            }
        }
        if !changed {
            return edges;
        }
    }
}

/// 16x16 vertical step: left half 0, right half 1.
pub fn step_fixture() -> GrayImage {
    GrayImage::from_fn(16, 16, |_, c| if c >= 8 { 1.0 } else { 0.0 }).unwrap()
}

pub fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
