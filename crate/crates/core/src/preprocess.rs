//! Condition-image extraction: canny edges and a blurred-luminance depth proxy.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LOW_THRESHOLD: f32 = 0.1;
pub const DEFAULT_HIGH_THRESHOLD: f32 = 0.3;
pub const DEFAULT_SIGMA: f32 = 1.0;
pub const DEPTH_SIGMA: f64 = 2.0;

/// Neighbour magnitudes closer than this count as equal during suppression.
pub const NMS_TIE_EPS: f64 = 1e-6;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("gray values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, data)
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    /// `[1, H, W]` tensor, the ControlNet condition layout.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.data.clone()).expect("validated dims")
    }

    /// Gray replicated into three channels mapped to `[-1, 1]`.
    pub fn to_rgb_tensor(&self) -> Tensor {
        let plane = self.data.len();
        Tensor::from_fn(&[3, self.height, self.width], |i| self.data[i % plane] * 2.0 - 1.0)
    }

    pub fn rotate90_cw(&self) -> GrayImage {
        let (h, w) = (self.height, self.width);
        let data = (0..h * w)
            .map(|i| {
                let (r, c) = (i / h, i % h);
                self.get(h - 1 - c, r)
            })
            .collect();
        GrayImage {
            height: w,
            width: h,
            data,
        }
    }
}

/// `[3, H, W]` in `[-1, 1]` to luminance in `[0, 1]`.
pub fn rgb_to_gray(image: &Tensor) -> Result<GrayImage> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected a 3-channel image, got {:?}", image.shape())));
    }
    let plane = h * w;
    let d = image.data();
    let data = (0..plane)
        .map(|i| {
            let y: f64 = (0..3).map(|ch| LUMA[ch] * ((d[ch * plane + i] as f64 + 1.0) / 2.0)).sum();
            y.clamp(0.0, 1.0) as f32
        })
        .collect();
    GrayImage::new(h, w, data)
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable gaussian blur with reflect padding, computed in f64.
fn blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * data[y * w + reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * rows[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn sobel(data: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| data[reflect(y, h) * w + reflect(x, w)];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// Row/column offsets of the two neighbours along the quantized gradient.
/// The first offset always points to the lower-index neighbour.
fn sector_offsets(gx: f64, gy: f64) -> [(isize, isize); 2] {
    let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
    if !(22.5..157.5).contains(&angle) {
        [(0, -1), (0, 1)]
    } else if angle < 67.5 {
        [(-1, -1), (1, 1)]
    } else if angle < 112.5 {
        [(-1, 0), (1, 0)]
    } else {
        [(-1, 1), (1, -1)]
    }
}

fn check_canny_args(img: &GrayImage, low: f32, high: f32, sigma: f32) -> Result<()> {
    if !(0.0 <= low && low < high && high <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "thresholds must satisfy 0 <= low < high <= 1, got ({low}, {high})"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if img.height < 5 || img.width < 5 {
        return Err(Error::InvalidArgument(format!(
            "canny needs at least 5x5 pixels, got {}x{}",
            img.height, img.width
        )));
    }
    Ok(())
}

/// Binary edge map. Suppression keeps a pixel when it strictly beats the
/// lower-index neighbour along the gradient and at least ties the other, so a
/// symmetric two-pixel ridge thins to its lower-index pixel.
pub fn canny(img: &GrayImage, low: f32, high: f32, sigma: f32) -> Result<GrayImage> {
    check_canny_args(img, low, high, sigma)?;
    let (h, w) = (img.height, img.width);
    let src: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let smooth = blur(&src, h, w, sigma as f64);
    let (gx, gy) = sobel(&smooth, h, w);
    let mut mag: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return GrayImage::filled(h, w, 0.0);
    }
    mag.iter_mut().for_each(|m| *m /= peak);

    let mut thin = vec![0.0; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let [(py, px), (ny, nx)] = sector_offsets(gx[i], gy[i]);
            let prev = mag[(y as isize + py) as usize * w + (x as isize + px) as usize];
            let next = mag[(y as isize + ny) as usize * w + (x as isize + nx) as usize];
            if prev < m - NMS_TIE_EPS && next <= m + NMS_TIE_EPS {
                thin[i] = m;
            }
        }
    }

    let (low, high) = (low as f64, high as f64);
    let mut out = vec![0.0f32; h * w];
    let mut queue: VecDeque<usize> = (0..h * w).filter(|&i| thin[i] >= high).collect();
    for &i in &queue {
        out[i] = 1.0;
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && thin[j] >= low {
                    out[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    GrayImage::new(h, w, out)
}

/// Blurred luminance (sigma 2) min-max normalized; a flat input maps to zeros.
pub fn depth_proxy(img: &GrayImage) -> GrayImage {
    let (h, w) = (img.height, img.width);
    let src: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let smooth = blur(&src, h, w, DEPTH_SIGMA);
    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data = if range <= 1e-12 {
        vec![0.0; h * w]
    } else {
        smooth.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0) as f32).collect()
    };
    GrayImage { height: h, width: w, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preprocessor {
    Canny,
    Depth,
    None,
}

impl std::str::FromStr for Preprocessor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canny" => Ok(Self::Canny),
            "depth" => Ok(Self::Depth),
            "none" => Ok(Self::None),
            other => Err(crate::error::unknown("preprocessor", other, ["canny", "depth", "none"])),
        }
    }
}

/// Condition map for an RGB image: `None` passes the luminance through.
pub fn run_preprocessor(kind: Preprocessor, image: &Tensor, low: f32, high: f32) -> Result<GrayImage> {
    let gray = rgb_to_gray(image)?;
    match kind {
        Preprocessor::Canny => canny(&gray, low, high, DEFAULT_SIGMA),
        Preprocessor::Depth => Ok(depth_proxy(&gray)),
        Preprocessor::None => Ok(gray),
    }
}
