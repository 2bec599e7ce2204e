//! 8-bit RGB PNG transport for `[3, H, W]` tensors in `[-1, 1]`.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use crate::error::{Error, Result};
use crate::preprocess::GrayImage;
use crate::tensor::Tensor;

/// `round((x + 1) * 127.5)`, clamped to a byte.
pub fn to_byte(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn to_png_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("PNG export needs 3 channels, got {:?}", image.shape())));
    }
    let plane = h * w;
    let d = image.data();
    let mut pixels = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            pixels.push(to_byte(d[ch * plane + i]));
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| Error::Image(e.to_string()))?;
    writer.finish().map_err(|e| Error::Image(e.to_string()))?;
    Ok(out)
}

pub fn from_png_bytes(bytes: &[u8]) -> Result<Tensor> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(format!("not a PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!(
            "expected 8-bit RGB PNG, got {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + 3 * w];
        for x in 0..w {
            for ch in 0..3 {
                data[ch * plane + y * w + x] = from_byte(row[3 * x + ch]);
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn to_png_base64(image: &Tensor) -> Result<String> {
    Ok(STANDARD.encode(to_png_bytes(image)?))
}

pub fn from_png_base64(s: &str) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(s.trim())
        .map_err(|e| Error::Image(format!("malformed base64: {e}")))?;
    from_png_bytes(&bytes)
}

/// Gray map as an RGB PNG (the three channels equal).
pub fn gray_to_png_base64(img: &GrayImage) -> Result<String> {
    to_png_base64(&img.to_rgb_tensor())
}
