//! Grayscale rasters and binary PGM (P5) export.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// A W×H intensity raster in [0, 1] with an optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
    valid: Option<Vec<bool>>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height], valid: None }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data, valid: None }
    }

    pub fn from_parts(width: usize, height: usize, data: Vec<f32>, valid: Option<Vec<bool>>) -> Self {
        assert_eq!(data.len(), width * height);
        if let Some(v) = &valid {
            assert_eq!(v.len(), width * height);
        }
        Self { width, height, data, valid }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    pub fn set_mask(&mut self, mask: Option<Vec<bool>>) {
        if let Some(v) = &mask {
            assert_eq!(v.len(), self.width * self.height);
        }
        self.valid = mask;
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid.as_ref().is_none_or(|m| m[y * self.width + x])
    }

    pub fn valid_count(&self) -> usize {
        match &self.valid {
            None => self.data.len(),
            Some(m) => m.iter().filter(|&&v| v).count(),
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// integers). Returns `None` outside the raster or when any of the four
    /// neighbours is masked invalid.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f32> {
        let (w, h) = (self.width, self.height);
        if w < 2 || h < 2 || !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
            return None;
        }
        // Clamp the base so samples on the last row/column stay in range.
        let x0 = (u.floor() as usize).min(w - 2);
        let y0 = (v.floor() as usize).min(h - 2);
        let i = y0 * w + x0;
        if let Some(m) = &self.valid {
            if !(m[i] && m[i + 1] && m[i + w] && m[i + w + 1]) {
                return None;
            }
        }
        let fx = (u - x0 as f64) as f32;
        let fy = (v - y0 as f64) as f32;
        let d = &self.data;
        let top = d[i] + (d[i + 1] - d[i]) * fx;
        let bot = d[i + w] + (d[i + w + 1] - d[i + w]) * fx;
        Some(top + (bot - top) * fy)
    }

    /// Mean absolute difference over pixels valid in both images.
    pub fn mean_abs_diff(&self, other: &GrayImage) -> Option<f64> {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_valid(x, y) && other.is_valid(x, y) {
                    sum += (self.get(x, y) - other.get(x, y)).abs() as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Quantizes to 8 bits; invalid pixels are written as 0.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if self.valid.as_ref().is_some_and(|m| !m[i]) {
                    0
                } else {
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                }
            })
            .collect()
    }

    pub fn mask_u8(&self) -> Vec<u8> {
        (0..self.data.len())
            .map(|i| if self.valid.as_ref().is_none_or(|m| m[i]) { 255 } else { 0 })
            .collect()
    }
}

/// Encodes an 8-bit binary PGM (P5).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(width, height, pixels))?;
    Ok(())
}

/// Decodes an 8-bit binary PGM. Comments in the header are not supported.
pub fn decode_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let w: usize = fields[1].parse().ok()?;
    let h: usize = fields[2].parse().ok()?;
    let px = bytes.get(pos..pos + w * h)?.to_vec();
    Some((w, h, px))
}
