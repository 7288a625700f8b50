//! RGB image type used throughout the crate.
//!
//! Pixels are stored interleaved (row-major, `[r, g, b]` per pixel) as `f64`
//! in `[0, 1]` sRGB. Quantization to 8 bits only happens at PNG I/O.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Smallest accepted side length.
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from interleaved RGB data. Values are clamped to `[0, 1]`.
    pub fn from_vec(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::InvalidInput(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite values".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { height, width, data })
    }

    /// Uniform image with the same value in every channel.
    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_vec(height, width, vec![value; height * width * 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self::from_vec(height, width, data)
    }

    /// Builds an image by evaluating `f(row, col)` for every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self::from_vec(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Applies `f` to every pixel and clamps the result.
    pub fn map_pixels(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for p in self.pixels() {
            let q = f(p);
            data.extend(q.iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Image { height: self.height, width: self.width, data }
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let n = (self.height * self.width) as f64;
        let mut acc = [0.0; 3];
        for p in self.pixels() {
            for k in 0..3 {
                acc[k] += p[k];
            }
        }
        acc.map(|v| v / n)
    }

    /// Planar `[3, H, W]` layout, as consumed by the networks.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, p) in self.pixels().enumerate() {
            out[i] = p[0];
            out[hw + i] = p[1];
            out[2 * hw + i] = p[2];
        }
        out
    }

    /// Inverse of [`Image::to_chw`]; values are clamped.
    pub fn from_chw(height: usize, width: usize, chw: &[f64]) -> Result<Image> {
        let hw = height * width;
        if chw.len() != 3 * hw {
            return Err(Error::InvalidInput("planar buffer has the wrong length".into()));
        }
        let mut data = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            data.push(chw[i]);
            data.push(chw[hw + i]);
            data.push(chw[2 * hw + i]);
        }
        Image::from_vec(height, width, data)
    }

    /// Resizes to `height x width`. Integer downscales use box averaging,
    /// everything else bilinear sampling with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidInput(format!("cannot resize below {MIN_SIDE}px")));
        }
        if self.height % height == 0 && self.width % width == 0 {
            let (fy, fx) = (self.height / height, self.width / width);
            let norm = (fy * fx) as f64;
            return Image::from_fn(height, width, |r, c| {
                let mut acc = [0.0; 3];
                for dy in 0..fy {
                    for dx in 0..fx {
                        let p = self.pixel(r * fy + dy, c * fx + dx);
                        for k in 0..3 {
                            acc[k] += p[k];
                        }
                    }
                }
                acc.map(|v| v / norm)
            });
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Image::from_fn(height, width, |r, c| {
            let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (ty, tx) = (y - y0 as f64, x - x0 as f64);
            let (p00, p01, p10, p11) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
            let mut out = [0.0; 3];
            for k in 0..3 {
                let top = p00[k] * (1.0 - tx) + p01[k] * tx;
                let bottom = p10[k] * (1.0 - tx) + p11[k] * tx;
                out[k] = top * (1.0 - ty) + bottom * ty;
            }
            out
        })
    }

    /// Square resize helper.
    pub fn resize_square(&self, side: usize) -> Result<Image> {
        self.resize(side, side)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Image> {
        Image::from_vec(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Decode(e.to_string()))?
            .to_rgb8();
        let (w, h) = decoded.dimensions();
        Image::from_rgb8(h as usize, w as usize, decoded.as_raw())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::InvalidInput("buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Decode(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
        let bytes = std::fs::read(path.as_ref())?;
        Image::decode_png(&bytes)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.encode_png()?)?;
        Ok(())
    }

    /// Rounds every value to the nearest 8-bit level, as PNG storage would.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.to_rgb8().into_iter().map(|b| b as f64 / 255.0).collect(),
        }
    }
}
