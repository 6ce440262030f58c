//! Host-side image and mask buffers.
//!
//! Images are stored channel-planar (R plane, G plane, B plane), row-major,
//! with values in `[0, 1]`. Masks are single-plane, row-major, in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{contract, Result};

/// An RGB image with real-valued pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(contract(format!(
                "image buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self { height, width, data }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[channel * n..(channel + 1) * n]
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, y: usize, x: usize, v: f32) {
        self.data[(channel * self.height + y) * self.width + x] = v;
    }

    /// `(3, H, W)` tensor in the requested dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(contract(format!("expected a rank-3 image tensor, got rank {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(contract(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(h, w, data)
    }

    /// Stacks images into an `(N, 3, H, W)` tensor. All images must share one size.
    pub fn batch_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| contract("empty image batch"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.dims() != (h, w) {
                return Err(contract(format!(
                    "batch mixes image sizes {:?} and {:?}",
                    (h, w),
                    img.dims()
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
    }

    /// Bilinear resize (half-pixel centers), ignoring aspect ratio.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let mut out = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            out.extend(resize_plane(self.plane(c), self.height, self.width, height, width));
        }
        Image { height, width, data: out }
    }

    /// Crops the inclusive rectangle `[x0, x1] x [y0, y1]`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Image> {
        if x0 > x1 || y0 > y1 || x1 >= self.width || y1 >= self.height {
            return Err(contract(format!(
                "crop ({x0},{y0},{x1},{y1}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let (h, w) = (y1 - y0 + 1, x1 - x0 + 1);
        let mut out = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            let plane = self.plane(c);
            for y in y0..=y1 {
                out.extend_from_slice(&plane[y * self.width + x0..=y * self.width + x1]);
            }
        }
        Ok(Image { height: h, width: w, data: out })
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> [f64; 3] {
        let n = (self.height * self.width) as f64;
        let mut out = [0.0; 3];
        for (c, m) in out.iter_mut().enumerate() {
            *m = self.plane(c).iter().map(|&v| v as f64).sum::<f64>() / n;
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|c| quantize(self.get(c, y, x)));
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(h, w, [0.0; 3]);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Decodes any format the `image` crate can read into RGB.
    pub fn decode(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn open(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }
}

/// A single-plane saliency mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(contract(format!(
                "mask buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self { height, width, data: vec![v; height * width] }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(H, W)`, `(1, H, W)` or `(1, 1, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims().to_vec();
        if dims.len() < 2 || dims[..dims.len() - 2].iter().any(|&d| d != 1) {
            return Err(contract(format!("expected a single mask tensor, got shape {dims:?}")));
        }
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(h, w, data)
    }

    pub fn resize(&self, height: usize, width: usize) -> Mask {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let data = resize_plane(&self.data, self.height, self.width, height, width);
        Mask { height, width, data }
    }

    pub fn inverted(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// 8-bit grayscale with `round(m * 255)`.
    pub fn to_gray8(&self) -> GrayImage {
        let mut img = GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                img.put_pixel(x as u32, y as u32, image::Luma([quantize(self.get(y, x))]));
            }
        }
        img
    }

    pub fn from_gray8(img: &GrayImage) -> Mask {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
        Mask { height: h, width: w, data }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Source taps for bilinear resampling with half-pixel centers:
/// output index `o` reads `(1 - t) * in[i0] + t * in[i1]`.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn resize_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = src[y0 * w + x0] as f64 * (1.0 - fx) + src[y0 * w + x1] as f64 * fx;
            let bot = src[y1 * w + x0] as f64 * (1.0 - fx) + src[y1 * w + x1] as f64 * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}
