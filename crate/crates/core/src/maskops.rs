//! Binary and fractional masks: dilation, annulus, pooling to latent
//! resolution, thresholding, compositing, and PNG persistence.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::colorspace::RgbImage;
use crate::error::{Error, Result};

/// H x W grid of exact 0/1 values.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::validation(format!(
                "mask length {} does not match {height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| *v > 1) {
            return Err(Error::validation("mask values must be exactly 0 or 1"));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x) as u8);
            }
        }
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.values[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| *v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| 1 - v).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.values.iter().zip(&other.values).all(|(a, b)| *a <= *b)
    }

    pub fn to_fractional(&self) -> FractionalMask {
        FractionalMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| *v as f32).collect(),
        }
    }

    /// `[1, 1, H, W]` f32 tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.values.iter().map(|v| *v as f32).collect();
        Ok(Tensor::from_vec(v, (1, 1, self.height, self.width), device)?)
    }

    /// Single-channel 8-bit PNG, 0 or 255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.values.iter().map(|v| v * 255).collect();
        image::save_buffer(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::load(path, e))?.to_luma8();
        let (w, h) = img.dimensions();
        let mut values = Vec::with_capacity((w * h) as usize);
        for v in img.into_raw() {
            match v {
                0 => values.push(0),
                255 => values.push(1),
                other => return Err(Error::load(path, format!("mask pixel value {other} is not 0 or 255"))),
            }
        }
        Self::new(h as usize, w as usize, values)
    }
}

/// h x w grid with values in [0,1], typically at latent or feature-map resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl FractionalMask {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::validation("fractional mask length does not match shape"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("fractional mask values must lie in [0,1]"));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|v| *v as f64).sum()
    }
}

fn check_kernel(kernel_px: usize) -> Result<()> {
    if kernel_px == 0 || kernel_px.is_multiple_of(2) {
        return Err(Error::validation(format!(
            "dilation kernel must be odd and positive, got {kernel_px}"
        )));
    }
    Ok(())
}

/// Dilation by a `kernel_px` x `kernel_px` square; pixels outside the frame count as 0.
pub fn dilate(m: &Mask, kernel_px: usize) -> Result<Mask> {
    check_kernel(kernel_px)?;
    let r = kernel_px / 2;
    let (h, w) = (m.height, m.width);
    // separable: a square max filter is a row max followed by a column max
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = m.values[y * w + lo..=y * w + hi].iter().copied().max().unwrap_or(0);
        }
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).max().unwrap_or(0);
        }
    }
    Mask::new(h, w, out)
}

/// `dilate(m) AND NOT m`: the ring of context around the region.
pub fn annulus(m: &Mask, kernel_px: usize) -> Result<Mask> {
    let d = dilate(m, kernel_px)?;
    let values = d.values.iter().zip(&m.values).map(|(d, m)| d & (1 - m)).collect();
    Mask::new(m.height, m.width, values)
}

/// Area-average pooling over `factor` x `factor` blocks.
pub fn downsample_mask(m: &Mask, factor: usize) -> Result<FractionalMask> {
    if factor == 0 || !m.height.is_multiple_of(factor) || !m.width.is_multiple_of(factor) {
        return Err(Error::validation(format!(
            "mask {}x{} is not divisible by factor {factor}",
            m.height, m.width
        )));
    }
    let (oh, ow) = (m.height / factor, m.width / factor);
    let area = (factor * factor) as f32;
    let mut values = vec![0f32; oh * ow];
    for y in 0..m.height {
        for x in 0..m.width {
            values[(y / factor) * ow + x / factor] += m.values[y * m.width + x] as f32;
        }
    }
    for v in &mut values {
        *v /= area;
    }
    FractionalMask::new(oh, ow, values)
}

/// 1 where the value is strictly greater than `threshold`.
pub fn binarize(fm: &FractionalMask, threshold: f32) -> Mask {
    Mask {
        height: fm.height,
        width: fm.width,
        values: fm.values.iter().map(|v| (*v > threshold) as u8).collect(),
    }
}

/// Nearest-neighbour resize sampling source cell centers.
pub fn resize_nearest(m: &Mask, height: usize, width: usize) -> Mask {
    Mask::from_fn(height, width, |y, x| {
        let sy = ((y as f64 + 0.5) * m.height as f64 / height as f64) as usize;
        let sx = ((x as f64 + 0.5) * m.width as f64 / width as f64) as usize;
        m.get(sy.min(m.height - 1), sx.min(m.width - 1))
    })
}

/// `fg * m + bg * (1 - m)`.
pub fn composite(fg: &RgbImage, bg: &RgbImage, m: &Mask) -> Result<RgbImage> {
    if fg.height() != bg.height() || fg.width() != bg.width() {
        return Err(Error::validation("composite: foreground and background shapes differ"));
    }
    if m.height != fg.height() || m.width != fg.width() {
        return Err(Error::validation("composite: mask shape differs from image shape"));
    }
    let data = fg
        .data()
        .chunks_exact(3)
        .zip(bg.data().chunks_exact(3))
        .zip(&m.values)
        .flat_map(|((f, b), on)| {
            if *on == 1 {
                [f[0], f[1], f[2]]
            } else {
                [b[0], b[1], b[2]]
            }
        })
        .collect();
    RgbImage::new(fg.height(), fg.width(), data)
}

/// Tensor form of `composite`; `m` broadcasts over channels.
pub fn composite_tensor(fg: &Tensor, bg: &Tensor, m: &Tensor) -> Result<Tensor> {
    let inv = m.affine(-1.0, 1.0)?;
    Ok((fg.broadcast_mul(m)? + bg.broadcast_mul(&inv)?)?)
}

/// Multiplies every channel of `img` by the mask.
pub fn apply_mask(img: &RgbImage, m: &Mask) -> Result<RgbImage> {
    let black = RgbImage::filled(img.height(), img.width(), [0.0; 3])?;
    composite(img, &black, m)
}
