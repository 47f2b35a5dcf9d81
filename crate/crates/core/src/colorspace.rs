//! sRGB <-> CIELAB conversion (D65 white), on plain images and on tensors.
//!
//! The scalar path works in `f64` and backs the `RgbImage`/`LabImage` API.
//! The tensor path is the differentiable one used inside the losses; it
//! follows the same formulas and selects the lower branch at each piecewise
//! joint.

use std::sync::LazyLock;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// sRGB primaries to XYZ, D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// Reference white taken from the matrix row sums so that RGB (1,1,1) maps
/// exactly to L=100 and equal-channel inputs stay on the neutral axis.
static WHITE: LazyLock<[f64; 3]> = LazyLock::new(|| {
    let mut w = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        w[i] = row.iter().sum();
    }
    w
});

static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

const SRGB_JOINT: f64 = 0.04045;
const LINEAR_JOINT: f64 = 0.003_130_8;
const LAB_DELTA: f64 = 6.0 / 29.0;

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv_det = 1.0 / det;
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            // cofactor transpose
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            out[r][c] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) * inv_det;
        }
    }
    out
}

fn srgb_decode(c: f64) -> f64 {
    if c <= SRGB_JOINT {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_encode(c: f64) -> f64 {
    let c = c.max(0.0);
    if c <= LINEAR_JOINT {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t <= LAB_DELTA.powi(3) {
        t / (3.0 * LAB_DELTA * LAB_DELTA) + 4.0 / 29.0
    } else {
        t.cbrt()
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t <= LAB_DELTA {
        3.0 * LAB_DELTA * LAB_DELTA * (t - 4.0 / 29.0)
    } else {
        t * t * t
    }
}

/// One sRGB triple in [0,1] to (L, a, b).
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_decode);
    let w = *WHITE;
    let mut f = [0.0; 3];
    for i in 0..3 {
        let v: f64 = (0..3).map(|j| RGB_TO_XYZ[i][j] * lin[j]).sum();
        f[i] = lab_f(v / w[i]);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// One (L, a, b) triple back to sRGB. Not clamped.
pub fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let w = *WHITE;
    let xyz = [w[0] * lab_f_inv(fx), w[1] * lab_f_inv(fy), w[2] * lab_f_inv(fz)];
    let inv = &*XYZ_TO_RGB;
    let mut out = [0.0; 3];
    for i in 0..3 {
        let lin: f64 = (0..3).map(|j| inv[i][j] * xyz[j]).sum();
        out[i] = srgb_encode(lin);
    }
    out
}

/// Row-major H x W x C grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::validation(format!(
                "grid data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// sRGB-encoded image, H x W x 3, every value finite and in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("image must be at least 1x1"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::validation(format!(
                "rgb data length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::validation(format!(
                "rgb value {v} is not finite or outside [0,1]"
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// `[1, 3, H, W]` f32 tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?;
        Ok(t.permute((2, 0, 1))?.unsqueeze(0)?.contiguous()?)
    }

    /// Accepts `[3, H, W]` or `[1, 3, H, W]`; values are clamped into [0,1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::validation(format!("expected rank 3 or 4 image tensor, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::validation(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f32> = t.to_dtype(DType::F32)?.permute((1, 2, 0))?.flatten_all()?.to_vec1()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite value in image tensor".into()));
        }
        Self::new(h, w, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// BT.601 luma, H x W.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    pub l: Vec<f32>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

impl LabImage {
    fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if n == 0 || self.l.len() != n || self.a.len() != n || self.b.len() != n {
            return Err(Error::validation("lab planes do not match the declared shape"));
        }
        let ok = self.l.iter().all(|v| v.is_finite() && (0.0..=100.0).contains(v))
            && self.a.iter().chain(&self.b).all(|v| v.is_finite());
        if !ok {
            return Err(Error::validation("lab values non-finite or L outside [0,100]"));
        }
        Ok(())
    }
}

pub fn rgb_to_lab(img: &RgbImage) -> Result<LabImage> {
    let n = img.height * img.width;
    let (mut l, mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in img.data.chunks_exact(3) {
        let lab = srgb_to_lab([p[0] as f64, p[1] as f64, p[2] as f64]);
        l.push(lab[0].clamp(0.0, 100.0) as f32);
        a.push(lab[1] as f32);
        b.push(lab[2] as f32);
    }
    Ok(LabImage {
        height: img.height,
        width: img.width,
        l,
        a,
        b,
    })
}

pub fn lab_to_rgb(img: &LabImage) -> Result<RgbImage> {
    img.validate()?;
    let mut data = Vec::with_capacity(img.l.len() * 3);
    for i in 0..img.l.len() {
        let rgb = lab_to_srgb([img.l[i] as f64, img.a[i] as f64, img.b[i] as f64]);
        data.extend(rgb.map(|v| v.clamp(0.0, 1.0) as f32));
    }
    RgbImage::new(img.height, img.width, data)
}

/// L / 100, H x W x 1.
pub fn normalized_l(img: &RgbImage) -> Result<Grid> {
    let lab = rgb_to_lab(img)?;
    Grid::new(img.height, img.width, 1, lab.l.iter().map(|v| v / 100.0).collect())
}

/// ((a + 128) / 255, (b + 128) / 255), H x W x 2.
pub fn normalized_ab(img: &RgbImage) -> Result<Grid> {
    let lab = rgb_to_lab(img)?;
    let data = lab
        .a
        .iter()
        .zip(&lab.b)
        .flat_map(|(a, b)| [(a + 128.0) / 255.0, (b + 128.0) / 255.0])
        .collect();
    Grid::new(img.height, img.width, 2, data)
}

// ---------------------------------------------------------------------------
// Differentiable tensor path. Inputs are `[B, 3, H, W]` sRGB in [0,1].

fn srgb_decode_t(x: &Tensor) -> Result<Tensor> {
    let lo = x.affine(1.0 / 12.92, 0.0)?;
    // (x + 0.055) / 1.055 > 0 on the whole [0,1] domain
    let hi = x.affine(1.0 / 1.055, 0.055 / 1.055)?.powf(2.4)?;
    Ok(x.le(SRGB_JOINT)?.where_cond(&lo, &hi)?)
}

fn lab_f_t(t: &Tensor) -> Result<Tensor> {
    let d3 = LAB_DELTA.powi(3);
    let lo = t.affine(1.0 / (3.0 * LAB_DELTA * LAB_DELTA), 4.0 / 29.0)?;
    // clamp before the cube root so the unselected branch has a finite gradient
    let hi = t.maximum(d3)?.powf(1.0 / 3.0)?;
    Ok(t.le(d3)?.where_cond(&lo, &hi)?)
}

/// `[B, 3, H, W]` sRGB to `[B, 3, H, W]` (L, a, b).
pub fn rgb_to_lab_tensor(x: &Tensor) -> Result<Tensor> {
    let lin = srgb_decode_t(x)?;
    let ch: Vec<Tensor> = (0..3)
        .map(|c| lin.narrow(1, c, 1))
        .collect::<candle_core::Result<_>>()?;
    let w = *WHITE;
    let mut f = Vec::with_capacity(3);
    for i in 0..3 {
        let m = RGB_TO_XYZ[i];
        let v =
            ((ch[0].affine(m[0] / w[i], 0.0)? + ch[1].affine(m[1] / w[i], 0.0)?)? + ch[2].affine(m[2] / w[i], 0.0)?)?;
        f.push(lab_f_t(&v)?);
    }
    let l = f[1].affine(116.0, -16.0)?;
    let a = (&f[0] - &f[1])?.affine(500.0, 0.0)?;
    let b = (&f[1] - &f[2])?.affine(200.0, 0.0)?;
    Ok(Tensor::cat(&[l, a, b], 1)?)
}

/// `[B, 1, H, W]` with L / 100.
pub fn normalized_l_tensor(x: &Tensor) -> Result<Tensor> {
    let lab = rgb_to_lab_tensor(x)?;
    Ok(lab.narrow(1, 0, 1)?.affine(0.01, 0.0)?)
}

/// `[B, 2, H, W]` with (a + 128) / 255 and (b + 128) / 255.
pub fn normalized_ab_tensor(x: &Tensor) -> Result<Tensor> {
    let lab = rgb_to_lab_tensor(x)?;
    Ok(lab.narrow(1, 1, 2)?.affine(1.0 / 255.0, 128.0 / 255.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: f32) -> RgbImage {
        RgbImage::filled(2, 3, [v, v, v]).unwrap()
    }

    #[test]
    fn white_and_black_points() {
        let w = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((w[0] - 100.0).abs() < 1e-9 && w[1].abs() < 1e-9 && w[2].abs() < 1e-9);
        let k = srgb_to_lab([0.0, 0.0, 0.0]);
        assert!(k.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn mid_gray_lightness() {
        // 0.5 -> linear 0.214041 -> f = 0.214041^(1/3) -> L = 116 f - 16
        let lin = ((0.5f64 + 0.055) / 1.055).powf(2.4);
        let expected = 116.0 * lin.cbrt() - 16.0;
        let lab = srgb_to_lab([0.5, 0.5, 0.5]);
        assert!((lab[0] - expected).abs() < 1e-9);
        assert!((lab[0] - 53.39).abs() < 0.01);
        let back = lab_to_srgb([53.389, 0.0, 0.0]);
        assert!(back.iter().all(|v| (v - 0.5).abs() < 1e-3));
    }

    #[test]
    fn normalized_channels() {
        assert!(normalized_l(&gray(1.0))
            .unwrap()
            .data
            .iter()
            .all(|v| (v - 1.0).abs() < 1e-6));
        assert!(normalized_l(&gray(0.0)).unwrap().data.iter().all(|v| v.abs() < 1e-6));
        assert!(normalized_l(&gray(0.5))
            .unwrap()
            .data
            .iter()
            .all(|v| (v - 0.5339).abs() < 1e-4));
        let ab = normalized_ab(&gray(0.3)).unwrap();
        assert!(ab.data.iter().all(|v| (v - 128.0 / 255.0).abs() < 1e-6));

        let red = normalized_ab(&RgbImage::filled(1, 1, [1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert!(red.data[0] > 0.502);
        let blue = normalized_ab(&RgbImage::filled(1, 1, [0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert!(blue.data[1] < 0.502);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RgbImage::new(1, 1, vec![f32::NAN, 0.0, 0.0]).is_err());
        assert!(RgbImage::new(1, 1, vec![1.5, 0.0, 0.0]).is_err());
        assert!(RgbImage::new(0, 1, vec![]).is_err());
        let bad = LabImage {
            height: 1,
            width: 1,
            l: vec![101.0],
            a: vec![0.0],
            b: vec![0.0],
        };
        assert!(lab_to_rgb(&bad).is_err());
    }

    #[test]
    fn lab_white_to_rgb() {
        let lab = LabImage {
            height: 1,
            width: 1,
            l: vec![100.0],
            a: vec![0.0],
            b: vec![0.0],
        };
        let rgb = lab_to_rgb(&lab).unwrap();
        assert!(rgb.data().iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn tensor_path_matches_scalar_path() {
        let dev = Device::Cpu;
        let vals = [0.0, 0.02, 0.04045, 0.3, 0.77, 1.0];
        let mut data = Vec::new();
        for r in vals {
            for g in vals {
                data.extend([r as f32, g as f32, 0.6f32]);
            }
        }
        let img = RgbImage::new(6, 6, data).unwrap();
        let t = img.to_tensor(&dev).unwrap().to_dtype(DType::F64).unwrap();
        let lab_t = rgb_to_lab_tensor(&t).unwrap().squeeze(0).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let p = img.pixel(y, x).map(|v| v as f64);
                let lab = srgb_to_lab(p);
                for c in 0..3 {
                    let v: f64 = lab_t
                        .get(c)
                        .unwrap()
                        .get(y)
                        .unwrap()
                        .get(x)
                        .unwrap()
                        .to_scalar()
                        .unwrap();
                    assert!((v - lab[c]).abs() < 1e-6, "{v} vs {}", lab[c]);
                }
            }
        }
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn lab_round_trip(r in 0f64..=1.0, g in 0f64..=1.0, b in 0f64..=1.0) {
            let back = lab_to_srgb(srgb_to_lab([r, g, b]));
            for (x, y) in back.iter().zip([r, g, b]) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn achromatic_axis(v in 0f64..=1.0) {
            let lab = srgb_to_lab([v, v, v]);
            prop_assert!(lab[1].abs() <= 1e-6 && lab[2].abs() <= 1e-6);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&lab[0]));
        }

        #[test]
        fn lightness_is_monotone_on_gray(a in 0f64..=1.0, b in 0f64..=1.0) {
            let (la, lb) = (srgb_to_lab([a; 3])[0], srgb_to_lab([b; 3])[0]);
            prop_assert_eq!(a < b, la < lb);
        }
    }
}
