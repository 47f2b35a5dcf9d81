use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use camodiff::backend::{AeShape, Autoencoder};
use camodiff::critic::{Critic, CriticShape};
use camodiff::detect::{ArchVariant, Detector, DetectorShape};
use camodiff::maskops::Mask;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `[1, 3, s, s]` f64 image with values inside (lo, hi).
pub fn image(rng: &mut ChaCha8Rng, s: usize, lo: f64, hi: f64) -> Tensor {
    let v: Vec<f64> = (0..3 * s * s).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, (1, 3, s, s), &Device::Cpu).unwrap()
}

pub fn constant_image(rgb: [f64; 3], s: usize) -> Tensor {
    let v: Vec<f64> = (0..3).flat_map(|c| std::iter::repeat_n(rgb[c], s * s)).collect();
    Tensor::from_vec(v, (1, 3, s, s), &Device::Cpu).unwrap()
}

/// Axis-aligned rectangle mask with random corners, at least `min` on a side.
pub fn rect_mask(rng: &mut ChaCha8Rng, s: usize, min: usize) -> Mask {
    let h = rng.random_range(min..=s - 2);
    let w = rng.random_range(min..=s - 2);
    let y0 = rng.random_range(0..=s - h);
    let x0 = rng.random_range(0..=s - w);
    Mask::from_fn(s, s, |y, x| (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x))
}

pub fn random_mask(rng: &mut ChaCha8Rng, s: usize, p: f64) -> Mask {
    let v: Vec<u8> = (0..s * s).map(|_| rng.random_bool(p) as u8).collect();
    Mask::new(s, s, v).unwrap()
}

pub fn tiny_ae(seed: u64) -> Autoencoder {
    Autoencoder::init(
        AeShape {
            image_size: 8,
            factor: 2,
            latent_channels: 4,
            channels: 8,
        },
        seed,
    )
    .unwrap()
    .to_dtype(DType::F64)
    .unwrap()
}

pub fn tiny_critic(seed: u64) -> Critic {
    Critic::init(
        CriticShape {
            latent_channels: 4,
            channels: [6, 8, 8],
            classes: 3,
        },
        seed,
    )
    .unwrap()
    .to_dtype(DType::F64)
    .unwrap()
}

pub fn tiny_detector(seed: u64) -> Detector {
    Detector::init(
        DetectorShape {
            variant: ArchVariant::WideShallow,
            image_size: 8,
            grid: 2,
        },
        seed,
    )
    .unwrap()
    .to_dtype(DType::F64)
    .unwrap()
}

/// Detector whose every cell outputs exactly `logits` = (background, vehicle).
pub fn constant_detector(logits: [f64; 2]) -> Detector {
    let d = tiny_detector(0);
    for (name, v) in d.store().names().zip(d.store().vars()) {
        let t = if name == "det.head.bias" {
            Tensor::from_vec(vec![logits[0], logits[1], 0.0, 0.0, 0.0, 0.0], 6, &Device::Cpu).unwrap()
        } else {
            v.as_tensor().zeros_like().unwrap()
        };
        v.set(&t).unwrap();
    }
    d
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}
