//! Latent-space critic: a three-stage convolutional scene classifier whose
//! stage outputs serve as perceptual features on latents.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{image_batch, Autoencoder};
use crate::colorspace::RgbImage;
use crate::error::{Error, Result};
use crate::maskops::{apply_mask, downsample_mask, Mask};
use crate::nn::{self, Adam, Conv, Linear, ParamStore};
use crate::synthcorpus::{gen_concept_exemplar, GenParams, SceneLabel, SceneRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub channels: [usize; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Side of the cutout square as a fraction of the latent side.
    pub cutout_frac: f64,
    /// Concept exemplars generated per (scene, concept) pair for training.
    pub exemplars_per_concept: usize,
    /// Stages whose features enter the style and background losses.
    pub loss_stages: Vec<usize>,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 48],
            epochs: 6,
            batch_size: 32,
            lr: 2e-3,
            cutout_frac: 0.5,
            exemplars_per_concept: 8,
            loss_stages: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticShape {
    pub latent_channels: usize,
    pub channels: [usize; 3],
    pub classes: usize,
}

pub struct Critic {
    shape: CriticShape,
    stages: Vec<(Conv, Conv)>,
    head: Linear,
    loss_stages: Vec<usize>,
    store: ParamStore,
}

pub const CRITIC_KIND: &str = "critic";

impl Critic {
    pub fn build(mut store: ParamStore, shape: CriticShape, loss_stages: Vec<usize>) -> Result<Self> {
        if shape.classes < 2 {
            return Err(Error::validation("critic needs at least 2 classes"));
        }
        if loss_stages.is_empty() || loss_stages.iter().any(|&s| s > 2) {
            return Err(Error::validation(
                "critic loss stages must be a nonempty subset of 0..=2",
            ));
        }
        let ps = &mut store;
        let c = shape.channels;
        let ins = [shape.latent_channels, c[0], c[1]];
        let stages = (0..3)
            .map(|i| {
                Ok((
                    Conv::new(
                        ps,
                        &format!("critic.s{i}.a"),
                        ins[i],
                        c[i],
                        3,
                        if i == 0 { 1 } else { 2 },
                    )?,
                    Conv::new(ps, &format!("critic.s{i}.b"), c[i], c[i], 3, 1)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(ps, "critic.head", c[2], shape.classes)?;
        Ok(Self {
            shape,
            stages,
            head,
            loss_stages,
            store,
        })
    }

    pub fn init(shape: CriticShape, seed: u64) -> Result<Self> {
        Self::build(ParamStore::init(seed), shape, vec![0, 1, 2])
    }

    pub fn shape(&self) -> CriticShape {
        self.shape
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn loss_stages(&self) -> &[usize] {
        &self.loss_stages
    }

    pub fn with_loss_stages(self, loss_stages: Vec<usize>) -> Result<Self> {
        Self::build(self.store, self.shape, loss_stages)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Self::build(self.store.copy_as(dtype)?, self.shape, self.loss_stages.clone())
    }

    /// Copy that is constant under backpropagation.
    pub fn frozen(&self) -> Result<Self> {
        Self::build(self.store.frozen()?, self.shape, self.loss_stages.clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = serde_json::json!({ "shape": self.shape, "loss_stages": self.loss_stages });
        self.store.save(dir, CRITIC_KIND, &cfg)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, cfg) = ParamStore::load(dir, CRITIC_KIND)?;
        let shape: CriticShape = serde_json::from_value(cfg["shape"].clone()).map_err(|e| Error::load(dir, e))?;
        let stages: Vec<usize> = serde_json::from_value(cfg["loss_stages"].clone()).map_err(|e| Error::load(dir, e))?;
        Self::build(store, shape, stages)
    }

    /// Stage outputs at latent resolution, /2 and /4.
    pub fn features(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = z.dims4()?;
        if c != self.shape.latent_channels || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::validation(format!(
                "critic expects [B, {}, H, W] with H, W divisible by 4, got {:?}",
                self.shape.latent_channels,
                z.dims()
            )));
        }
        let mut out = Vec::with_capacity(3);
        let mut x = z.clone();
        for (a, b) in &self.stages {
            x = nn::silu(&a.forward(&x)?)?;
            x = nn::silu(&b.forward(&x)?)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Class logits `[B, K]`.
    pub fn logits(&self, z: &Tensor) -> Result<Tensor> {
        let f = self.features(z)?.pop().expect("three stages");
        self.head.forward(&f.mean(3)?.mean(2)?)
    }
}

/// `F / sqrt(sum_c F^2 + eps)` at every position.
fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let n = (f.sqr()?.sum_keepdim(1)? + 1e-8)?.sqrt()?;
    Ok(f.broadcast_div(&n)?)
}

/// Mean squared latent difference plus, for each loss stage, the mean over
/// positions of the squared distance between channel-normalized features.
pub fn latent_perceptual_distance(critic: &Critic, z1: &Tensor, z2: &Tensor) -> Result<Tensor> {
    if z1.dims() != z2.dims() {
        return Err(Error::validation(format!(
            "latent shapes differ: {:?} vs {:?}",
            z1.dims(),
            z2.dims()
        )));
    }
    let mut total = (z1 - z2)?.sqr()?.mean_all()?;
    let f1 = critic.features(z1)?;
    let f2 = critic.features(z2)?;
    for &l in critic.loss_stages() {
        let d = (unit_normalize(&f1[l])? - unit_normalize(&f2[l])?)?
            .sqr()?
            .sum_keepdim(1)?
            .mean_all()?;
        total = (total + d)?;
    }
    Ok(total)
}

/// Square cutout region in latent cells: rows `y0..y0+side`, columns `x0..x0+side`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutoutRect {
    pub y0: usize,
    pub x0: usize,
    pub side: usize,
}

pub fn random_cutout(rng: &mut impl Rng, size: usize, frac: f64) -> CutoutRect {
    let side = ((size as f64 * frac).round() as usize).clamp(1, size);
    CutoutRect {
        y0: rng.random_range(0..=size - side),
        x0: rng.random_range(0..=size - side),
        side,
    }
}

/// Zeroes the rectangle on every channel; a multiplicative mask, so gradients
/// pass unchanged everywhere else.
pub fn cutout(z: &Tensor, rect: CutoutRect) -> Result<Tensor> {
    let (_, _, h, w) = z.dims4()?;
    let keep: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let inside = (rect.y0..rect.y0 + rect.side).contains(&y) && (rect.x0..rect.x0 + rect.side).contains(&x);
            if inside {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    let keep = Tensor::from_vec(keep, (1, 1, h, w), z.device())?.to_dtype(z.dtype())?;
    Ok(z.broadcast_mul(&keep)?)
}

/// Latent of `img * m`, multiplied by the block-mean mask at latent resolution.
pub fn masked_latent(ae: &Autoencoder, images: &[&RgbImage], masks: &[&Mask]) -> Result<Tensor> {
    let masked = images
        .iter()
        .zip(masks)
        .map(|(i, m)| apply_mask(i, m))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&RgbImage> = masked.iter().collect();
    let x = image_batch(&refs, ae.device())?.to_dtype(ae.dtype())?;
    let z = ae.encode(&x)?;
    let mdown = latent_masks(masks, ae.shape().factor, ae.device(), ae.dtype())?;
    Ok(z.broadcast_mul(&mdown)?)
}

/// Block-mean masks at latent resolution, `[B, 1, h, w]`.
pub fn latent_masks(masks: &[&Mask], factor: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let ts = masks
        .iter()
        .map(|m| {
            let fm = downsample_mask(m, factor)?;
            Ok(Tensor::from_slice(
                fm.values(),
                (1, 1, fm.height(), fm.width()),
                device,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticReport {
    pub final_train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub classes: usize,
}

/// Masked training latents: vehicle-free backgrounds of the records plus
/// concept exemplars, each labelled with its scene.
pub fn critic_dataset(
    ae: &Autoencoder,
    records: &[SceneRecord],
    labels: &[SceneLabel],
    params: &GenParams,
    exemplars_per_concept: usize,
    seed: u64,
) -> Result<(Tensor, Vec<u32>)> {
    let class_of = |l: SceneLabel| labels.iter().position(|&x| x == l).map(|i| i as u32);
    let mut latents = Vec::new();
    let mut ys = Vec::new();
    for chunk in records.chunks(64) {
        let comp: Vec<Mask> = chunk.iter().map(|r| r.vehicle_mask.complement()).collect();
        let imgs: Vec<&RgbImage> = chunk.iter().map(|r| &r.image).collect();
        let ms: Vec<&Mask> = comp.iter().collect();
        latents.push(masked_latent(ae, &imgs, &ms)?.detach());
        for r in chunk {
            ys.push(class_of(r.scene_label).ok_or_else(|| {
                Error::validation(format!("record {} has unconfigured scene {}", r.id, r.scene_label))
            })?);
        }
    }
    for (li, &label) in labels.iter().enumerate() {
        for (ci, concept) in label.concepts().iter().enumerate() {
            let exs = (0..exemplars_per_concept)
                .map(|k| {
                    gen_concept_exemplar(
                        seed ^ ((k as u64) << 20 | (ci as u64) << 8 | li as u64),
                        label,
                        concept,
                        params,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            if exs.is_empty() {
                continue;
            }
            let imgs: Vec<&RgbImage> = exs.iter().map(|e| &e.image).collect();
            let ms: Vec<&Mask> = exs.iter().map(|e| &e.concept_mask).collect();
            latents.push(masked_latent(ae, &imgs, &ms)?.detach());
            ys.extend(std::iter::repeat_n(li as u32, exs.len()));
        }
    }
    Ok((Tensor::cat(&latents, 0)?, ys))
}

fn accuracy(critic: &Critic, z: &Tensor, ys: &[u32]) -> Result<f64> {
    let mut correct = 0usize;
    for start in (0..ys.len()).step_by(256) {
        let n = (ys.len() - start).min(256);
        let pred: Vec<u32> = critic.logits(&z.narrow(0, start, n)?)?.argmax(1)?.to_vec1()?;
        correct += pred.iter().zip(&ys[start..start + n]).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / ys.len().max(1) as f64)
}

/// Cross-entropy training with random cutout applied to every example.
pub fn train_critic(
    train: (&Tensor, &[u32]),
    heldout: (&Tensor, &[u32]),
    classes: usize,
    cfg: &CriticConfig,
    seed: u64,
) -> Result<(Critic, CriticReport)> {
    if classes < 2 {
        return Err(Error::validation("critic needs at least 2 classes"));
    }
    let (zs, ys) = train;
    let (n, c, h, _) = zs.dims4()?;
    if n == 0 || n != ys.len() {
        return Err(Error::validation("critic training set is empty or mislabelled"));
    }
    let shape = CriticShape {
        latent_channels: c,
        channels: cfg.channels,
        classes,
    };
    let critic = Critic::build(ParamStore::init(seed), shape, cfg.loss_stages.clone())?;
    let mut opt = Adam::new(critic.store().vars(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC7);
    let mut order: Vec<usize> = (0..n).collect();
    let bs = cfg.batch_size.max(1);
    let dev = zs.device().clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &dev)?;
            let zb = zs.index_select(&idx, 0)?;
            let zb = Tensor::cat(
                &(0..chunk.len())
                    .map(|i| cutout(&zb.narrow(0, i, 1)?, random_cutout(&mut rng, h, cfg.cutout_frac)))
                    .collect::<Result<Vec<_>>>()?,
                0,
            )?;
            let yb: Vec<u32> = chunk.iter().map(|&i| ys[i]).collect();
            let loss = cross_entropy(&critic.logits(&zb)?, &yb)?;
            opt.backward_step(&loss)?;
        }
    }
    let report = CriticReport {
        final_train_accuracy: accuracy(&critic, zs, ys)?,
        heldout_accuracy: accuracy(&critic, heldout.0, heldout.1)?,
        classes,
    };
    Ok((critic, report))
}

/// Mean cross-entropy of `[N, K]` logits against integer targets.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (n, _) = logits.dims2()?;
    if n != targets.len() || n == 0 {
        return Err(Error::validation("cross-entropy needs one target per row"));
    }
    let idx = Tensor::from_slice(targets, (n, 1), logits.device())?;
    let lp = nn::log_softmax(logits)?.gather(&idx, 1)?;
    Ok(lp.neg()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Critic {
        Critic::init(
            CriticShape {
                latent_channels: 4,
                channels: [4, 6, 8],
                classes: 3,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn stage_shapes() {
        let c = tiny();
        let z = Tensor::randn(0f32, 1., (2, 4, 16, 16), &Device::Cpu).unwrap();
        let f = c.features(&z).unwrap();
        assert_eq!(f[0].dims(), [2, 4, 16, 16]);
        assert_eq!(f[1].dims(), [2, 6, 8, 8]);
        assert_eq!(f[2].dims(), [2, 8, 4, 4]);
        assert_eq!(c.logits(&z).unwrap().dims(), [2, 3]);
        assert!(c
            .features(&Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap())
            .is_err());
    }

    #[test]
    fn distance_axioms() {
        let c = tiny();
        let z1 = Tensor::randn(0f32, 1., (1, 4, 8, 8), &Device::Cpu).unwrap();
        let z2 = Tensor::randn(0f32, 1., (1, 4, 8, 8), &Device::Cpu).unwrap();
        let d = |a: &Tensor, b: &Tensor| nn::scalar(&latent_perceptual_distance(&c, a, b).unwrap()).unwrap();
        assert_eq!(d(&z1, &z1), 0.0);
        assert!((d(&z1, &z2) - d(&z2, &z1)).abs() < 1e-6);
        let bumped = (&z1 + 1e-3).unwrap();
        assert!(d(&z1, &bumped) > 0.0);
    }

    #[test]
    fn cutout_zeroes_exactly_one_rectangle() {
        let z = Tensor::rand(0.5f32, 1.0, (1, 2, 8, 8), &Device::Cpu).unwrap();
        let r = CutoutRect { y0: 2, x0: 3, side: 4 };
        let out = cutout(&z, r).unwrap();
        let a: Vec<Vec<Vec<f32>>> = z.get(0).unwrap().to_vec3().unwrap();
        let b: Vec<Vec<Vec<f32>>> = out.get(0).unwrap().to_vec3().unwrap();
        for c in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    let inside = (2..6).contains(&y) && (3..7).contains(&x);
                    if inside {
                        assert_eq!(b[c][y][x], 0.0);
                    } else {
                        assert_eq!(b[c][y][x], a[c][y][x]);
                    }
                }
            }
        }
    }

    #[test]
    fn cutout_gradient_passes_outside() {
        let v = candle_core::Var::from_tensor(&Tensor::ones((1, 1, 4, 4), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let out = cutout(v.as_tensor(), CutoutRect { y0: 0, x0: 0, side: 2 }).unwrap();
        let g = out.sum_all().unwrap().backward().unwrap();
        let g: Vec<Vec<f32>> = g
            .get(v.as_tensor())
            .unwrap()
            .get(0)
            .unwrap()
            .get(0)
            .unwrap()
            .to_vec2()
            .unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(g[y][x], if y < 2 && x < 2 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let l = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        let v = nn::scalar(&cross_entropy(&l, &[0]).unwrap()).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fewer_than_two_classes_rejected() {
        let z = Tensor::zeros((2, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let cfg = CriticConfig::default();
        assert!(train_critic((&z, &[0, 0]), (&z, &[0, 0]), 1, &cfg, 0).is_err());
    }
}
