//! Generative stack: pixel autoencoder, noise schedules, the conditional
//! latent denoiser, one-step clean-latent estimation and the sampler.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::colorspace::{Grid, RgbImage};
use crate::error::{Error, Result};
use crate::maskops::Mask;
use crate::nn::{self, Adam, Conv, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Diffusion,
    Rectflow,
}

/// What the network's prediction means under rectified flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowTarget {
    /// `z0 - eps`; pairs with `z0 = z_t + t * pred`.
    DataMinusNoise,
    /// `eps - z0`; pairs with `z0 = z_t - t * pred`.
    NoiseMinusData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub mode: BackendMode,
    pub flow_target: FlowTarget,
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Spatial downsampling of the autoencoder (power of two).
    pub factor: usize,
    pub latent_channels: usize,
    pub ae_channels: usize,
    pub ae_epochs: usize,
    pub ae_batch_size: usize,
    pub ae_lr: f64,
    pub denoiser_channels: usize,
    pub time_dim: usize,
    /// Clean-latent regression steps of the denoiser prior; 0 starts every
    /// stage from random initialization.
    pub prior_iterations: usize,
    pub prior_batch_size: usize,
    pub prior_lr: f64,
    /// Defaults to 30 (diffusion) or 28 (rectified flow) when absent.
    pub sampling_steps: Option<usize>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            mode: BackendMode::Diffusion,
            flow_target: FlowTarget::DataMinusNoise,
            train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            factor: 4,
            latent_channels: 4,
            ae_channels: 32,
            ae_epochs: 12,
            ae_batch_size: 16,
            ae_lr: 2e-3,
            denoiser_channels: 32,
            time_dim: 32,
            prior_iterations: 3000,
            prior_batch_size: 16,
            prior_lr: 1e-3,
            sampling_steps: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.factor.is_power_of_two() || self.factor < 2 {
            return Err(Error::validation("backend.factor must be a power of two >= 2"));
        }
        if self.latent_channels == 0 || self.ae_channels == 0 || self.denoiser_channels == 0 {
            return Err(Error::validation("backend channel counts must be positive"));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::validation("backend.time_dim must be even and >= 2"));
        }
        if self.prior_batch_size == 0 || !(self.prior_lr.is_finite() && self.prior_lr > 0.0) {
            return Err(Error::validation(
                "backend prior batch size and learning rate must be positive",
            ));
        }
        if self.sampling_steps == Some(0) {
            return Err(Error::validation("backend.sampling_steps must be >= 1"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.sampling_steps.unwrap_or(match self.mode {
            BackendMode::Diffusion => 30,
            BackendMode::Rectflow => 28,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match self.mode {
            BackendMode::Diffusion => NoiseSchedule::linear(self.train_timesteps, self.beta_start, self.beta_end),
            BackendMode::Rectflow => Ok(NoiseSchedule::rectflow(self.flow_target)),
        }
    }
}

// ---------------------------------------------------------------------------
// Noise schedule

/// Diffusion timesteps are integer indices `0..T`; rectified-flow times are
/// reals in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSchedule {
    Diffusion { alpha_bar: Vec<f64> },
    Rectflow { target: FlowTarget },
}

/// Smallest flow time at which the network output is converted to a prediction.
pub const MIN_FLOW_T: f64 = 1e-4;

impl NoiseSchedule {
    /// Validated `alpha_bar`: strictly decreasing, every value in (0, 1].
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::validation("alpha_bar must be nonempty"));
        }
        if alpha_bar.iter().any(|a| !(a.is_finite() && *a > 0.0 && *a <= 1.0)) {
            return Err(Error::validation("alpha_bar values must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::validation("alpha_bar must be strictly decreasing"));
        }
        Ok(Self::Diffusion { alpha_bar })
    }

    /// Linear beta schedule over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::validation("diffusion needs at least 2 timesteps"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::validation("betas must satisfy 0 < start <= end < 1"));
        }
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|i| {
                let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn rectflow(target: FlowTarget) -> Self {
        Self::Rectflow { target }
    }

    pub fn mode(&self) -> BackendMode {
        match self {
            Self::Diffusion { .. } => BackendMode::Diffusion,
            Self::Rectflow { .. } => BackendMode::Rectflow,
        }
    }

    pub fn alpha_bar(&self) -> Option<&[f64]> {
        match self {
            Self::Diffusion { alpha_bar } => Some(alpha_bar),
            Self::Rectflow { .. } => None,
        }
    }

    /// `(a, s)` with `z_t = a * z0 + s * eps`.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        match self {
            Self::Diffusion { alpha_bar } => {
                let i = diffusion_index(alpha_bar.len(), t)?;
                let ab = alpha_bar[i];
                Ok((ab.sqrt(), (1.0 - ab).sqrt()))
            }
            Self::Rectflow { .. } => {
                check_flow_t(t)?;
                Ok((1.0 - t, t))
            }
        }
    }

    /// Value fed to the time embedding, on a common 0..1000 scale.
    pub fn embedding_time(&self, t: f64) -> f64 {
        match self {
            Self::Diffusion { alpha_bar } => t * 1000.0 / alpha_bar.len() as f64,
            Self::Rectflow { .. } => t * 1000.0,
        }
    }

    /// Skip weight on `z_t` in the clean-latent head: the linear least-squares
    /// estimate of `z0` from `z_t` for unit-variance data.
    pub fn skip_weight(&self, t: f64) -> Result<f64> {
        let (a, s) = self.coefficients(t)?;
        Ok(a / (a * a + s * s))
    }

    /// The quantity the network prediction stands for at `(z0, eps, t)`.
    pub fn target(&self, z0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
        match self {
            Self::Diffusion { alpha_bar } => {
                diffusion_index(alpha_bar.len(), t)?;
                Ok(eps.clone())
            }
            Self::Rectflow { target } => {
                check_flow_t(t)?;
                Ok(match target {
                    FlowTarget::DataMinusNoise => (z0 - eps)?,
                    FlowTarget::NoiseMinusData => (eps - z0)?,
                })
            }
        }
    }

    /// Converts a clean-latent estimate `x0` at `(z_t, t)` into the prediction
    /// whose one-step estimate is exactly `x0`.
    pub fn prediction_from_x0(&self, zt: &Tensor, t: f64, x0: &Tensor) -> Result<Tensor> {
        match self {
            Self::Diffusion { .. } => {
                let (a, s) = self.coefficients(t)?;
                if s == 0.0 {
                    return Err(Error::Numerical("noise coefficient is zero".into()));
                }
                Ok((zt - x0.affine(a, 0.0)?)?.affine(1.0 / s, 0.0)?)
            }
            Self::Rectflow { target } => {
                check_flow_t(t)?;
                let inv = 1.0 / t.max(MIN_FLOW_T);
                Ok(match target {
                    FlowTarget::DataMinusNoise => (x0 - zt)?.affine(inv, 0.0)?,
                    FlowTarget::NoiseMinusData => (zt - x0)?.affine(inv, 0.0)?,
                })
            }
        }
    }

    /// Evenly spaced sampling times, from most to least noisy.
    pub fn sampling_times(&self, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::validation("steps must be >= 1"));
        }
        Ok(match self {
            Self::Diffusion { alpha_bar } => {
                let last = (alpha_bar.len() - 1) as f64;
                (0..steps)
                    .map(|i| {
                        if steps == 1 {
                            last
                        } else {
                            (last * (1.0 - i as f64 / (steps - 1) as f64)).round()
                        }
                    })
                    .collect()
            }
            Self::Rectflow { .. } => (0..steps).map(|i| 1.0 - i as f64 / steps as f64).collect(),
        })
    }
}

fn diffusion_index(len: usize, t: f64) -> Result<usize> {
    if !(t.is_finite() && t >= 0.0 && t.fract() == 0.0 && (t as usize) < len) {
        return Err(Error::validation(format!(
            "diffusion timestep {t} is not an integer in [0, {len})"
        )));
    }
    Ok(t as usize)
}

fn check_flow_t(t: f64) -> Result<()> {
    if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
        return Err(Error::validation(format!("flow time {t} is outside [0, 1]")));
    }
    Ok(())
}

/// Diffusion: `sqrt(ab) z0 + sqrt(1 - ab) eps`; rectified flow: `(1 - t) z0 + t eps`.
pub fn forward_noise(z0: &Tensor, t: f64, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::validation("z0 and eps shapes differ"));
    }
    let (a, s) = sched.coefficients(t)?;
    Ok((z0.affine(a, 0.0)? + eps.affine(s, 0.0)?)?)
}

/// Closed-form clean latent from `z_t` and the network prediction.
pub fn one_step_estimate(zt: &Tensor, t: f64, pred: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if zt.dims() != pred.dims() {
        return Err(Error::validation("z_t and prediction shapes differ"));
    }
    match sched {
        NoiseSchedule::Diffusion { .. } => {
            let (a, s) = sched.coefficients(t)?;
            if a == 0.0 {
                return Err(Error::Numerical(
                    "alpha_bar is zero: one-step estimate is singular".into(),
                ));
            }
            Ok((zt - pred.affine(s, 0.0)?)?.affine(1.0 / a, 0.0)?)
        }
        NoiseSchedule::Rectflow { target } => {
            check_flow_t(t)?;
            Ok(match target {
                FlowTarget::DataMinusNoise => (zt + pred.affine(t, 0.0)?)?,
                FlowTarget::NoiseMinusData => (zt - pred.affine(t, 0.0)?)?,
            })
        }
    }
}

/// Standard normal tensor drawn from a seeded stream.
pub fn gaussian(shape: &[usize], seed: u64, stream: u64, device: &Device, dtype: DType) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

// ---------------------------------------------------------------------------
// Autoencoder

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeShape {
    pub image_size: usize,
    pub factor: usize,
    pub latent_channels: usize,
    pub channels: usize,
}

impl AeShape {
    pub fn latent_size(&self) -> usize {
        self.image_size / self.factor
    }

    fn levels(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AeMeta {
    shape: AeShape,
    latent_scale: f64,
}

/// Convolutional image autoencoder. Latents are rescaled to roughly unit
/// variance by `latent_scale`.
pub struct Autoencoder {
    shape: AeShape,
    latent_scale: f64,
    enc_in: Conv,
    enc_down: Vec<(Conv, Conv)>,
    enc_out: Conv,
    dec_in: Conv,
    dec_mid: Conv,
    dec_up: Vec<(Conv, Conv)>,
    dec_out: Conv,
    store: ParamStore,
}

pub const AE_KIND: &str = "autoencoder";

impl Autoencoder {
    pub fn build(mut store: ParamStore, shape: AeShape, latent_scale: f64) -> Result<Self> {
        if !shape.image_size.is_multiple_of(shape.factor) || !shape.factor.is_power_of_two() {
            return Err(Error::validation(format!(
                "image size {} is not divisible by factor {}",
                shape.image_size, shape.factor
            )));
        }
        let c = shape.channels;
        let ps = &mut store;
        let enc_in = Conv::new(ps, "enc.in", 3, c, 3, 1)?;
        let enc_down = (0..shape.levels())
            .map(|i| {
                Ok((
                    Conv::new(ps, &format!("enc.down{i}.a"), c, c, 3, 2)?,
                    Conv::new(ps, &format!("enc.down{i}.b"), c, c, 3, 1)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_out = Conv::new(ps, "enc.out", c, shape.latent_channels, 1, 1)?;
        let dec_in = Conv::new(ps, "dec.in", shape.latent_channels, c, 3, 1)?;
        let dec_mid = Conv::new(ps, "dec.mid", c, c, 3, 1)?;
        let dec_up = (0..shape.levels())
            .map(|i| {
                Ok((
                    Conv::new(ps, &format!("dec.up{i}.a"), c, c, 3, 1)?,
                    Conv::new(ps, &format!("dec.up{i}.b"), c, c, 3, 1)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_out = Conv::new(ps, "dec.out", c, 3, 3, 1)?;
        Ok(Self {
            shape,
            latent_scale,
            enc_in,
            enc_down,
            enc_out,
            dec_in,
            dec_mid,
            dec_up,
            dec_out,
            store,
        })
    }

    pub fn init(shape: AeShape, seed: u64) -> Result<Self> {
        Self::build(ParamStore::init(seed), shape, 1.0)
    }

    pub fn shape(&self) -> AeShape {
        self.shape
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Self::build(self.store.copy_as(dtype)?, self.shape, self.latent_scale)
    }

    /// Copy that is constant under backpropagation.
    pub fn frozen(&self) -> Result<Self> {
        Self::build(self.store.frozen()?, self.shape, self.latent_scale)
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.shape.image_size || w != self.shape.image_size {
            return Err(Error::validation(format!(
                "autoencoder expects [B, 3, {s}, {s}], got {:?}",
                x.dims(),
                s = self.shape.image_size
            )));
        }
        Ok(())
    }

    /// `[B, 3, H, W]` -> `[B, C, H/f, W/f]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_image(x)?;
        let mut h = nn::silu(&self.enc_in.forward(x)?)?;
        for (a, b) in &self.enc_down {
            h = nn::silu(&a.forward(&h)?)?;
            h = nn::silu(&b.forward(&h)?)?;
        }
        Ok(self.enc_out.forward(&h)?.affine(self.latent_scale, 0.0)?)
    }

    /// Unclamped reconstruction, used as the training target path.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = z.dims4()?;
        let ls = self.shape.latent_size();
        if c != self.shape.latent_channels || h != ls || w != ls {
            return Err(Error::validation(format!(
                "decoder expects [B, {}, {ls}, {ls}], got {:?}",
                self.shape.latent_channels,
                z.dims()
            )));
        }
        let z = z.affine(1.0 / self.latent_scale, 0.0)?;
        let mut h = nn::silu(&self.dec_in.forward(&z)?)?;
        h = nn::silu(&self.dec_mid.forward(&h)?)?;
        for (a, b) in &self.dec_up {
            h = nn::upsample2(&h)?;
            h = nn::silu(&a.forward(&h)?)?;
            h = nn::silu(&b.forward(&h)?)?;
        }
        self.dec_out.forward(&h)
    }

    /// Reconstruction clamped to [0, 1].
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(z)?.clamp(0.0, 1.0)?)
    }

    pub fn encode_image(&self, img: &RgbImage) -> Result<Tensor> {
        self.encode(&img.to_tensor(self.device())?.to_dtype(self.dtype())?)
    }

    pub fn decode_image(&self, z: &Tensor) -> Result<RgbImage> {
        let z = if z.rank() == 3 { z.unsqueeze(0)? } else { z.clone() };
        RgbImage::from_tensor(&self.decode(&z)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = AeMeta {
            shape: self.shape,
            latent_scale: self.latent_scale,
        };
        self.store.save(dir, AE_KIND, &serde_json::to_value(meta)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, cfg) = ParamStore::load(dir, AE_KIND)?;
        let meta: AeMeta = serde_json::from_value(cfg).map_err(|e| Error::load(dir, e))?;
        Self::build(store, meta.shape, meta.latent_scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeReport {
    pub final_train_mse: f64,
    pub heldout_psnr_db: f64,
    pub latent_scale: f64,
}

/// Stacks images into one `[B, 3, H, W]` f32 tensor.
pub fn image_batch(images: &[&RgbImage], device: &Device) -> Result<Tensor> {
    let ts = images.iter().map(|i| i.to_tensor(device)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = nn::scalar(&(a - b)?.sqr()?.mean_all()?)?;
    Ok(10.0 * (1.0 / mse.max(1e-12)).log10())
}

/// Trains an autoencoder by pixel MSE, then fixes the latent scale so that
/// training latents have unit standard deviation.
pub fn train_autoencoder(
    train: &[RgbImage],
    heldout: &[RgbImage],
    cfg: &BackendConfig,
    seed: u64,
) -> Result<(Autoencoder, AeReport)> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::validation("autoencoder training set is empty"))?;
    let shape = AeShape {
        image_size: first.height(),
        factor: cfg.factor,
        latent_channels: cfg.latent_channels,
        channels: cfg.ae_channels,
    };
    let ae = Autoencoder::init(shape, seed)?;
    let dev = ae.device().clone();
    let mut opt = Adam::new(ae.store().vars(), cfg.ae_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let bs = cfg.ae_batch_size.max(1);
    let total_steps = cfg.ae_epochs * train.len().div_ceil(bs);
    let mut step = 0;
    let mut last = f64::NAN;
    for _ in 0..cfg.ae_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            // cosine decay to 5% of the base rate
            let p = step as f64 / total_steps.max(1) as f64;
            opt.lr = cfg.ae_lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()));
            let imgs: Vec<&RgbImage> = chunk.iter().map(|&i| &train[i]).collect();
            let x = image_batch(&imgs, &dev)?;
            let loss = (ae.decode_raw(&ae.encode(&x)?)? - &x)?.sqr()?.mean_all()?;
            last = nn::scalar(&loss)?;
            if !last.is_finite() {
                return Err(Error::Numerical(format!("autoencoder loss is {last} at step {step}")));
            }
            opt.backward_step(&loss)?;
            step += 1;
        }
    }
    let mut sq = 0.0;
    let mut n = 0usize;
    for chunk in train.chunks(64) {
        let imgs: Vec<&RgbImage> = chunk.iter().collect();
        let z = ae.encode(&image_batch(&imgs, &dev)?)?;
        sq += nn::scalar(&z.sqr()?.sum_all()?)?;
        n += z.elem_count();
    }
    let std = (sq / n as f64).sqrt();
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::Numerical("degenerate latent statistics".into()));
    }
    let ae = Autoencoder::build(ae.store.deep_copy()?, shape, 1.0 / std)?;
    let heldout_psnr_db = mean_psnr(&ae, heldout)?;
    Ok((
        ae,
        AeReport {
            final_train_mse: last,
            heldout_psnr_db,
            latent_scale: 1.0 / std,
        },
    ))
}

/// Mean per-image PSNR of clamped reconstructions.
pub fn mean_psnr(ae: &Autoencoder, images: &[RgbImage]) -> Result<f64> {
    if images.is_empty() {
        return Ok(f64::NAN);
    }
    let dev = ae.device().clone();
    let mut total = 0.0;
    for chunk in images.chunks(64) {
        let imgs: Vec<&RgbImage> = chunk.iter().collect();
        let x = image_batch(&imgs, &dev)?;
        let y = ae.decode(&ae.encode(&x)?)?;
        for i in 0..chunk.len() {
            total += psnr(&x.get(i)?, &y.get(i)?)?;
        }
    }
    Ok(total / images.len() as f64)
}

// ---------------------------------------------------------------------------
// Conditioning

/// Per-image conditioning maps at pixel resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// Normalized L channel, H x W x 1.
    pub l_channel: Grid,
    /// Reference image already multiplied by `ref_mask`.
    pub ref_area: RgbImage,
    pub ref_mask: Mask,
    pub vehicle_mask: Mask,
    /// Vehicle-free background; present only for the image-level strategy.
    pub background: Option<RgbImage>,
}

/// Channel count of the latent-resolution conditioning stack.
pub fn condition_channels(factor: usize, with_background: bool) -> usize {
    let f2 = factor * factor;
    2 * f2 + 3 + 1 + 3 + if with_background { 3 * f2 } else { 0 }
}

/// Resamples conditioning to latent resolution, `[B, Cc, H/f, W/f]`.
///
/// L channel, vehicle mask and background are folded losslessly into
/// channels (space-to-depth); the reference area and its mask are block
/// averaged, and the mean reference color is broadcast as three constant planes.
pub fn condition_tensor(
    conds: &[&Conditioning],
    factor: usize,
    with_background: bool,
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let first = conds
        .first()
        .ok_or_else(|| Error::validation("empty conditioning batch"))?;
    let (hh, ww) = (first.l_channel.height, first.l_channel.width);
    if hh % factor != 0 || ww % factor != 0 {
        return Err(Error::validation(
            "conditioning size is not divisible by the latent factor",
        ));
    }
    let (h, w) = (hh / factor, ww / factor);
    let cc = condition_channels(factor, with_background);
    let plane = h * w;
    let mut data = vec![0f32; conds.len() * cc * plane];
    for (bi, c) in conds.iter().enumerate() {
        if c.l_channel.height != hh
            || c.l_channel.width != ww
            || c.vehicle_mask.height() != hh
            || c.ref_area.height() != hh
            || c.ref_mask.height() != hh
        {
            return Err(Error::validation("conditioning maps disagree in size"));
        }
        if c.background.is_some() != with_background {
            return Err(Error::validation(
                "background conditioning must be present exactly for the image-level strategy",
            ));
        }
        let out = &mut data[bi * cc * plane..(bi + 1) * cc * plane];
        let mut ch = 0;
        let s2d = |out: &mut [f32], ch: &mut usize, get: &dyn Fn(usize, usize) -> f32| {
            for dy in 0..factor {
                for dx in 0..factor {
                    let dst = &mut out[*ch * plane..(*ch + 1) * plane];
                    for y in 0..h {
                        for x in 0..w {
                            dst[y * w + x] = get(y * factor + dy, x * factor + dx);
                        }
                    }
                    *ch += 1;
                }
            }
        };
        s2d(out, &mut ch, &|y, x| c.l_channel.at(y, x, 0));
        s2d(out, &mut ch, &|y, x| c.vehicle_mask.get(y, x) as u8 as f32);
        let inv = 1.0 / (factor * factor) as f32;
        for k in 0..3 {
            let dst = &mut out[(ch + k) * plane..(ch + k + 1) * plane];
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += c.ref_area.pixel(y * factor + dy, x * factor + dx)[k];
                        }
                    }
                    dst[y * w + x] = s * inv;
                }
            }
        }
        ch += 3;
        {
            let dst = &mut out[ch * plane..(ch + 1) * plane];
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += c.ref_mask.get(y * factor + dy, x * factor + dx) as u8 as f32;
                        }
                    }
                    dst[y * w + x] = s * inv;
                }
            }
            ch += 1;
        }
        let mean = mean_color(&c.ref_area, &c.ref_mask);
        for k in 0..3 {
            out[(ch + k) * plane..(ch + k + 1) * plane].fill(mean[k]);
        }
        ch += 3;
        if let Some(bg) = &c.background {
            for k in 0..3 {
                s2d(out, &mut ch, &|y, x| bg.pixel(y, x)[k]);
            }
        }
        debug_assert_eq!(ch, cc);
    }
    Ok(Tensor::from_vec(data, (conds.len(), cc, h, w), device)?.to_dtype(dtype)?)
}

/// Mean color over the mask; mid-gray when the mask is empty.
pub fn mean_color(img: &RgbImage, m: &Mask) -> [f32; 3] {
    let mut s = [0f64; 3];
    let mut n = 0usize;
    for y in 0..img.height() {
        for x in 0..img.width() {
            if m.get(y, x) {
                let p = img.pixel(y, x);
                for k in 0..3 {
                    s[k] += p[k] as f64;
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        return [0.5; 3];
    }
    s.map(|v| (v / n as f64) as f32)
}

// ---------------------------------------------------------------------------
// Denoiser

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub factor: usize,
    pub with_background: bool,
    pub channels: usize,
    pub time_dim: usize,
}

/// Two-level conditional U-Net over latents. Conditioning enters by channel
/// concatenation; time enters as a per-channel shift at both levels.
///
/// The head estimates the clean latent as `skip(t) * z_t + net(...)`; the
/// returned prediction is that estimate re-expressed in the schedule's
/// prediction convention, so its one-step estimate recovers it exactly.
pub struct Denoiser {
    shape: DenoiserShape,
    in_a: Conv,
    in_b: Conv,
    down_a: Conv,
    down_b: Conv,
    mid: Conv,
    up_a: Conv,
    up_b: Conv,
    out: Conv,
    t_hi: Linear,
    t_lo: Linear,
    store: ParamStore,
}

pub const DENOISER_KIND: &str = "denoiser";

impl Denoiser {
    pub fn build(mut store: ParamStore, shape: DenoiserShape) -> Result<Self> {
        if !shape.latent_size.is_multiple_of(2) {
            return Err(Error::validation("denoiser needs an even latent size"));
        }
        let c = shape.channels;
        let cin = shape.latent_channels + condition_channels(shape.factor, shape.with_background);
        let ps = &mut store;
        Ok(Self {
            in_a: Conv::new(ps, "den.in.a", cin, c, 3, 1)?,
            in_b: Conv::new(ps, "den.in.b", c, c, 3, 1)?,
            down_a: Conv::new(ps, "den.down.a", c, 2 * c, 3, 2)?,
            down_b: Conv::new(ps, "den.down.b", 2 * c, 2 * c, 3, 1)?,
            mid: Conv::new(ps, "den.mid", 2 * c, 2 * c, 3, 1)?,
            up_a: Conv::new(ps, "den.up.a", 3 * c, c, 3, 1)?,
            up_b: Conv::new(ps, "den.up.b", c, c, 3, 1)?,
            out: Conv::zeroed(ps, "den.out", c, shape.latent_channels, 3)?,
            t_hi: Linear::new(ps, "den.t.hi", shape.time_dim, c)?,
            t_lo: Linear::new(ps, "den.t.lo", shape.time_dim, 2 * c)?,
            shape,
            store,
        })
    }

    pub fn init(shape: DenoiserShape, seed: u64) -> Result<Self> {
        Self::build(ParamStore::init(seed), shape)
    }

    pub fn shape(&self) -> DenoiserShape {
        self.shape
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Self::build(self.store.copy_as(dtype)?, self.shape)
    }

    /// Independent copy with identical parameters.
    pub fn deep_copy(&self) -> Result<Self> {
        Self::build(self.store.deep_copy()?, self.shape)
    }

    /// Independent copy that is constant under backpropagation.
    pub fn frozen(&self) -> Result<Self> {
        Self::build(self.store.frozen()?, self.shape)
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let cfg = serde_json::json!({ "shape": self.shape, "run": extra });
        self.store.save(dir, DENOISER_KIND, &cfg)
    }

    /// Loads a checkpoint; returns the model and the `run` metadata saved with it.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, cfg) = ParamStore::load(dir, DENOISER_KIND)?;
        let shape: DenoiserShape = serde_json::from_value(cfg["shape"].clone()).map_err(|e| Error::load(dir, e))?;
        Ok((Self::build(store, shape)?, cfg["run"].clone()))
    }

    /// Clean-latent estimate at `(z_t, t)`.
    pub fn clean_estimate(&self, zt: &Tensor, t: f64, cond: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
        let (b, c, h, w) = zt.dims4()?;
        let s = self.shape;
        if c != s.latent_channels || h != s.latent_size || w != s.latent_size {
            return Err(Error::validation(format!(
                "denoiser expects latents [B, {}, {n}, {n}], got {:?}",
                s.latent_channels,
                zt.dims(),
                n = s.latent_size
            )));
        }
        let cc = condition_channels(s.factor, s.with_background);
        if cond.dims() != [b, cc, h, w] {
            return Err(Error::validation(format!(
                "conditioning must be [{b}, {cc}, {h}, {w}], got {:?}",
                cond.dims()
            )));
        }
        let emb = nn::timestep_embedding(&vec![sched.embedding_time(t); b], s.time_dim, zt.device(), zt.dtype())?;
        let th = self.t_hi.forward(&emb)?.reshape((b, s.channels, 1, 1))?;
        let tl = self.t_lo.forward(&emb)?.reshape((b, 2 * s.channels, 1, 1))?;
        let x = Tensor::cat(&[zt, cond], 1)?;
        let h1 = nn::silu(&self.in_a.forward(&x)?.broadcast_add(&th)?)?;
        let h1 = nn::silu(&self.in_b.forward(&h1)?)?;
        let h2 = nn::silu(&self.down_a.forward(&h1)?.broadcast_add(&tl)?)?;
        let h2 = nn::silu(&self.down_b.forward(&h2)?)?;
        let h2 = nn::silu(&self.mid.forward(&h2)?)?;
        let u = Tensor::cat(&[&nn::upsample2(&h2)?, &h1], 1)?;
        let u = nn::silu(&self.up_a.forward(&u)?)?;
        let u = nn::silu(&self.up_b.forward(&u)?)?;
        let delta = self.out.forward(&u)?;
        Ok((zt.affine(sched.skip_weight(t)?, 0.0)? + delta)?)
    }
}

/// Network prediction at `(z_t, t)` under the schedule's convention.
pub fn denoise(model: &Denoiser, zt: &Tensor, t: f64, cond: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let x0 = model.clean_estimate(zt, t, cond, sched)?;
    sched.prediction_from_x0(zt, t, &x0)
}

/// Deterministic multi-step sampling; returns the final clean latent.
///
/// Diffusion uses DDIM with eta = 0 and a clean final step; rectified flow
/// uses uniform-time Euler steps. With one step both reduce to the one-step
/// estimate at the initial time.
pub fn sample_latents(
    model: &Denoiser,
    sched: &NoiseSchedule,
    cond: &Tensor,
    steps: usize,
    noise: &Tensor,
) -> Result<Tensor> {
    let times = sched.sampling_times(steps)?;
    let mut z = noise.clone();
    for (i, &t) in times.iter().enumerate() {
        let pred = denoise(model, &z, t, cond, sched)?;
        match sched {
            NoiseSchedule::Diffusion { alpha_bar } => {
                let x0 = one_step_estimate(&z, t, &pred, sched)?;
                z = match times.get(i + 1) {
                    None => x0,
                    Some(&tn) => {
                        let ab = alpha_bar[tn as usize];
                        (x0.affine(ab.sqrt(), 0.0)? + pred.affine((1.0 - ab).sqrt(), 0.0)?)?
                    }
                };
            }
            NoiseSchedule::Rectflow { target } => {
                let dt = 1.0 / steps as f64;
                let sign = match target {
                    FlowTarget::DataMinusNoise => 1.0,
                    FlowTarget::NoiseMinusData => -1.0,
                };
                z = (z + pred.affine(sign * dt, 0.0)?)?;
            }
        }
    }
    Ok(z.detach())
}

/// Samples one image per conditioning; noise for item `i` is seeded by `seeds[i]`.
pub fn sample_batch(
    model: &Denoiser,
    ae: &Autoencoder,
    sched: &NoiseSchedule,
    conds: &[&Conditioning],
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<RgbImage>> {
    if steps == 0 {
        return Err(Error::validation("steps must be >= 1"));
    }
    if conds.len() != seeds.len() {
        return Err(Error::validation("one seed per conditioning is required"));
    }
    let s = model.shape();
    let cond = condition_tensor(conds, s.factor, s.with_background, model.device(), model.dtype())?;
    let noise = seeds
        .iter()
        .map(|&sd| {
            gaussian(
                &[1, s.latent_channels, s.latent_size, s.latent_size],
                sd,
                7,
                model.device(),
                model.dtype(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let z = sample_latents(model, sched, &cond, steps, &Tensor::cat(&noise, 0)?)?;
    let x = ae.decode(&z)?;
    (0..conds.len()).map(|i| RgbImage::from_tensor(&x.get(i)?)).collect()
}

pub fn sample(
    model: &Denoiser,
    ae: &Autoencoder,
    sched: &NoiseSchedule,
    cond: &Conditioning,
    steps: usize,
    seed: u64,
) -> Result<RgbImage> {
    Ok(sample_batch(model, ae, sched, &[cond], steps, &[seed])?.remove(0))
}
