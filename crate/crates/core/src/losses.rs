//! The five attack objectives and the two stage combiners.
//!
//! Images are `[B, 3, H, W]` tensors in [0,1]; masks come as one `Mask` per
//! batch item. Every loss is a per-item value averaged over the batch.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backend::Autoencoder;
use crate::colorspace::{normalized_ab_tensor, normalized_l_tensor};
use crate::critic::{cross_entropy, latent_masks, latent_perceptual_distance, Critic};
use crate::detect::{adversarial_logit_selection, Detector};
use crate::error::{Error, Result};
use crate::maskops::{binarize, downsample_mask, Mask};
use crate::nn;

/// `[B, 1, H, W]` 0/1 tensor.
pub fn mask_batch(masks: &[&Mask], device: &Device, dtype: DType) -> Result<Tensor> {
    let ts = masks.iter().map(|m| m.to_tensor(device)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?.to_dtype(dtype)?)
}

fn check_nonempty(masks: &[&Mask]) -> Result<Vec<f64>> {
    masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if m.is_empty() {
                Err(Error::EmptyMask(format!("mask {i} of the batch is empty")))
            } else {
                Ok(m.count() as f64)
            }
        })
        .collect()
}

/// `mean_b (1 / sum m_b) * sum (a_b * m_b - b_b * m_b)^2` for channel maps.
fn masked_sq_mean(a: &Tensor, b: &Tensor, masks: &[&Mask]) -> Result<Tensor> {
    let counts = check_nonempty(masks)?;
    let (bsz, ..) = a.dims4()?;
    if counts.len() != bsz {
        return Err(Error::validation("one mask per batch item is required"));
    }
    let m = mask_batch(masks, a.device(), a.dtype())?;
    let d = (a.broadcast_mul(&m)? - b.broadcast_mul(&m)?)?;
    let per = d.sqr()?.flatten_from(1)?.sum(1)?;
    let inv =
        Tensor::from_vec(counts.iter().map(|c| 1.0 / c).collect::<Vec<_>>(), bsz, a.device())?.to_dtype(a.dtype())?;
    Ok((per * inv)?.mean_all()?)
}

/// Mean squared normalized-L difference over the mask.
pub fn struct_loss(x0: &Tensor, x_hat: &Tensor, masks: &[&Mask]) -> Result<Tensor> {
    if x0.dims() != x_hat.dims() {
        return Err(Error::validation("struct loss inputs differ in shape"));
    }
    masked_sq_mean(&normalized_l_tensor(x0)?, &normalized_l_tensor(x_hat)?, masks)
}

/// Squared normalized-AB difference over the mask, summed over both channels.
pub fn color_consistency_loss(x_stage1: &Tensor, x_stage2: &Tensor, masks: &[&Mask]) -> Result<Tensor> {
    if x_stage1.dims() != x_stage2.dims() {
        return Err(Error::validation("color loss inputs differ in shape"));
    }
    masked_sq_mean(
        &normalized_ab_tensor(x_stage1)?,
        &normalized_ab_tensor(x_stage2)?,
        masks,
    )
}

/// Mean background-class cross-entropy over every detector cell whose center
/// lies in the mask.
pub fn adversarial_loss(detector: &Detector, x_comp: &Tensor, masks: &[&Mask]) -> Result<Tensor> {
    let (rows, ys) = adversarial_logit_selection(detector, x_comp, masks)?;
    cross_entropy(&rows, &ys)
}

// ---------------------------------------------------------------------------
// Style and background

/// Region-membership masks for the three critic stages, `[B, 1, h_l, w_l]`.
///
/// Stage 0 is the latent-resolution block-mean mask binarized at 0.5; coarser
/// stages take a cell when any stage-0 cell under it is in the region.
pub fn stage_regions(masks: &[&Mask], factor: usize, device: &Device, dtype: DType) -> Result<Vec<Tensor>> {
    let mut r0 = Vec::with_capacity(masks.len());
    for (i, m) in masks.iter().enumerate() {
        let b = binarize(&downsample_mask(m, factor)?, 0.5);
        if b.is_empty() {
            return Err(Error::DegenerateRegion(format!(
                "mask {i} of the batch vanishes at latent resolution"
            )));
        }
        r0.push(b.to_tensor(device)?);
    }
    let r0 = Tensor::cat(&r0, 0)?.to_dtype(dtype)?;
    let (_, _, h, w) = r0.dims4()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::validation("latent size must be divisible by 4"));
    }
    Ok(vec![r0.clone(), nn::max_pool(&r0, 2)?, nn::max_pool(&r0, 4)?])
}

/// Per-stage region means of the critic features, each `[B, C_l]`.
pub fn region_means(critic: &Critic, z: &Tensor, regions: &[Tensor]) -> Result<Vec<Tensor>> {
    let feats = critic.features(z)?;
    critic
        .loss_stages()
        .iter()
        .map(|&l| {
            let r = &regions[l];
            let s = feats[l].broadcast_mul(r)?.sum(3)?.sum(2)?;
            let n = r.sum(3)?.sum(2)?;
            Ok(s.broadcast_div(&n)?)
        })
        .collect()
}

/// Masked latent and stage regions for `x * m`.
pub fn masked_latent_and_regions(ae: &Autoencoder, x: &Tensor, masks: &[&Mask]) -> Result<(Tensor, Vec<Tensor>)> {
    let (dev, dt) = (x.device(), x.dtype());
    let m = mask_batch(masks, dev, dt)?;
    let z = ae.encode(&x.broadcast_mul(&m)?)?;
    let f = ae.shape().factor;
    let z = z.broadcast_mul(&latent_masks(masks, f, dev, dt)?)?;
    Ok((z, stage_regions(masks, f, dev, dt)?))
}

/// Reference side of the style loss; independent of the trained model.
pub fn style_reference(critic: &Critic, ae: &Autoencoder, x_s: &Tensor, m_s: &[&Mask]) -> Result<Vec<Tensor>> {
    let (z, regions) = masked_latent_and_regions(ae, x_s, m_s)?;
    Ok(region_means(critic, &z, &regions)?
        .into_iter()
        .map(|t| t.detach())
        .collect())
}

/// Style loss given precomputed reference region means.
pub fn style_loss_with_reference(
    critic: &Critic,
    ae: &Autoencoder,
    x_hat: &Tensor,
    m_x: &[&Mask],
    reference: &[Tensor],
) -> Result<Tensor> {
    let (z, regions) = masked_latent_and_regions(ae, x_hat, m_x)?;
    style_loss_latent(critic, &z, &regions, reference)
}

/// Sum over stages of the L1 distance between region-mean features,
/// averaged over the batch. `z_masked` must already be masked.
pub fn style_loss_latent(
    critic: &Critic,
    z_masked: &Tensor,
    regions: &[Tensor],
    reference: &[Tensor],
) -> Result<Tensor> {
    let ours = region_means(critic, z_masked, regions)?;
    if ours.len() != reference.len() {
        return Err(Error::validation("reference has a different number of stages"));
    }
    let mut total: Option<Tensor> = None;
    for (a, b) in ours.iter().zip(reference) {
        let d = (a - b)?.abs()?.sum(1)?.mean_all()?;
        total = Some(match total {
            None => d,
            Some(t) => (t + d)?,
        });
    }
    total.ok_or_else(|| Error::validation("no critic stages selected"))
}

/// L1 distance between region-averaged critic features of the masked
/// vehicle latent and the masked reference latent.
pub fn style_loss(
    critic: &Critic,
    ae: &Autoencoder,
    x_hat: &Tensor,
    m_x: &[&Mask],
    x_s: &Tensor,
    m_s: &[&Mask],
) -> Result<Tensor> {
    let reference = style_reference(critic, ae, x_s, m_s)?;
    style_loss_with_reference(critic, ae, x_hat, m_x, &reference)
}

/// Background latent `E(x * (1 - m)) * (1 - m_down)`.
pub fn background_latent(ae: &Autoencoder, x: &Tensor, masks: &[&Mask]) -> Result<Tensor> {
    let comp: Vec<Mask> = masks.iter().map(|m| m.complement()).collect();
    for (i, c) in comp.iter().enumerate() {
        if c.is_empty() {
            return Err(Error::DegenerateRegion(format!(
                "vehicle mask {i} covers the whole frame; no background remains"
            )));
        }
    }
    let refs: Vec<&Mask> = comp.iter().collect();
    let (dev, dt) = (x.device(), x.dtype());
    let m = mask_batch(&refs, dev, dt)?;
    let z = ae.encode(&x.broadcast_mul(&m)?)?;
    Ok(z.broadcast_mul(&latent_masks(&refs, ae.shape().factor, dev, dt)?)?)
}

/// Background loss against a precomputed target background latent.
pub fn background_loss_with_target(
    critic: &Critic,
    ae: &Autoencoder,
    target: &Tensor,
    x_hat: &Tensor,
    masks: &[&Mask],
) -> Result<Tensor> {
    latent_perceptual_distance(critic, target, &background_latent(ae, x_hat, masks)?)
}

/// Latent perceptual distance between the masked background latents.
pub fn background_loss(
    critic: &Critic,
    ae: &Autoencoder,
    x0: &Tensor,
    x_hat: &Tensor,
    masks: &[&Mask],
) -> Result<Tensor> {
    let target = background_latent(ae, x0, masks)?;
    background_loss_with_target(critic, ae, &target, x_hat, masks)
}

// ---------------------------------------------------------------------------
// Combiners

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Coefficient on the structure term.
    pub structure: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            structure: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lambda: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.structure, self.alpha, self.beta, self.gamma, self.lambda];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::validation("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Available loss terms of one step. Absent terms must carry zero weight.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub structure: Option<f64>,
    pub style: Option<f64>,
    pub background: Option<f64>,
    pub adversarial: Option<f64>,
    pub color: Option<f64>,
}

fn weighted(term: Option<f64>, w: f64, name: &str) -> Result<f64> {
    match term {
        Some(v) => Ok(w * v),
        None if w == 0.0 => Ok(0.0),
        None => Err(Error::validation(format!("{name} term is missing but weighted {w}"))),
    }
}

/// `structure * L_struct + alpha * L_s + beta * L_b`.
pub fn combine_stage1(t: &LossTerms, w: &LossWeights) -> Result<f64> {
    if t.adversarial.is_some() || t.color.is_some() {
        return Err(Error::validation("stage-1 objective has no adversarial or color term"));
    }
    Ok(weighted(t.structure, w.structure, "structure")?
        + weighted(t.style, w.alpha, "style")?
        + weighted(t.background, w.beta, "background")?)
}

/// Stage-1 objective plus `lambda * L_adv + gamma * L_c`.
pub fn combine_stage2(t: &LossTerms, w: &LossWeights) -> Result<f64> {
    let base = LossTerms {
        adversarial: None,
        color: None,
        ..*t
    };
    Ok(combine_stage1(&base, w)?
        + weighted(t.adversarial, w.lambda, "adversarial")?
        + weighted(t.color, w.gamma, "color")?)
}

/// One training step's values, streamed as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub t: f64,
    pub terms: LossTerms,
    pub weights: LossWeights,
    pub total: f64,
}
