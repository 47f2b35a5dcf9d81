//! Style exemplar selection for the image-level and scene-level strategies,
//! and assembly of the per-image conditioning bundle.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::Conditioning;
use crate::colorspace::{normalized_l, RgbImage};
use crate::error::{Error, Result};
use crate::maskops::{annulus, apply_mask, Mask};
use crate::synthcorpus::{gen_concept_exemplar, GenParams, SceneLabel, SceneRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyMode {
    ImageLevel,
    SceneLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub mode: StrategyMode,
    /// Side of the square dilation element for the image-level annulus.
    pub dilation_kernel_px: usize,
    pub scene_concept_map: BTreeMap<SceneLabel, String>,
    pub exemplar_seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            mode: StrategyMode::ImageLevel,
            dilation_kernel_px: 9,
            scene_concept_map: SceneLabel::ALL
                .iter()
                .map(|l| (*l, l.default_concept().to_string()))
                .collect(),
            exemplar_seed: 0,
        }
    }
}

impl StrategyConfig {
    pub fn image_level(&self) -> bool {
        self.mode == StrategyMode::ImageLevel
    }

    pub fn validate(&self, labels: &[SceneLabel]) -> Result<()> {
        match self.mode {
            StrategyMode::ImageLevel => {
                if self.dilation_kernel_px == 0 || self.dilation_kernel_px.is_multiple_of(2) {
                    return Err(Error::validation("dilation_kernel_px must be odd and positive"));
                }
            }
            StrategyMode::SceneLevel => {
                for l in labels {
                    let c = self
                        .scene_concept_map
                        .get(l)
                        .ok_or_else(|| Error::validation(format!("scene {l} has no concept mapping")))?;
                    if !l.concepts().contains(&c.as_str()) {
                        return Err(Error::validation(format!(
                            "concept {c:?} is not configured for scene {l}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Style exemplar `(x_s, m_s)` for a record.
///
/// Image-level: the record's own image with the annulus around the vehicle.
/// Scene-level: the concept exemplar shared by every record of the scene.
pub fn select_reference(record: &SceneRecord, cfg: &StrategyConfig, params: &GenParams) -> Result<(RgbImage, Mask)> {
    match cfg.mode {
        StrategyMode::ImageLevel => {
            let ring = annulus(&record.vehicle_mask, cfg.dilation_kernel_px)?;
            if ring.is_empty() {
                return Err(Error::DegenerateRegion(format!(
                    "reference annulus of record {} is empty",
                    record.id
                )));
            }
            Ok((record.image.clone(), ring))
        }
        StrategyMode::SceneLevel => {
            let concept = cfg
                .scene_concept_map
                .get(&record.scene_label)
                .ok_or_else(|| Error::validation(format!("scene {} has no concept mapping", record.scene_label)))?;
            let ex = gen_concept_exemplar(cfg.exemplar_seed, record.scene_label, concept, params)?;
            Ok((ex.image, ex.concept_mask))
        }
    }
}

pub fn build_conditioning(record: &SceneRecord, cfg: &StrategyConfig, params: &GenParams) -> Result<Conditioning> {
    let (x_s, m_s) = select_reference(record, cfg, params)?;
    let background = if cfg.image_level() {
        Some(apply_mask(&record.image, &record.vehicle_mask.complement())?)
    } else {
        None
    };
    Ok(Conditioning {
        l_channel: normalized_l(&record.image)?,
        ref_area: apply_mask(&x_s, &m_s)?,
        ref_mask: m_s,
        vehicle_mask: record.vehicle_mask.clone(),
        background,
    })
}
