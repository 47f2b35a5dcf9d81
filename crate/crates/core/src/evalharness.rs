//! Attack evaluation: SSIM on vehicle crops, AP50 before and after the
//! attack, ASR at the validation-optimal F1 threshold, latency, input
//! defenses and cross-background transfer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::colorspace::RgbImage;
use crate::config::{Defense, EvalConfig};
use crate::detect::{
    ap50, attack_success_rate, detection_sets, f1_optimal_threshold, write_detection_sets, DetectionSet, Detector,
    DetectorConfig,
};
use crate::error::{Error, Result};
use crate::maskops::composite;
use crate::pipeline::{record_seed, Generator};
use crate::reference::StrategyMode;
use crate::synthcorpus::{gen_background, BBox, SceneRecord};

// ---------------------------------------------------------------------------
// SSIM

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Grayscale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over
/// valid window positions. Images smaller than the window use the largest odd
/// window that fits, truncating the same Gaussian.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let (h, w) = (a.height(), a.width());
    if (h, w) != (b.height(), b.width()) {
        return Err(Error::validation(format!(
            "ssim needs equal shapes, got {h}x{w} and {}x{}",
            b.height(),
            b.width()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::validation("ssim of an empty image"));
    }
    let mut k = SSIM_WINDOW.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    let g = gaussian_window(k, SSIM_SIGMA);
    let (la, lb) = (a.luma(), b.luma());
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut n = 0usize;
    for y0 in 0..=(h - k) {
        for x0 in 0..=(w - k) {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                for dx in 0..k {
                    let wt = g[dy] * g[dx];
                    let i = (y0 + dy) * w + x0 + dx;
                    let (p, q) = (la[i], lb[i]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Box expanded by `margin` of its size on every side, clamped to the frame.
pub fn vehicle_crop(img: &RgbImage, bbox: &BBox, margin: f64) -> Result<RgbImage> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) || !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::validation(format!(
            "degenerate crop box {bbox:?} with margin {margin}"
        )));
    }
    let (bw, bh) = (bbox.w as f64, bbox.h as f64);
    let x0 = (bbox.x as f64 - margin * bw).floor().max(0.0) as usize;
    let y0 = (bbox.y as f64 - margin * bh).floor().max(0.0) as usize;
    let x1 = ((bbox.x as f64 + bw + margin * bw).ceil() as usize).min(img.width());
    let y1 = ((bbox.y as f64 + bh + margin * bh).ceil() as usize).min(img.height());
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::validation(format!("crop box {bbox:?} lies outside the frame")));
    }
    let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0) * 3);
    for y in y0..y1 {
        for x in x0..x1 {
            data.extend(img.pixel(y, x));
        }
    }
    RgbImage::new(y1 - y0, x1 - x0, data)
}

// ---------------------------------------------------------------------------
// Defenses

/// Non-local means: each pixel becomes the mean of pixels in its search
/// window weighted by `exp(-d / h^2)`, where `d` is the mean squared
/// difference of the surrounding patches (edge-replicated).
pub fn nlm(img: &RgbImage, patch: usize, window: usize, h: f64) -> Result<RgbImage> {
    if patch.is_multiple_of(2) || window.is_multiple_of(2) || !(h > 0.0) {
        return Err(Error::validation("nlm needs odd patch and window sizes and h > 0"));
    }
    let (hh, ww) = (img.height() as isize, img.width() as isize);
    let (pr, sr) = ((patch / 2) as isize, (window / 2) as isize);
    let px = |y: isize, x: isize| img.pixel(y.clamp(0, hh - 1) as usize, x.clamp(0, ww - 1) as usize);
    let norm = (patch * patch * 3) as f64;
    let mut out = img.clone();
    for y in 0..hh {
        for x in 0..ww {
            let mut acc = [0f64; 3];
            let mut wsum = 0.0;
            for qy in (y - sr).max(0)..=(y + sr).min(hh - 1) {
                for qx in (x - sr).max(0)..=(x + sr).min(ww - 1) {
                    let mut d = 0.0;
                    for dy in -pr..=pr {
                        for dx in -pr..=pr {
                            let (a, b) = (px(y + dy, x + dx), px(qy + dy, qx + dx));
                            for c in 0..3 {
                                d += (a[c] as f64 - b[c] as f64).powi(2);
                            }
                        }
                    }
                    let wt = (-(d / norm) / (h * h)).exp();
                    let q = img.pixel(qy as usize, qx as usize);
                    for c in 0..3 {
                        acc[c] += wt * q[c] as f64;
                    }
                    wsum += wt;
                }
            }
            out.set_pixel(y as usize, x as usize, acc.map(|v| (v / wsum) as f32));
        }
    }
    Ok(out)
}

/// Bilateral filter over a square window of the given radius.
pub fn bilateral(img: &RgbImage, sigma_space: f64, sigma_color: f64, radius: usize) -> Result<RgbImage> {
    if !(sigma_space > 0.0 && sigma_color > 0.0) {
        return Err(Error::validation("bilateral sigmas must be positive"));
    }
    let (hh, ww, r) = (img.height() as isize, img.width() as isize, radius as isize);
    let mut out = img.clone();
    for y in 0..hh {
        for x in 0..ww {
            let p = img.pixel(y as usize, x as usize);
            let mut acc = [0f64; 3];
            let mut wsum = 0.0;
            for qy in (y - r).max(0)..=(y + r).min(hh - 1) {
                for qx in (x - r).max(0)..=(x + r).min(ww - 1) {
                    let q = img.pixel(qy as usize, qx as usize);
                    let ds = ((qy - y).pow(2) + (qx - x).pow(2)) as f64;
                    let dc: f64 = (0..3).map(|c| (p[c] as f64 - q[c] as f64).powi(2)).sum();
                    let wt = (-ds / (2.0 * sigma_space * sigma_space) - dc / (2.0 * sigma_color * sigma_color)).exp();
                    for c in 0..3 {
                        acc[c] += wt * q[c] as f64;
                    }
                    wsum += wt;
                }
            }
            out.set_pixel(y as usize, x as usize, acc.map(|v| (v / wsum) as f32));
        }
    }
    Ok(out)
}

pub fn apply_defense(img: &RgbImage, defense: Defense, cfg: &EvalConfig) -> Result<RgbImage> {
    match defense {
        Defense::None => Ok(img.clone()),
        Defense::Nlm => nlm(img, cfg.nlm_patch, cfg.nlm_window, cfg.nlm_h),
        Defense::Bilateral => bilateral(
            img,
            cfg.bilateral_sigma_space,
            cfg.bilateral_sigma_color,
            cfg.bilateral_radius,
        ),
    }
}

impl Defense {
    pub fn id(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Nlm => "nlm",
            Defense::Bilateral => "bilateral",
        }
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub detector: String,
    pub strategy: StrategyMode,
    /// `attacked`, `defense_<name>` or `cross_background`.
    pub condition: String,
    pub images: usize,
    pub ap50_clean: f64,
    pub ap50_attacked: f64,
    pub ssim_mean: f64,
    pub asr: f64,
    pub asr_threshold: f64,
    pub latency_s_mean: f64,
    pub latency_s_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub corpus_manifest_hash: String,
    pub checkpoint_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub provenance: Provenance,
}

impl EvalReport {
    /// Aligned plain-text table, one row per condition.
    pub fn table(&self) -> String {
        let head = [
            "detector",
            "strategy",
            "condition",
            "n",
            "AP50 clean",
            "AP50 attacked",
            "SSIM",
            "ASR",
            "latency s",
        ];
        let mut cells: Vec<Vec<String>> = vec![head.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            cells.push(vec![
                r.detector.clone(),
                match r.strategy {
                    StrategyMode::ImageLevel => "image".into(),
                    StrategyMode::SceneLevel => "scene".into(),
                },
                r.condition.clone(),
                r.images.to_string(),
                format!("{:.1}", 100.0 * r.ap50_clean),
                format!("{:.1}", 100.0 * r.ap50_attacked),
                format!("{:.3}", r.ssim_mean),
                format!("{:.1}", 100.0 * r.asr),
                format!("{:.4} ± {:.4}", r.latency_s_mean, r.latency_s_std),
            ]);
        }
        let widths: Vec<usize> = (0..head.len())
            .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(
                    |(c, (s, w))| {
                        if c < 3 {
                            format!("{s:<w$}")
                        } else {
                            format!("{s:>w$}")
                        }
                    },
                )
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(
                    out,
                    "{}",
                    "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
                );
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join("report.txt"), self.table())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("report.json"))
            .map_err(|_| Error::not_ready(format!("no report in {}", dir.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Samples of one generator on a set of records.
#[derive(Debug, Clone)]
pub struct AttackRun {
    pub camouflaged: Vec<RgbImage>,
    pub composited: Vec<RgbImage>,
    /// Wall-clock seconds of the full sampling path, per image.
    pub latencies: Vec<f64>,
}

/// Samples every record one at a time so that latency is per image.
pub fn run_attack(gen: &Generator, records: &[SceneRecord], base_seed: u64) -> Result<AttackRun> {
    let mut run = AttackRun {
        camouflaged: Vec::with_capacity(records.len()),
        composited: Vec::with_capacity(records.len()),
        latencies: Vec::with_capacity(records.len()),
    };
    for r in records {
        let start = Instant::now();
        let (cam, comp) = gen.infer(r, record_seed(base_seed, r))?;
        run.latencies.push(start.elapsed().as_secs_f64());
        run.camouflaged.push(cam);
        run.composited.push(comp);
    }
    Ok(run)
}

/// A trained detector under a report name.
pub struct NamedDetector<'a> {
    pub id: String,
    pub model: &'a Detector,
}

fn sets_for(
    det: &Detector,
    records: &[SceneRecord],
    images: &[&RgbImage],
    cfg: &DetectorConfig,
) -> Result<Vec<DetectionSet>> {
    let items: Vec<(&str, &RgbImage, BBox)> = records
        .iter()
        .zip(images)
        .map(|(r, i)| (r.id.as_str(), *i, r.bbox))
        .collect();
    detection_sets(det, &items, cfg.conf_threshold, cfg.nms_iou)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Mean SSIM of clean versus attacked vehicle crops.
pub fn mean_crop_ssim(records: &[SceneRecord], attacked: &[RgbImage], margin: f64) -> Result<f64> {
    let mut s = 0.0;
    for (r, a) in records.iter().zip(attacked) {
        s += ssim(
            &vehicle_crop(&r.image, &r.bbox, margin)?,
            &vehicle_crop(a, &r.bbox, margin)?,
        )?;
    }
    Ok(s / records.len() as f64)
}

/// Threshold maximizing F1 on clean validation images.
pub fn validation_threshold(det: &Detector, val: &[SceneRecord], cfg: &DetectorConfig) -> Result<f64> {
    let imgs: Vec<&RgbImage> = val.iter().map(|r| &r.image).collect();
    f1_optimal_threshold(&sets_for(det, val, &imgs, cfg)?)
}

/// One row per detector: clean versus attacked (optionally defended) test
/// images. Detection sets are persisted under `out` when given.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_run(
    run: &AttackRun,
    strategy: StrategyMode,
    detectors: &[NamedDetector],
    test: &[SceneRecord],
    val: &[SceneRecord],
    det_cfg: &DetectorConfig,
    eval_cfg: &EvalConfig,
    defense: Defense,
    out: Option<&Path>,
) -> Result<Vec<EvalRow>> {
    if test.is_empty() || test.len() != run.composited.len() {
        return Err(Error::validation("attack run does not match the evaluated records"));
    }
    let attacked: Vec<RgbImage> = match defense {
        Defense::None => run.composited.clone(),
        d => run
            .composited
            .iter()
            .map(|i| apply_defense(i, d, eval_cfg))
            .collect::<Result<_>>()?,
    };
    let condition = match defense {
        Defense::None => "attacked".to_string(),
        d => format!("defense_{}", d.id()),
    };
    let ssim_mean = mean_crop_ssim(test, &attacked, eval_cfg.crop_margin)?;
    let (lat_m, lat_s) = mean_std(&run.latencies);
    let clean_imgs: Vec<&RgbImage> = test.iter().map(|r| &r.image).collect();
    let att_imgs: Vec<&RgbImage> = attacked.iter().collect();
    let mut rows = Vec::new();
    for d in detectors {
        let clean = sets_for(d.model, test, &clean_imgs, det_cfg)?;
        let att = sets_for(d.model, test, &att_imgs, det_cfg)?;
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            write_detection_sets(&clean, &dir.join(format!("{}_clean.jsonl", d.id)))?;
            write_detection_sets(&att, &dir.join(format!("{}_{condition}.jsonl", d.id)))?;
        }
        let tau = validation_threshold(d.model, val, det_cfg)?;
        rows.push(EvalRow {
            detector: d.id.clone(),
            strategy,
            condition: condition.clone(),
            images: test.len(),
            ap50_clean: ap50(&clean),
            ap50_attacked: ap50(&att),
            ssim_mean,
            asr: attack_success_rate(&att, tau)?,
            asr_threshold: tau,
            latency_s_mean: lat_m,
            latency_s_std: lat_s,
        });
    }
    Ok(rows)
}

/// Samples the test records and evaluates every detector on them.
pub fn evaluate(
    gen: &Generator,
    detectors: &[NamedDetector],
    test: &[SceneRecord],
    val: &[SceneRecord],
    det_cfg: &DetectorConfig,
    eval_cfg: &EvalConfig,
    out: Option<&Path>,
) -> Result<(Vec<EvalRow>, AttackRun)> {
    let run = run_attack(gen, test, eval_cfg.sample_seed)?;
    let rows = evaluate_run(
        &run,
        gen.config.strategy.mode,
        detectors,
        test,
        val,
        det_cfg,
        eval_cfg,
        Defense::None,
        out,
    )?;
    Ok((rows, run))
}

/// Like [`evaluate`], with the defense applied to composites before detection.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_defended(
    gen: &Generator,
    detector: &NamedDetector,
    test: &[SceneRecord],
    val: &[SceneRecord],
    defense: Defense,
    det_cfg: &DetectorConfig,
    eval_cfg: &EvalConfig,
    out: Option<&Path>,
) -> Result<Vec<EvalRow>> {
    let run = run_attack(gen, test, eval_cfg.sample_seed)?;
    evaluate_run(
        &run,
        gen.config.strategy.mode,
        std::slice::from_ref(detector),
        test,
        val,
        det_cfg,
        eval_cfg,
        defense,
        out,
    )
}

/// Clean and camouflaged vehicles of each record pasted onto `n` fresh
/// backgrounds of the record's scene; returns `(clean, camouflaged)` pairs
/// with the ground-truth records they belong to.
pub fn cross_background_composites(
    records: &[SceneRecord],
    camouflaged: &[RgbImage],
    n_backgrounds: usize,
    params: &crate::synthcorpus::GenParams,
) -> Result<Vec<(SceneRecord, RgbImage)>> {
    let mut out = Vec::with_capacity(records.len() * n_backgrounds);
    for (r, cam) in records.iter().zip(camouflaged) {
        for k in 0..n_backgrounds {
            let seed = r.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (k as u64 + 1);
            let bg = gen_background(seed, r.scene_label, params)?;
            let clean = composite(&r.image, &bg, &r.vehicle_mask)?;
            let attacked = composite(cam, &bg, &r.vehicle_mask)?;
            let rec = SceneRecord {
                id: format!("{}_bg{k}", r.id),
                image: clean,
                ..r.clone()
            };
            out.push((rec, attacked));
        }
    }
    Ok(out)
}

/// Transfer of scene-level camouflage to unseen backgrounds of the same scene.
pub fn evaluate_cross_background(
    gen: &Generator,
    detector: &NamedDetector,
    records: &[SceneRecord],
    val: &[SceneRecord],
    n_backgrounds: usize,
    det_cfg: &DetectorConfig,
    eval_cfg: &EvalConfig,
) -> Result<Vec<EvalRow>> {
    if n_backgrounds == 0 {
        return Ok(Vec::new());
    }
    if gen.config.strategy.mode != StrategyMode::SceneLevel {
        return Err(Error::validation(
            "cross-background transfer needs a scene-level checkpoint",
        ));
    }
    if records.is_empty() {
        return Err(Error::validation("no records to composite onto fresh backgrounds"));
    }
    let run = run_attack(gen, records, eval_cfg.sample_seed)?;
    let pairs = cross_background_composites(records, &run.camouflaged, n_backgrounds, &gen.config.gen_params)?;
    let recs: Vec<SceneRecord> = pairs.iter().map(|(r, _)| r.clone()).collect();
    let composites: Vec<RgbImage> = pairs.into_iter().map(|(_, a)| a).collect();
    let latencies = run
        .latencies
        .iter()
        .flat_map(|l| std::iter::repeat_n(*l, n_backgrounds))
        .collect();
    let expanded = AttackRun {
        camouflaged: Vec::new(),
        composited: composites,
        latencies,
    };
    let mut rows = evaluate_run(
        &expanded,
        StrategyMode::SceneLevel,
        std::slice::from_ref(detector),
        &recs,
        val,
        det_cfg,
        eval_cfg,
        Defense::None,
        None,
    )?;
    for r in &mut rows {
        r.condition = "cross_background".into();
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::{gen_scene, GenParams, SceneLabel};
    use proptest::prelude::*;

    fn noise_img(seed: u64, h: usize, w: usize) -> RgbImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RgbImage::new(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn ssim_of_constants_matches_closed_form() {
        let a = RgbImage::filled(16, 16, [0.2; 3]).unwrap();
        let b = RgbImage::filled(16, 16, [0.8; 3]).unwrap();
        // constant patches: zero variance, so only the luminance term remains
        let (ma, mb) = (0.2f64, 0.8f64);
        let c1 = 0.01f64.powi(2);
        let want = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn ssim_rejects_shape_mismatch() {
        let a = RgbImage::filled(8, 8, [0.2; 3]).unwrap();
        let b = RgbImage::filled(8, 9, [0.2; 3]).unwrap();
        assert!(matches!(ssim(&a, &b), Err(Error::Validation(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ssim_identity_and_symmetry(s1 in 0u64..1000, s2 in 0u64..1000, h in 4usize..20, w in 4usize..20) {
            let a = noise_img(s1, h, w);
            let b = noise_img(s2 + 5000, h, w);
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn crop_matches_slice_bounds(x in 0f32..30.0, y in 0f32..30.0, w in 1f32..20.0, h in 1f32..20.0, m in 0f64..0.5) {
            let img = noise_img(3, 32, 32);
            let b = BBox { x, y, w, h };
            let c = vehicle_crop(&img, &b, m).unwrap();
            let x0 = ((x as f64) - m * w as f64).floor().max(0.0) as usize;
            let y0 = ((y as f64) - m * h as f64).floor().max(0.0) as usize;
            let x1 = (((x + w) as f64 + m * w as f64).ceil() as usize).min(32);
            let y1 = (((y + h) as f64 + m * h as f64).ceil() as usize).min(32);
            prop_assert_eq!((c.height(), c.width()), (y1 - y0, x1 - x0));
            prop_assert_eq!(c.pixel(0, 0), img.pixel(y0, x0));
            prop_assert_eq!(c.pixel(c.height() - 1, c.width() - 1), img.pixel(y1 - 1, x1 - 1));
        }
    }

    #[test]
    fn crop_edge_cases() {
        let img = noise_img(1, 16, 16);
        let b = BBox {
            x: 2.0,
            y: 3.0,
            w: 5.0,
            h: 4.0,
        };
        let c = vehicle_crop(&img, &b, 0.0).unwrap();
        assert_eq!((c.height(), c.width()), (4, 5));
        assert_eq!(c.pixel(0, 0), img.pixel(3, 2));
        let corner = BBox {
            x: 12.0,
            y: 12.0,
            w: 4.0,
            h: 4.0,
        };
        let c = vehicle_crop(&img, &corner, 0.5).unwrap();
        assert_eq!((c.height(), c.width()), (6, 6));
        let zero = BBox {
            x: 1.0,
            y: 1.0,
            w: 0.0,
            h: 3.0,
        };
        assert!(vehicle_crop(&img, &zero, 0.1).is_err());
    }

    #[test]
    fn bilateral_keeps_constants() {
        let img = RgbImage::filled(9, 9, [0.3, 0.6, 0.9]).unwrap();
        let out = bilateral(&img, 2.0, 0.1, 4).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn nlm_matches_direct_formula() {
        let img = noise_img(9, 8, 8);
        let out = nlm(&img, 3, 7, 0.1).unwrap();
        let get = |y: i64, x: i64, c: usize| img.pixel(y.clamp(0, 7) as usize, x.clamp(0, 7) as usize)[c] as f64;
        for (y, x) in [(0i64, 0i64), (3, 4), (7, 2), (5, 7)] {
            let mut num = [0.0; 3];
            let mut den = 0.0;
            for qy in 0..8i64 {
                for qx in 0..8i64 {
                    if (qy - y).abs() > 3 || (qx - x).abs() > 3 {
                        continue;
                    }
                    let mut d = 0.0;
                    for c in 0..3 {
                        for oy in -1..=1 {
                            for ox in -1..=1 {
                                d += (get(y + oy, x + ox, c) - get(qy + oy, qx + ox, c)).powi(2);
                            }
                        }
                    }
                    let wgt = (-d / 27.0 / 0.01).exp();
                    den += wgt;
                    for c in 0..3 {
                        num[c] += wgt * get(qy, qx, c);
                    }
                }
            }
            let got = out.pixel(y as usize, x as usize);
            for c in 0..3 {
                assert!((got[c] as f64 - num[c] / den).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn defense_none_is_identity() {
        let img = noise_img(2, 8, 8);
        assert_eq!(apply_defense(&img, Defense::None, &EvalConfig::default()).unwrap(), img);
    }

    #[test]
    fn cross_background_swaps_only_background() {
        let p = GenParams {
            image_size: 32,
            ..GenParams::default()
        };
        let r = gen_scene(4, SceneLabel::Desert, &p).unwrap();
        let cam = noise_img(5, 32, 32);
        let pairs = cross_background_composites(std::slice::from_ref(&r), std::slice::from_ref(&cam), 3, &p).unwrap();
        assert_eq!(pairs.len(), 3);
        for (rec, att) in &pairs {
            for y in 0..32 {
                for x in 0..32 {
                    if r.vehicle_mask.get(y, x) {
                        assert_eq!(att.pixel(y, x), cam.pixel(y, x));
                        assert_eq!(rec.image.pixel(y, x), r.image.pixel(y, x));
                    } else {
                        assert_eq!(att.pixel(y, x), rec.image.pixel(y, x));
                    }
                }
            }
        }
        assert_ne!(pairs[0].0.image, pairs[1].0.image);
    }

    #[test]
    fn identity_attack_is_self_consistent() {
        use crate::detect::{ArchVariant, DetectorShape};
        let p = GenParams {
            image_size: 16,
            ..GenParams::default()
        };
        let recs: Vec<SceneRecord> = (0..6)
            .map(|i| gen_scene(i, SceneLabel::ALL[i as usize % 5], &p).unwrap())
            .collect();
        let det = Detector::init(
            DetectorShape {
                variant: ArchVariant::WideShallow,
                image_size: 16,
                grid: 4,
            },
            0,
        )
        .unwrap();
        let run = AttackRun {
            camouflaged: recs.iter().map(|r| r.image.clone()).collect(),
            composited: recs.iter().map(|r| r.image.clone()).collect(),
            latencies: vec![0.5; recs.len()],
        };
        let dcfg = DetectorConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let named = [NamedDetector {
            id: "w".into(),
            model: &det,
        }];
        let rows = evaluate_run(
            &run,
            StrategyMode::ImageLevel,
            &named,
            &recs,
            &recs,
            &dcfg,
            &EvalConfig::default(),
            Defense::None,
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!(r.ap50_clean, r.ap50_attacked);
        assert!((r.ssim_mean - 1.0).abs() < 1e-9);
        assert_eq!((r.latency_s_mean, r.latency_s_std), (0.5, 0.0));
        let persisted = crate::detect::read_detection_sets(&dir.path().join("w_attacked.jsonl")).unwrap();
        assert_eq!(ap50(&persisted), r.ap50_attacked);
        let detected = persisted
            .iter()
            .filter(|s| {
                s.detections
                    .iter()
                    .any(|d| d.confidence >= r.asr_threshold && d.bbox.iou(&s.ground_truth[0]) >= 0.5)
            })
            .count();
        assert!((r.asr - (1.0 - detected as f64 / recs.len() as f64)).abs() < 1e-12);
    }

    #[test]
    fn table_has_header_and_rows() {
        let row = EvalRow {
            detector: "wide_shallow".into(),
            strategy: StrategyMode::ImageLevel,
            condition: "attacked".into(),
            images: 4,
            ap50_clean: 0.95,
            ap50_attacked: 0.2,
            ssim_mean: 0.8,
            asr: 0.5,
            asr_threshold: 0.4,
            latency_s_mean: 0.01,
            latency_s_std: 0.001,
        };
        let rep = EvalReport {
            rows: vec![row.clone(), row],
            provenance: Provenance::default(),
        };
        let t = rep.table();
        assert_eq!(t.lines().count(), 4);
        assert!(t.lines().next().unwrap().starts_with("detector"));
        let dir = tempfile::tempdir().unwrap();
        rep.write(dir.path()).unwrap();
        assert_eq!(EvalReport::read(dir.path()).unwrap(), rep);
    }
}
