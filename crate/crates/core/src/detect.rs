//! Grid detectors (a white-box target and a black-box transfer target),
//! box decoding with NMS, and detection metrics.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::image_batch;
use crate::colorspace::RgbImage;
use crate::critic::cross_entropy;
use crate::error::{Error, Result};
use crate::maskops::Mask;
use crate::nn::{self, Adam, Conv, ParamStore};
use crate::synthcorpus::{BBox, SceneRecord};

/// Index of the background class in detector logits.
pub const BACKGROUND: u32 = 0;
pub const VEHICLE: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchVariant {
    WideShallow,
    NarrowDeep,
}

impl ArchVariant {
    pub fn id(self) -> &'static str {
        match self {
            Self::WideShallow => "wide_shallow",
            Self::NarrowDeep => "narrow_deep",
        }
    }
}

/// Which cells are trained as vehicle cells; all others are background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Every cell whose center lies in the vehicle mask.
    MaskCells,
    /// Only the cell containing the box center.
    CenterCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub grid: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the box-regression term relative to classification.
    pub box_weight: f64,
    /// Random per-image channel permutation during training.
    pub color_augment: bool,
    pub assignment: Assignment,
    /// Minimum confidence kept when building DetectionSets for AP.
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub white_box: ArchVariant,
    pub black_box: ArchVariant,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            epochs: 8,
            batch_size: 16,
            lr: 2e-3,
            box_weight: 5.0,
            color_augment: true,
            assignment: Assignment::CenterCell,
            conf_threshold: 0.05,
            nms_iou: 0.5,
            white_box: ArchVariant::WideShallow,
            black_box: ArchVariant::NarrowDeep,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorShape {
    pub variant: ArchVariant,
    pub image_size: usize,
    pub grid: usize,
}

impl DetectorShape {
    pub fn cell(&self) -> usize {
        self.image_size / self.grid
    }
}

/// Backbone down to a `G x G` grid, then a per-cell head with two class
/// logits and four box channels.
pub struct Detector {
    shape: DetectorShape,
    layers: Vec<Conv>,
    head: Conv,
    store: ParamStore,
}

pub const DETECTOR_KIND: &str = "detector";

impl Detector {
    pub fn build(mut store: ParamStore, shape: DetectorShape) -> Result<Self> {
        let s = shape.image_size;
        if shape.grid == 0 || !s.is_multiple_of(shape.grid) || !(s / shape.grid).is_power_of_two() {
            return Err(Error::validation(format!(
                "image size {s} must be a power-of-two multiple of grid {}",
                shape.grid
            )));
        }
        let levels = (s / shape.grid).trailing_zeros() as usize;
        let ps = &mut store;
        let mut layers = Vec::new();
        let head;
        match shape.variant {
            ArchVariant::WideShallow => {
                let widths = [32usize, 48, 64, 64, 64, 64];
                layers.push(Conv::new(ps, "det.stem", 3, widths[0], 3, 1)?);
                for l in 0..levels {
                    layers.push(Conv::new(ps, &format!("det.down{l}"), widths[l], widths[l + 1], 3, 2)?);
                }
                layers.push(Conv::new(ps, "det.neck", widths[levels], 64, 3, 1)?);
                head = Conv::new(ps, "det.head", 64, 6, 1, 1)?;
            }
            ArchVariant::NarrowDeep => {
                let widths = [12usize, 16, 24, 32, 32, 32];
                layers.push(Conv::new(ps, "det.stem.a", 3, widths[0], 3, 1)?);
                layers.push(Conv::new(ps, "det.stem.b", widths[0], widths[0], 3, 1)?);
                for l in 0..levels {
                    let c = widths[l + 1];
                    layers.push(Conv::new(ps, &format!("det.down{l}.a"), widths[l], c, 3, 2)?);
                    layers.push(Conv::new(ps, &format!("det.down{l}.b"), c, c, 3, 1)?);
                    layers.push(Conv::new(ps, &format!("det.down{l}.c"), c, c, 3, 1)?);
                }
                head = Conv::new(ps, "det.head", widths[levels], 6, 3, 1)?;
            }
        }
        Ok(Self {
            shape,
            layers,
            head,
            store,
        })
    }

    pub fn init(shape: DetectorShape, seed: u64) -> Result<Self> {
        Self::build(ParamStore::init(seed), shape)
    }

    pub fn shape(&self) -> DetectorShape {
        self.shape
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Self::build(self.store.copy_as(dtype)?, self.shape)
    }

    /// Copy that is constant under backpropagation.
    pub fn frozen(&self) -> Result<Self> {
        Self::build(self.store.frozen()?, self.shape)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save(dir, DETECTOR_KIND, &serde_json::to_value(self.shape)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, cfg) = ParamStore::load(dir, DETECTOR_KIND)?;
        let shape: DetectorShape = serde_json::from_value(cfg).map_err(|e| Error::load(dir, e))?;
        Self::build(store, shape)
    }

    /// Raw head output `[B, 6, G, G]`: logits (background, vehicle), then box
    /// channels (dx, dy, w, h).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.shape.image_size || w != self.shape.image_size {
            return Err(Error::validation(format!(
                "detector expects [B, 3, {s}, {s}], got {:?}",
                x.dims(),
                s = self.shape.image_size
            )));
        }
        let mut h = x.clone();
        for l in &self.layers {
            h = nn::silu(&l.forward(&h)?)?;
        }
        self.head.forward(&h)
    }

    /// Per-cell class logits `[B * G * G, 2]`, cells in row-major order.
    pub fn cell_logits(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.forward(x)?;
        let b = out.dim(0)?;
        let g = self.shape.grid;
        Ok(out.narrow(1, 0, 2)?.permute((0, 2, 3, 1))?.reshape((b * g * g, 2))?)
    }
}

/// Row-major indices of grid cells whose center pixel lies inside `m`.
///
/// The center of cell `(i, j)` is sampled at pixel
/// `(floor((i + 0.5) * cell), floor((j + 0.5) * cell))`.
pub fn cells_in_mask(m: &Mask, grid: usize) -> Vec<usize> {
    let cy = m.height() as f64 / grid as f64;
    let cx = m.width() as f64 / grid as f64;
    let mut out = Vec::new();
    for i in 0..grid {
        for j in 0..grid {
            let y = ((i as f64 + 0.5) * cy).floor() as usize;
            let x = ((j as f64 + 0.5) * cx).floor() as usize;
            if m.get(y, x) {
                out.push(i * grid + j);
            }
        }
    }
    out
}

/// Logit rows of every cell whose center lies in the mask, each paired with
/// the background label. `x` is `[B, 3, S, S]`, one mask per batch item.
pub fn adversarial_logit_selection(model: &Detector, x: &Tensor, masks: &[&Mask]) -> Result<(Tensor, Vec<u32>)> {
    let b = x.dim(0)?;
    if masks.len() != b {
        return Err(Error::validation("one mask per image is required"));
    }
    let g = model.shape().grid;
    let mut idx = Vec::new();
    for (bi, m) in masks.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::EmptyMask(format!("selection mask {bi} is empty")));
        }
        idx.extend(cells_in_mask(m, g).into_iter().map(|c| (bi * g * g + c) as u32));
    }
    if idx.is_empty() {
        return Err(Error::validation("no detector cell center lies inside the mask"));
    }
    let n = idx.len();
    let rows = model
        .cell_logits(x)?
        .index_select(&Tensor::from_vec(idx, n, x.device())?, 0)?;
    Ok((rows, vec![BACKGROUND; n]))
}

// ---------------------------------------------------------------------------
// Detection sets and metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<BBox>,
}

pub fn write_detection_sets(sets: &[DetectionSet], path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in sets {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_detection_sets(path: &Path) -> Result<Vec<DetectionSet>> {
    let f = fs::File::open(path).map_err(|e| Error::load(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::load(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::load(path, e))
        })
        .collect()
}

/// Greedy NMS: keeps boxes in descending confidence (stable on ties), dropping
/// any whose IoU with an already kept box exceeds `iou`.
pub fn nms(dets: &[Detection], iou: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| (k.bbox.iou(&d.bbox) as f64) <= iou) {
            kept.push(d);
        }
    }
    kept
}

fn softmax_vehicle(l0: f64, l1: f64) -> f64 {
    1.0 / (1.0 + (l0 - l1).exp())
}

/// Vehicle probability per cell and decoded boxes for a batch.
fn decode_batch(model: &Detector, x: &Tensor) -> Result<Vec<Vec<(f64, BBox)>>> {
    let out = model.forward(x)?.to_dtype(DType::F64)?;
    let b = out.dim(0)?;
    let s = model.shape();
    let (g, size, cell) = (s.grid, s.image_size as f64, s.cell() as f64);
    let mut all = Vec::with_capacity(b);
    for bi in 0..b {
        let v: Vec<Vec<Vec<f64>>> = out.get(bi)?.to_vec3()?;
        let mut cells = Vec::with_capacity(g * g);
        for i in 0..g {
            for j in 0..g {
                let p = softmax_vehicle(v[0][i][j], v[1][i][j]);
                let cx = (j as f64 + 0.5) * cell + v[2][i][j] * size;
                let cy = (i as f64 + 0.5) * cell + v[3][i][j] * size;
                let w = size / (1.0 + (-v[4][i][j]).exp());
                let h = size / (1.0 + (-v[5][i][j]).exp());
                let x0 = (cx - w / 2.0).clamp(0.0, size);
                let y0 = (cy - h / 2.0).clamp(0.0, size);
                let x1 = (cx + w / 2.0).clamp(0.0, size);
                let y1 = (cy + h / 2.0).clamp(0.0, size);
                cells.push((
                    p,
                    BBox {
                        x: x0 as f32,
                        y: y0 as f32,
                        w: (x1 - x0) as f32,
                        h: (y1 - y0) as f32,
                    },
                ));
            }
        }
        all.push(cells);
    }
    Ok(all)
}

/// Highest per-cell vehicle probability of each image in `x`.
pub fn max_vehicle_confidence(model: &Detector, x: &Tensor) -> Result<Vec<f64>> {
    Ok(decode_batch(model, x)?
        .into_iter()
        .map(|cells| cells.iter().map(|(p, _)| *p).fold(0.0, f64::max))
        .collect())
}

/// Cells with vehicle probability strictly above `conf_threshold`, decoded
/// and passed through NMS. Boxes of zero area after clamping are dropped.
pub fn detect_boxes(model: &Detector, img: &RgbImage, conf_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
    Ok(detect_batch(model, &[img], conf_threshold, nms_iou)?.remove(0))
}

pub fn detect_batch(
    model: &Detector,
    imgs: &[&RgbImage],
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(imgs.len());
    for chunk in imgs.chunks(64) {
        let x = image_batch(chunk, model.store().device())?.to_dtype(model.store().dtype())?;
        for cells in decode_batch(model, &x)? {
            let dets: Vec<Detection> = cells
                .into_iter()
                .filter(|(p, b)| *p > conf_threshold && b.area() > 0.0)
                .map(|(p, b)| Detection { bbox: b, confidence: p })
                .collect();
            out.push(nms(&dets, nms_iou));
        }
    }
    Ok(out)
}

/// Greedy confidence-descending matching at IoU >= 0.5. Returns, per
/// detection in the given order, whether it is a true positive.
fn match_detections(dets: &[(usize, Detection)], gts: &[Vec<BBox>]) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    dets.iter()
        .map(|(img, d)| {
            let mut best: Option<(usize, f32)> = None;
            for (k, g) in gts[*img].iter().enumerate() {
                if used[*img][k] {
                    continue;
                }
                let iou = d.bbox.iou(g);
                if iou >= 0.5 && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            match best {
                Some((k, _)) => {
                    used[*img][k] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn ranked(sets: &[DetectionSet]) -> Vec<(usize, Detection)> {
    let mut all: Vec<(usize, Detection)> = sets
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.detections.iter().map(move |d| (i, *d)))
        .collect();
    all.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    all
}

/// All-point interpolated AP at IoU 0.5 over a collection of images.
pub fn ap50(sets: &[DetectionSet]) -> f64 {
    let n_gt: usize = sets.iter().map(|s| s.ground_truth.len()).sum();
    let all = ranked(sets);
    if n_gt == 0 {
        return if all.is_empty() { 1.0 } else { 0.0 };
    }
    let gts: Vec<Vec<BBox>> = sets.iter().map(|s| s.ground_truth.clone()).collect();
    let tp = match_detections(&all, &gts);
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut ctp = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        ctp += t as usize;
        prec.push(ctp as f64 / (k + 1) as f64);
        rec.push(ctp as f64 / n_gt as f64);
    }
    // precision envelope from the right
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..rec.len() {
        if rec[k] > prev_r {
            ap += (rec[k] - prev_r) * prec[k];
            prev_r = rec[k];
        }
    }
    ap
}

/// F1 at IoU 0.5 using only detections with confidence >= `threshold`.
pub fn f1_at(sets: &[DetectionSet], threshold: f64) -> f64 {
    let n_gt: usize = sets.iter().map(|s| s.ground_truth.len()).sum();
    let kept: Vec<(usize, Detection)> = ranked(sets)
        .into_iter()
        .filter(|(_, d)| d.confidence >= threshold)
        .collect();
    let gts: Vec<Vec<BBox>> = sets.iter().map(|s| s.ground_truth.clone()).collect();
    let tp = match_detections(&kept, &gts).iter().filter(|t| **t).count();
    let fp = kept.len() - tp;
    let fn_ = n_gt - tp;
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Confidence threshold maximizing F1; ties go to the higher threshold.
pub fn f1_optimal_threshold(sets: &[DetectionSet]) -> Result<f64> {
    let mut cands: Vec<f64> = sets
        .iter()
        .flat_map(|s| s.detections.iter().map(|d| d.confidence))
        .collect();
    if cands.is_empty() {
        return Err(Error::validation("no detections to choose a threshold from"));
    }
    cands.sort_by(|a, b| b.total_cmp(a));
    cands.dedup();
    let mut best = (f64::NEG_INFINITY, cands[0]);
    for &t in &cands {
        let f = f1_at(sets, t);
        if f > best.0 {
            best = (f, t);
        }
    }
    Ok(best.1)
}

/// Fraction of ground-truth vehicles with no detection at confidence >=
/// `threshold` and IoU >= 0.5.
pub fn attack_success_rate(sets: &[DetectionSet], threshold: f64) -> Result<f64> {
    let mut total = 0usize;
    let mut missed = 0usize;
    for s in sets {
        for g in &s.ground_truth {
            total += 1;
            let hit = s
                .detections
                .iter()
                .any(|d| d.confidence >= threshold && d.bbox.iou(g) >= 0.5);
            if !hit {
                missed += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::validation("attack success rate needs at least one vehicle"));
    }
    Ok(missed as f64 / total as f64)
}

/// Runs the detector on every image and pairs results with ground truth.
pub fn detection_sets(
    model: &Detector,
    items: &[(&str, &RgbImage, BBox)],
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<DetectionSet>> {
    let imgs: Vec<&RgbImage> = items.iter().map(|(_, i, _)| *i).collect();
    let dets = detect_batch(model, &imgs, conf_threshold, nms_iou)?;
    Ok(items
        .iter()
        .zip(dets)
        .map(|((id, _, gt), d)| DetectionSet {
            image_id: id.to_string(),
            detections: d,
            ground_truth: vec![*gt],
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub variant: ArchVariant,
    pub final_loss: f64,
    pub heldout_ap50: f64,
}

struct Targets {
    /// `[B * G * G]` class labels.
    classes: Vec<u32>,
    /// Row indices of positive cells and their box targets (dx, dy, w, h).
    pos: Vec<u32>,
    boxes: Vec<f32>,
}

fn positive_cells(r: &SceneRecord, g: usize, cell: f32, assignment: Assignment) -> Vec<usize> {
    match assignment {
        Assignment::MaskCells => cells_in_mask(&r.vehicle_mask, g),
        Assignment::CenterCell => {
            let b = r.bbox;
            let i = (((b.y + b.h / 2.0) / cell) as usize).min(g - 1);
            let j = (((b.x + b.w / 2.0) / cell) as usize).min(g - 1);
            vec![i * g + j]
        }
    }
}

fn targets(records: &[&SceneRecord], shape: DetectorShape, assignment: Assignment) -> Targets {
    let g = shape.grid;
    let size = shape.image_size as f32;
    let cell = shape.cell() as f32;
    let mut classes = vec![BACKGROUND; records.len() * g * g];
    let mut pos = Vec::new();
    let mut boxes = Vec::new();
    for (bi, r) in records.iter().enumerate() {
        let b = r.bbox;
        let (cx, cy) = (b.x + b.w / 2.0, b.y + b.h / 2.0);
        for c in positive_cells(r, g, cell, assignment) {
            let row = bi * g * g + c;
            classes[row] = VEHICLE;
            pos.push(row as u32);
            let (i, j) = ((c / g) as f32, (c % g) as f32);
            boxes.extend([
                (cx - (j + 0.5) * cell) / size,
                (cy - (i + 0.5) * cell) / size,
                b.w / size,
                b.h / size,
            ]);
        }
    }
    Targets { classes, pos, boxes }
}

fn permute_channels(img: &RgbImage, perm: [usize; 3]) -> RgbImage {
    let data: Vec<f32> = img
        .data()
        .chunks_exact(3)
        .flat_map(|p| [p[perm[0]], p[perm[1]], p[perm[2]]])
        .collect();
    RgbImage::new(img.height(), img.width(), data).expect("permutation preserves range")
}

/// Per-cell cross-entropy plus smooth-L1 box regression on the positive
/// cells chosen by `cfg.assignment`.
pub fn train_detector(
    train: &[SceneRecord],
    heldout: &[SceneRecord],
    variant: ArchVariant,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<(Detector, DetectorReport)> {
    let first = train
        .first()
        .ok_or_else(|| Error::validation("detector training corpus is empty"))?;
    let shape = DetectorShape {
        variant,
        image_size: first.image.height(),
        grid: cfg.grid,
    };
    let model = Detector::init(shape, seed)?;
    let dev = Device::Cpu;
    let mut opt = Adam::new(model.store().vars(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDE7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let bs = cfg.batch_size.max(1);
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let total_steps = cfg.epochs * train.len().div_ceil(bs);
    let mut step = 0;
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let p = step as f64 / total_steps.max(1) as f64;
            opt.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()));
            let recs: Vec<&SceneRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let imgs: Vec<RgbImage> = recs
                .iter()
                .map(|r| {
                    if cfg.color_augment {
                        permute_channels(&r.image, perms[rng.random_range(0..perms.len())])
                    } else {
                        r.image.clone()
                    }
                })
                .collect();
            let refs: Vec<&RgbImage> = imgs.iter().collect();
            let x = image_batch(&refs, &dev)?;
            let loss = detector_loss(&model, &x, &recs, cfg)?;
            last = nn::scalar(&loss)?;
            if !last.is_finite() {
                return Err(Error::Numerical(format!("detector loss is {last} at step {step}")));
            }
            opt.backward_step(&loss)?;
            step += 1;
        }
    }
    let heldout_ap50 = if heldout.is_empty() {
        f64::NAN
    } else {
        let items: Vec<(&str, &RgbImage, BBox)> = heldout.iter().map(|r| (r.id.as_str(), &r.image, r.bbox)).collect();
        ap50(&detection_sets(&model, &items, cfg.conf_threshold, cfg.nms_iou)?)
    };
    Ok((
        model,
        DetectorReport {
            variant,
            final_loss: last,
            heldout_ap50,
        },
    ))
}

fn detector_loss(model: &Detector, x: &Tensor, recs: &[&SceneRecord], cfg: &DetectorConfig) -> Result<Tensor> {
    let t = targets(recs, model.shape(), cfg.assignment);
    let out = model.forward(x)?;
    let b = out.dim(0)?;
    let g = model.shape().grid;
    let flat = out.permute((0, 2, 3, 1))?.reshape((b * g * g, 6))?;
    let cls = cross_entropy(&flat.narrow(1, 0, 2)?, &t.classes)?;
    if t.pos.is_empty() {
        return Ok(cls);
    }
    let n = t.pos.len();
    let rows = flat.index_select(&Tensor::from_vec(t.pos, n, x.device())?, 0)?;
    let pred = Tensor::cat(&[&rows.narrow(1, 2, 2)?, &nn::sigmoid(&rows.narrow(1, 4, 2)?)?], 1)?;
    let tgt = Tensor::from_vec(t.boxes, (n, 4), x.device())?.to_dtype(pred.dtype())?;
    let d = (pred - tgt)?.abs()?;
    // smooth L1 with beta 0.05 on normalized coordinates
    let beta = 0.05;
    let quad = d.sqr()?.affine(0.5 / beta, 0.0)?;
    let lin = d.affine(1.0, -0.5 * beta)?;
    let sl1 = d.lt(beta)?.where_cond(&quad, &lin)?.mean_all()?;
    Ok((cls + sl1.affine(cfg.box_weight, 0.0)?)?)
}
