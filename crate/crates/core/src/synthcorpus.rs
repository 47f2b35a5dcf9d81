//! Deterministic toy dataset: textured scene backgrounds, one rounded-box
//! "vehicle" per image with an exact mask, and per-scene concept exemplars.
//!
//! Every pixel value is quantized to k/255 at generation time so that the
//! PNG persistence round trip is lossless.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::ImageEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::colorspace::RgbImage;
use crate::error::{Error, Result};
use crate::maskops::{composite, Mask};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneLabel {
    Road,
    Rural,
    Urban,
    Forest,
    Desert,
}

impl SceneLabel {
    pub const ALL: [SceneLabel; 5] = [
        SceneLabel::Road,
        SceneLabel::Rural,
        SceneLabel::Urban,
        SceneLabel::Forest,
        SceneLabel::Desert,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SceneLabel::Road => "road",
            SceneLabel::Rural => "rural",
            SceneLabel::Urban => "urban",
            SceneLabel::Forest => "forest",
            SceneLabel::Desert => "desert",
        }
    }

    pub fn index(self) -> usize {
        SceneLabel::ALL.iter().position(|l| *l == self).unwrap()
    }

    /// Concepts a procedural exemplar can be drawn for in this scene.
    pub fn concepts(self) -> &'static [&'static str] {
        match self {
            SceneLabel::Road => &["asphalt", "grass"],
            SceneLabel::Rural => &["grass", "field"],
            SceneLabel::Urban => &["building", "asphalt"],
            SceneLabel::Forest => &["tree", "grass"],
            SceneLabel::Desert => &["sand"],
        }
    }

    pub fn default_concept(self) -> &'static str {
        self.concepts()[0]
    }

    fn objects(self) -> &'static [&'static str] {
        match self {
            SceneLabel::Road => &["road", "lane marking"],
            SceneLabel::Rural => &["grass", "field"],
            SceneLabel::Urban => &["building", "pavement"],
            SceneLabel::Forest => &["tree", "undergrowth"],
            SceneLabel::Desert => &["sand", "dune"],
        }
    }
}

impl fmt::Display for SceneLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SceneLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown scene label {s:?}")))
    }
}

/// Axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn area(&self) -> f32 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f32 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        let inter = (x1 - x0).max(0.0) * (y1 - y0).max(0.0);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub image_size: usize,
    /// Vehicle long side as a fraction of the image size.
    pub vehicle_long_min: f32,
    pub vehicle_long_max: f32,
    pub scene_labels: Vec<SceneLabel>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            image_size: 64,
            vehicle_long_min: 0.45,
            vehicle_long_max: 0.58,
            scene_labels: SceneLabel::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub image: RgbImage,
    pub vehicle_mask: Mask,
    pub bbox: BBox,
    pub scene_label: SceneLabel,
    pub objects: Vec<String>,
    pub seed: u64,
}

impl SceneRecord {
    /// A record for an externally supplied image; the box is the tight box of
    /// the mask and the objects are the scene's defaults.
    pub fn from_parts(
        id: &str,
        image: RgbImage,
        vehicle_mask: Mask,
        scene_label: SceneLabel,
        seed: u64,
    ) -> Result<Self> {
        if vehicle_mask.height() != image.height() || vehicle_mask.width() != image.width() {
            return Err(Error::validation("vehicle mask and image differ in shape"));
        }
        if vehicle_mask.is_empty() {
            return Err(Error::EmptyMask(format!("vehicle mask of {id}")));
        }
        Ok(Self {
            id: id.to_string(),
            bbox: tight_box(&vehicle_mask),
            objects: scene_label.objects().iter().map(|s| s.to_string()).collect(),
            image,
            vehicle_mask,
            scene_label,
            seed,
        })
    }

    pub fn prompt(&self) -> String {
        format!("an image of {} area with {}", self.scene_label, self.objects.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptExemplar {
    pub image: RgbImage,
    pub concept_mask: Mask,
    pub concept_name: String,
    pub scene_label: SceneLabel,
}

fn q(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Mutable float canvas used while painting.
struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn new(size: usize, rgb: [f32; 3]) -> Self {
        Self {
            size,
            px: vec![rgb; size * size],
        }
    }

    fn at(&mut self, y: usize, x: usize) -> &mut [f32; 3] {
        &mut self.px[y * self.size + x]
    }

    fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [f32; 3]) {
        let s = self.size as i64;
        for y in y0.max(0)..y1.min(s) {
            for x in x0.max(0)..x1.min(s) {
                *self.at(y as usize, x as usize) = rgb;
            }
        }
    }

    fn add_noise(&mut self, noise: &[f32], tint: [f32; 3]) {
        for (p, n) in self.px.iter_mut().zip(noise) {
            for c in 0..3 {
                p[c] += n * tint[c];
            }
        }
    }

    fn into_image(self) -> RgbImage {
        let size = self.size;
        let data = self.px.into_iter().flat_map(|p| p.map(q)).collect();
        RgbImage::new(size, size, data).expect("canvas values are clamped")
    }
}

/// Smooth value noise in [-1, 1] on a `cell`-pixel lattice.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f32> {
    let n = size / cell + 2;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let gy = y as f32 / cell as f32;
        let (iy, ty) = (gy.floor() as usize, smooth(gy.fract()));
        for x in 0..size {
            let gx = x as f32 / cell as f32;
            let (ix, tx) = (gx.floor() as usize, smooth(gx.fract()));
            let v00 = lattice[iy * n + ix];
            let v01 = lattice[iy * n + ix + 1];
            let v10 = lattice[(iy + 1) * n + ix];
            let v11 = lattice[(iy + 1) * n + ix + 1];
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out.push(top + (bot - top) * ty);
        }
    }
    out
}

fn jitter(rng: &mut ChaCha8Rng, rgb: [f32; 3], amount: f32) -> [f32; 3] {
    let d = rng.random_range(-amount..amount);
    rgb.map(|c| c + d)
}

fn scale_px(size: usize, frac: f32) -> usize {
    ((size as f32 * frac).round() as usize).max(1)
}

/// Texture families. Each scene draws from at least two.
#[derive(Debug, Clone, Copy)]
enum Texture {
    Asphalt,
    LaneRoad,
    Grass,
    CropRows,
    Blocks,
    Bricks,
    Canopy,
    Undergrowth,
    Ripples,
    Dunes,
}

fn scene_textures(label: SceneLabel) -> [Texture; 2] {
    match label {
        SceneLabel::Road => [Texture::LaneRoad, Texture::Asphalt],
        SceneLabel::Rural => [Texture::Grass, Texture::CropRows],
        SceneLabel::Urban => [Texture::Blocks, Texture::Bricks],
        SceneLabel::Forest => [Texture::Canopy, Texture::Undergrowth],
        SceneLabel::Desert => [Texture::Ripples, Texture::Dunes],
    }
}

fn paint_texture(rng: &mut ChaCha8Rng, size: usize, tex: Texture) -> Canvas {
    let cell = scale_px(size, 0.125).max(2);
    match tex {
        Texture::Asphalt => {
            let mut c = Canvas::new(size, jitter(rng, [0.38, 0.38, 0.40], 0.04));
            let n = value_noise(rng, size, cell);
            c.add_noise(&n, [0.05, 0.05, 0.05]);
            c
        }
        Texture::LaneRoad => {
            let mut c = Canvas::new(size, jitter(rng, [0.33, 0.33, 0.35], 0.04));
            let n = value_noise(rng, size, cell);
            c.add_noise(&n, [0.04, 0.04, 0.04]);
            let vertical = rng.random_bool(0.5);
            let period = scale_px(size, 0.375);
            let offset = rng.random_range(0..period);
            let lw = scale_px(size, 0.04);
            for line in (offset..size).step_by(period) {
                let (a, b) = (line as i64, (line + lw) as i64);
                if vertical {
                    c.fill_rect(a, 0, b, size as i64, [0.85, 0.85, 0.8]);
                } else {
                    c.fill_rect(0, a, size as i64, b, [0.85, 0.85, 0.8]);
                }
            }
            c
        }
        Texture::Grass => {
            let mut c = Canvas::new(size, jitter(rng, [0.30, 0.52, 0.20], 0.04));
            let n = value_noise(rng, size, cell);
            c.add_noise(&n, [0.06, 0.10, 0.04]);
            c
        }
        Texture::CropRows => {
            let base = jitter(rng, [0.42, 0.55, 0.22], 0.03);
            let mut c = Canvas::new(size, base);
            let period = scale_px(size, 0.19).max(4);
            let vertical = rng.random_bool(0.5);
            for y in 0..size {
                for x in 0..size {
                    let t = if vertical { x } else { y };
                    if (t % period) < period / 2 {
                        *c.at(y, x) = [base[0] + 0.12, base[1] - 0.05, base[2] + 0.02];
                    }
                }
            }
            let n = value_noise(rng, size, cell);
            c.add_noise(&n, [0.03, 0.03, 0.02]);
            c
        }
        Texture::Blocks => {
            let mut c = Canvas::new(size, jitter(rng, [0.50, 0.50, 0.52], 0.03));
            let blocks = 6;
            for _ in 0..blocks {
                let w = rng.random_range(size / 6..size / 2) as i64;
                let h = rng.random_range(size / 6..size / 2) as i64;
                let x = rng.random_range(0..size) as i64 - w / 2;
                let y = rng.random_range(0..size) as i64 - h / 2;
                let shade = rng.random_range(0.35..0.75);
                c.fill_rect(x, y, x + w, y + h, [shade, shade * 0.95, shade * 0.9]);
            }
            c
        }
        Texture::Bricks => {
            let base = jitter(rng, [0.60, 0.36, 0.28], 0.03);
            let mut c = Canvas::new(size, base);
            let bh = scale_px(size, 0.125).max(3);
            let bw = bh * 2;
            for y in 0..size {
                for x in 0..size {
                    let row = y / bh;
                    let xs = x + if row % 2 == 1 { bw / 2 } else { 0 };
                    if y % bh == 0 || xs % bw == 0 {
                        *c.at(y, x) = [0.72, 0.70, 0.66];
                    }
                }
            }
            c
        }
        Texture::Canopy => {
            let mut c = Canvas::new(size, jitter(rng, [0.16, 0.34, 0.14], 0.03));
            let blobs = 10;
            for _ in 0..blobs {
                let cx = rng.random_range(0.0..size as f32);
                let cy = rng.random_range(0.0..size as f32);
                let r = rng.random_range(size as f32 * 0.08..size as f32 * 0.18);
                let g = rng.random_range(0.30..0.46);
                for y in 0..size {
                    for x in 0..size {
                        let d = ((x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2)).sqrt();
                        if d < r {
                            *c.at(y, x) = [g * 0.45, g, g * 0.35];
                        }
                    }
                }
            }
            c
        }
        Texture::Undergrowth => {
            let mut c = Canvas::new(size, jitter(rng, [0.30, 0.34, 0.18], 0.03));
            let n = value_noise(rng, size, cell);
            c.add_noise(&n, [0.10, 0.12, 0.05]);
            c
        }
        Texture::Ripples => {
            let base = jitter(rng, [0.80, 0.68, 0.46], 0.03);
            let mut c = Canvas::new(size, base);
            let period = size as f32 * rng.random_range(0.18..0.26);
            let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
            let (s, co) = angle.sin_cos();
            for y in 0..size {
                for x in 0..size {
                    let t = (x as f32 * co + y as f32 * s) / period * std::f32::consts::TAU;
                    let v = 0.06 * t.sin();
                    let p = c.at(y, x);
                    for ch in p.iter_mut() {
                        *ch += v;
                    }
                }
            }
            c
        }
        Texture::Dunes => {
            let mut c = Canvas::new(size, jitter(rng, [0.76, 0.62, 0.40], 0.03));
            let n = value_noise(rng, size, cell * 2);
            c.add_noise(&n, [0.10, 0.09, 0.06]);
            c
        }
    }
}

fn check_label(label: SceneLabel, params: &GenParams) -> Result<()> {
    if !params.scene_labels.contains(&label) {
        return Err(Error::validation(format!("scene label {label} is not configured")));
    }
    if params.image_size < 16 {
        return Err(Error::validation("image_size must be at least 16"));
    }
    Ok(())
}

/// Textured background for a scene, without a vehicle.
pub fn gen_background(seed: u64, label: SceneLabel, params: &GenParams) -> Result<RgbImage> {
    check_label(label, params)?;
    let mut rng = rng_for(seed, 1 + label.index() as u64);
    let family = scene_textures(label)[rng.random_range(0..2)];
    Ok(paint_texture(&mut rng, params.image_size, family).into_image())
}

/// Pose of the rounded-box vehicle, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleShape {
    pub x0: f32,
    pub y0: f32,
    pub w: f32,
    pub h: f32,
    pub radius: f32,
}

impl VehicleShape {
    /// Pixel-center containment test for the rounded rectangle.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let px = x as f32 + 0.5;
        let py = y as f32 + 0.5;
        if px < self.x0 || py < self.y0 || px > self.x0 + self.w || py > self.y0 + self.h {
            return false;
        }
        let r = self.radius;
        let cx = px.clamp(self.x0 + r, self.x0 + self.w - r);
        let cy = py.clamp(self.y0 + r, self.y0 + self.h - r);
        (px - cx).powi(2) + (py - cy).powi(2) <= r * r
    }
}

const VEHICLE_COLORS: [[f32; 3]; 6] = [
    [0.80, 0.12, 0.12],
    [0.12, 0.25, 0.80],
    [0.92, 0.80, 0.10],
    [0.95, 0.95, 0.95],
    [0.10, 0.10, 0.12],
    [0.95, 0.50, 0.08],
];

fn draw_vehicle(rng: &mut ChaCha8Rng, size: usize, params: &GenParams) -> (VehicleShape, Canvas) {
    let long = rng.random_range(params.vehicle_long_min..=params.vehicle_long_max) * size as f32;
    let short = long * rng.random_range(0.60..0.75);
    let horizontal = rng.random_bool(0.5);
    let (w, h) = if horizontal { (long, short) } else { (short, long) };
    let (w, h) = (w.round(), h.round());
    let margin = 1.0;
    let x0 = rng.random_range(margin..(size as f32 - w - margin)).round();
    let y0 = rng.random_range(margin..(size as f32 - h - margin)).round();
    let shape = VehicleShape {
        x0,
        y0,
        w,
        h,
        radius: (short * 0.22).round().max(1.0),
    };

    let body = VEHICLE_COLORS[rng.random_range(0..VEHICLE_COLORS.len())];
    let mut c = Canvas::new(size, body);
    // darker windshield band and a lighter roof panel along the long axis
    let glass = [0.08, 0.10, 0.14];
    let roof = body.map(|v| v * 0.75 + 0.2);
    let front_first = rng.random_bool(0.5);
    let (a, b) = if front_first { (0.18, 0.32) } else { (0.68, 0.82) };
    for y in 0..size {
        for x in 0..size {
            let (u, v) = if horizontal {
                ((x as f32 + 0.5 - x0) / w, (y as f32 + 0.5 - y0) / h)
            } else {
                ((y as f32 + 0.5 - y0) / h, (x as f32 + 0.5 - x0) / w)
            };
            let inner = (0.18..0.82).contains(&v);
            if (a..b).contains(&u) && inner {
                *c.at(y, x) = glass;
            } else if (0.36..0.64).contains(&u) && inner {
                *c.at(y, x) = roof;
            }
        }
    }
    (shape, c)
}

/// Rasterizes `shape` into a mask.
pub fn rasterize_vehicle(shape: &VehicleShape, size: usize) -> Mask {
    Mask::from_fn(size, size, |y, x| shape.contains(y, x))
}

fn tight_box(m: &Mask) -> BBox {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    BBox {
        x: x0 as f32,
        y: y0 as f32,
        w: (x1 - x0) as f32,
        h: (y1 - y0) as f32,
    }
}

/// Everything `gen_scene` draws, kept separate for construction checks.
pub struct SceneLayers {
    pub background: RgbImage,
    pub vehicle_layer: RgbImage,
    pub shape: VehicleShape,
}

pub fn gen_scene_layers(seed: u64, label: SceneLabel, params: &GenParams) -> Result<SceneLayers> {
    let background = gen_background(seed, label, params)?;
    let mut rng = rng_for(seed, 100);
    let (shape, canvas) = draw_vehicle(&mut rng, params.image_size, params);
    Ok(SceneLayers {
        background,
        vehicle_layer: canvas.into_image(),
        shape,
    })
}

pub fn gen_scene(seed: u64, label: SceneLabel, params: &GenParams) -> Result<SceneRecord> {
    let layers = gen_scene_layers(seed, label, params)?;
    let mask = rasterize_vehicle(&layers.shape, params.image_size);
    let image = composite(&layers.vehicle_layer, &layers.background, &mask)?;
    let bbox = tight_box(&mask);
    let mut objects = vec!["car".to_string()];
    objects.extend(label.objects().iter().map(|s| s.to_string()));
    Ok(SceneRecord {
        id: format!("s{seed:010}"),
        image,
        vehicle_mask: mask,
        bbox,
        scene_label: label,
        objects,
        seed,
    })
}

fn concept_texture(concept: &str) -> Option<Texture> {
    Some(match concept {
        "asphalt" => Texture::Asphalt,
        "grass" => Texture::Grass,
        "field" => Texture::CropRows,
        "building" => Texture::Blocks,
        "tree" => Texture::Canopy,
        "sand" => Texture::Dunes,
        _ => return None,
    })
}

pub fn gen_concept_exemplar(
    seed: u64,
    label: SceneLabel,
    concept_name: &str,
    params: &GenParams,
) -> Result<ConceptExemplar> {
    check_label(label, params)?;
    if !label.concepts().contains(&concept_name) {
        return Err(Error::validation(format!(
            "concept {concept_name:?} is not configured for scene {label}"
        )));
    }
    let tex = concept_texture(concept_name).expect("configured concepts have textures");
    let size = params.image_size;
    let mut rng = rng_for(seed, 200 + label.index() as u64);
    let patch = paint_texture(&mut rng, size, tex).into_image();
    let cx = size as f32 * rng.random_range(0.45..0.55);
    let cy = size as f32 * rng.random_range(0.45..0.55);
    let rx = size as f32 * rng.random_range(0.36..0.44);
    let ry = size as f32 * rng.random_range(0.36..0.44);
    let mask = Mask::from_fn(size, size, |y, x| {
        let dx = (x as f32 + 0.5 - cx) / rx;
        let dy = (y as f32 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    });
    let neutral = RgbImage::filled(size, size, [q(0.5); 3])?;
    let image = composite(&patch, &neutral, &mask)?;
    Ok(ConceptExemplar {
        image,
        concept_mask: mask,
        concept_name: concept_name.to_string(),
        scene_label: label,
    })
}

// ---------------------------------------------------------------------------
// Splits and persistence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub params: GenParams,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            params: GenParams::default(),
            n_train: 2000,
            n_val: 100,
            n_test: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDef {
    pub seed_start: u64,
    pub count: usize,
}

impl CorpusConfig {
    /// Seed ranges are disjoint: each split lives in its own 2^32 block.
    pub fn split_def(&self, split: Split) -> SplitDef {
        let (block, count) = match split {
            Split::Train => (0u64, self.n_train),
            Split::Val => (1, self.n_val),
            Split::Test => (2, self.n_test),
        };
        SplitDef {
            seed_start: (self.seed << 34) | (block << 32),
            count,
        }
    }

    pub fn label_for(&self, index: usize) -> SceneLabel {
        let labels = &self.params.scene_labels;
        labels[index % labels.len()]
    }

    pub fn generate_split(&self, split: Split) -> Result<Vec<SceneRecord>> {
        let def = self.split_def(split);
        (0..def.count)
            .map(|i| gen_scene(def.seed_start + i as u64, self.label_for(i), &self.params))
            .collect()
    }

    pub fn generate(&self) -> Result<Corpus> {
        Ok(Corpus {
            config: Some(self.clone()),
            train: self.generate_split(Split::Train)?,
            val: self.generate_split(Split::Val)?,
            test: self.generate_split(Split::Test)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub config: Option<CorpusConfig>,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[SceneRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty() && self.test.is_empty()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .next()
            .map(|r| r.image.height())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordMeta {
    scene_label: SceneLabel,
    objects: Vec<String>,
    #[serde(rename = "box")]
    bbox: BBox,
    seed: u64,
    prompt: String,
    checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusManifest {
    format_version: u32,
    generator: Option<CorpusConfig>,
    splits: BTreeMap<String, SplitManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitManifest {
    seed_start: Option<u64>,
    ids: Vec<String>,
}

fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(
        &raw,
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(out)
}

/// Writes an 8-bit RGB PNG.
pub fn save_rgb_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_png_rgb(img)?)?;
    Ok(())
}

fn checksum(image_png: &[u8], mask_png: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(image_png);
    h.update(mask_png);
    hex::encode(h.finalize())
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    for sub in ["images", "masks", "meta"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut splits = BTreeMap::new();
    for (name, split) in [("train", Split::Train), ("val", Split::Val), ("test", Split::Test)] {
        let records = corpus.split(split);
        for r in records {
            let img_png = encode_png_rgb(&r.image)?;
            let mask_path = dir.join("masks").join(format!("{}.png", r.id));
            r.vehicle_mask.save_png(&mask_path)?;
            let mask_png = fs::read(&mask_path)?;
            fs::write(dir.join("images").join(format!("{}.png", r.id)), &img_png)?;
            let meta = RecordMeta {
                scene_label: r.scene_label,
                objects: r.objects.clone(),
                bbox: r.bbox,
                seed: r.seed,
                prompt: r.prompt(),
                checksum: checksum(&img_png, &mask_png),
            };
            fs::write(
                dir.join("meta").join(format!("{}.json", r.id)),
                serde_json::to_vec_pretty(&meta)?,
            )?;
        }
        splits.insert(
            name.to_string(),
            SplitManifest {
                seed_start: corpus.config.as_ref().map(|c| c.split_def(split).seed_start),
                ids: records.iter().map(|r| r.id.clone()).collect(),
            },
        );
    }
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        generator: corpus.config.clone(),
        splits,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_record(dir: &Path, id: &str) -> Result<SceneRecord> {
    let img_path = dir.join("images").join(format!("{id}.png"));
    let mask_path = dir.join("masks").join(format!("{id}.png"));
    let meta_path = dir.join("meta").join(format!("{id}.json"));
    let img_png = fs::read(&img_path).map_err(|e| Error::load(&img_path, e))?;
    let mask_png = fs::read(&mask_path).map_err(|e| Error::load(&mask_path, e))?;
    let meta_bytes = fs::read(&meta_path).map_err(|e| Error::load(&meta_path, e))?;
    let meta: RecordMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::load(&meta_path, e))?;
    if checksum(&img_png, &mask_png) != meta.checksum {
        return Err(Error::load(&meta_path, format!("checksum mismatch for record {id}")));
    }
    let decoded = image::load_from_memory(&img_png)
        .map_err(|e| Error::load(&img_path, e))?
        .to_rgb8();
    let (w, h) = decoded.dimensions();
    let data = decoded.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    let image = RgbImage::new(h as usize, w as usize, data)?;
    let vehicle_mask = Mask::load_png(&mask_path)?;
    Ok(SceneRecord {
        id: id.to_string(),
        image,
        vehicle_mask,
        bbox: meta.bbox,
        scene_label: meta.scene_label,
        objects: meta.objects,
        seed: meta.seed,
    })
}

/// Reads a corpus written by [`write_corpus`]. A directory without a manifest
/// is an empty corpus.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Ok(Corpus::default());
    }
    let bytes = fs::read(&manifest_path)?;
    let manifest: CorpusManifest = serde_json::from_slice(&bytes).map_err(|e| Error::load(&manifest_path, e))?;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::load(
            &manifest_path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let mut corpus = Corpus {
        config: manifest.generator.clone(),
        ..Default::default()
    };
    for (name, split) in &manifest.splits {
        let records = split
            .ids
            .iter()
            .map(|id| read_record(dir, id))
            .collect::<Result<Vec<_>>>()?;
        match name.as_str() {
            "train" => corpus.train = records,
            "val" => corpus.val = records,
            "test" => corpus.test = records,
            other => return Err(Error::load(&manifest_path, format!("unknown split {other}"))),
        }
    }
    Ok(corpus)
}

/// SHA-256 of the manifest file, used for report provenance.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let bytes = fs::read(dir.join("manifest.json"))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
