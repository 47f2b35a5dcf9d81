use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use camodiff::backend::{forward_noise, gaussian, one_step_estimate, FlowTarget, NoiseSchedule};
use camodiff::colorspace::{lab_to_rgb, lab_to_srgb, rgb_to_lab, rgb_to_lab_tensor, RgbImage};
use camodiff::detect::{ap50, f1_optimal_threshold, nms, Detection, DetectionSet};
use camodiff::losses::{adversarial_loss, background_loss, color_consistency_loss, struct_loss, style_loss};
use camodiff::maskops::{dilate, Mask};
use camodiff::synthcorpus::BBox;

use crate::common::*;
use crate::Outcome;

pub fn inverse_identity() -> Outcome {
    let start = Instant::now();
    let dev = Device::Cpu;
    let mut r = rng(1);
    let schedules = [
        ("diffusion", NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()),
        ("flow z0-eps", NoiseSchedule::rectflow(FlowTarget::DataMinusNoise)),
        ("flow eps-z0", NoiseSchedule::rectflow(FlowTarget::NoiseMinusData)),
    ];
    let mut worst = Vec::new();
    for (name, s) in &schedules {
        let mut max_err: f64 = 0.0;
        for trial in 0..100u64 {
            let z0 = gaussian(&[2, 4, 8, 8], trial, 1, &dev, DType::F64).unwrap();
            let eps = gaussian(&[2, 4, 8, 8], trial, 2, &dev, DType::F64).unwrap();
            let t = match s {
                NoiseSchedule::Diffusion { .. } => r.random_range(0..1000) as f64,
                NoiseSchedule::Rectflow { .. } => r.random_range(0.0..=1.0),
            };
            let zt = forward_noise(&z0, t, &eps, s).unwrap();
            let back = one_step_estimate(&zt, t, &s.target(&z0, &eps, t).unwrap(), s).unwrap();
            let err = scalar(&(back - &z0).unwrap().abs().unwrap().max_all().unwrap());
            max_err = max_err.max(err);
        }
        worst.push((name, max_err));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|(_, e)| *e <= 1e-5) && secs < 5.0;
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} max err {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(pass, format!("{detail}; {secs:.2}s (limit 5s)"))
}

/// Relative error between the analytic directional derivative along `v` and
/// the central difference of `f` at `x`.
fn directional_check(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, v: &Tensor) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let g = grads.get(var.as_tensor()).expect("input receives no gradient");
    let analytic = scalar(&(g * v).unwrap().sum_all().unwrap());
    let h = 1e-6;
    let plus = scalar(&f(&(x + v.affine(h, 0.0).unwrap()).unwrap()));
    let minus = scalar(&f(&(x - v.affine(h, 0.0).unwrap()).unwrap()));
    let fd = (plus - minus) / (2.0 * h);
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let ae = tiny_ae(3);
    let critic = tiny_critic(4);
    let detector = tiny_detector(5);
    let mut r = rng(2);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let names = ["struct", "style", "background", "color", "adversarial", "rgb_to_lab"];
    for name in names {
        let mut max_rel: f64 = 0.0;
        for _ in 0..20 {
            let x = image(&mut r, 8, 0.05, 0.95);
            let other = image(&mut r, 8, 0.05, 0.95);
            // width >= 5 always covers a detector cell center on the 2x2 grid
            let m = rect_mask(&mut r, 8, 5);
            let ms = rect_mask(&mut r, 8, 3);
            let v = image(&mut r, 8, -1.0, 1.0);
            let w = image(&mut r, 8, -1.0, 1.0);
            let f: Box<dyn Fn(&Tensor) -> Tensor> = match name {
                "struct" => Box::new(|t| struct_loss(&other, t, &[&m]).unwrap()),
                "style" => Box::new(|t| style_loss(&critic, &ae, t, &[&m], &other, &[&ms]).unwrap()),
                "background" => Box::new(|t| background_loss(&critic, &ae, &other, t, &[&m]).unwrap()),
                "color" => Box::new(|t| color_consistency_loss(&other, t, &[&m]).unwrap()),
                "adversarial" => Box::new(|t| adversarial_loss(&detector, t, &[&m]).unwrap()),
                _ => Box::new(|t| (rgb_to_lab_tensor(t).unwrap() * &w).unwrap().sum_all().unwrap()),
            };
            max_rel = max_rel.max(directional_check(f.as_ref(), &x, &v));
        }
        worst.push((name, max_rel));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|(_, e)| *e <= 1e-3) && secs < 120.0;
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(pass, format!("max rel err: {detail}; {secs:.1}s (limit 120s)"))
}

fn lab_image(lab: [f64; 3]) -> Tensor {
    let rgb = lab_to_srgb(lab);
    assert!(rgb.iter().all(|c| (0.0..=1.0).contains(c)), "{lab:?} is out of gamut");
    constant_image(rgb, 8)
}

pub fn fixed_points() -> Outcome {
    let ae = tiny_ae(6);
    let critic = tiny_critic(7);
    let mut r = rng(3);
    let x = image(&mut r, 8, 0.0, 1.0);
    let m = rect_mask(&mut r, 8, 4);
    let mut notes = Vec::new();
    let mut pass = true;
    let mut exact = |name: &str, v: f64| {
        pass &= v == 0.0;
        notes.push(format!("{name}={v:e}"));
    };
    exact("struct", scalar(&struct_loss(&x, &x, &[&m]).unwrap()));
    exact(
        "style",
        scalar(&style_loss(&critic, &ae, &x, &[&m], &x, &[&m]).unwrap()),
    );
    exact(
        "background",
        scalar(&background_loss(&critic, &ae, &x, &x, &[&m]).unwrap()),
    );
    exact("color", scalar(&color_consistency_loss(&x, &x, &[&m]).unwrap()));
    let sure = constant_detector([1000.0, 0.0]);
    exact("adversarial", scalar(&adversarial_loss(&sure, &x, &[&m]).unwrap()));

    let cell = Mask::from_fn(8, 8, |y, x| y == 2 && x == 2);
    let analytic = [
        (
            "L offset 0.2",
            scalar(&struct_loss(&lab_image([50.0, 0.0, 0.0]), &lab_image([70.0, 0.0, 0.0]), &[&m]).unwrap()),
            0.04,
        ),
        (
            "AB offset 0.1",
            scalar(
                &color_consistency_loss(&lab_image([60.0, 10.0, 10.0]), &lab_image([60.0, 35.5, 35.5]), &[&m]).unwrap(),
            ),
            0.02,
        ),
        (
            "logits (0,0)",
            scalar(&adversarial_loss(&constant_detector([0.0, 0.0]), &x, &[&cell]).unwrap()),
            2f64.ln(),
        ),
        (
            "logits (0,2)",
            scalar(&adversarial_loss(&constant_detector([0.0, 2.0]), &x, &[&cell]).unwrap()),
            (1.0 + 2f64.exp()).ln(),
        ),
    ];
    for (name, got, want) in analytic {
        pass &= (got - want).abs() <= 1e-6;
        notes.push(format!("{name}: {got:.9} vs {want:.9}"));
    }
    Outcome::new(pass, notes.join(", "))
}

// ---------------------------------------------------------------------------
// Oracles

fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1) = (a.x as f64 + a.w as f64, a.y as f64 + a.h as f64);
    let (bx1, by1) = (b.x as f64 + b.w as f64, b.y as f64 + b.h as f64);
    let iw = (ax1.min(bx1) - (a.x as f64).max(b.x as f64)).max(0.0);
    let ih = (ay1.min(by1) - (a.y as f64).max(b.y as f64)).max(0.0);
    let inter = iw * ih;
    let union = a.w as f64 * a.h as f64 + b.w as f64 * b.h as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// True-positive count of the detections with confidence >= `threshold`,
/// matching each (in descending confidence) to its best unused ground truth.
fn true_positives(sets: &[DetectionSet], threshold: f64) -> (usize, usize) {
    let mut dets: Vec<(f64, usize, BBox)> = Vec::new();
    for (i, s) in sets.iter().enumerate() {
        for d in &s.detections {
            if d.confidence >= threshold {
                dets.push((d.confidence, i, d.bbox));
            }
        }
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used: Vec<Vec<bool>> = sets.iter().map(|s| vec![false; s.ground_truth.len()]).collect();
    let mut tp = 0;
    for (_, i, b) in &dets {
        let best = sets[*i]
            .ground_truth
            .iter()
            .enumerate()
            .filter(|(k, g)| !used[*i][*k] && iou(b, g) >= 0.5)
            .max_by(|x, y| iou(b, x.1).total_cmp(&iou(b, y.1)));
        if let Some((k, _)) = best {
            used[*i][k] = true;
            tp += 1;
        }
    }
    (tp, dets.len())
}

/// Enumerates every confidence cutoff, recomputes precision and recall from
/// scratch, and integrates the upper envelope of precision over recall.
fn brute_force_ap(sets: &[DetectionSet]) -> f64 {
    let n_gt: usize = sets.iter().map(|s| s.ground_truth.len()).sum();
    let mut confs: Vec<f64> = sets
        .iter()
        .flat_map(|s| s.detections.iter().map(|d| d.confidence))
        .collect();
    confs.sort_by(|a, b| b.total_cmp(a));
    let points: Vec<(f64, f64)> = confs
        .iter()
        .map(|&c| {
            let (tp, n) = true_positives(sets, c);
            (tp as f64 / n_gt as f64, tp as f64 / n as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(rec, _) in &points {
        if rec > prev {
            let p = points
                .iter()
                .filter(|(r, _)| *r >= rec)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            ap += (rec - prev) * p;
            prev = rec;
        }
    }
    ap
}

fn random_box(r: &mut impl Rng) -> BBox {
    BBox {
        x: r.random_range(0.0..20.0),
        y: r.random_range(0.0..20.0),
        w: r.random_range(3.0..10.0),
        h: r.random_range(3.0..10.0),
    }
}

/// A few images; detections are jittered copies of ground truth or strays.
fn random_sets(r: &mut impl Rng) -> Vec<DetectionSet> {
    let n = r.random_range(1..5);
    let mut sets: Vec<DetectionSet> = (0..n)
        .map(|i| {
            let gts: Vec<BBox> = (0..r.random_range(0..3)).map(|_| random_box(r)).collect();
            let mut dets = Vec::new();
            for g in &gts {
                for _ in 0..r.random_range(0..3) {
                    let b = BBox {
                        x: g.x + r.random_range(-1.0..1.0),
                        y: g.y + r.random_range(-1.0..1.0),
                        w: g.w,
                        h: g.h,
                    };
                    dets.push(Detection {
                        bbox: b,
                        confidence: r.random_range(0.0..1.0),
                    });
                }
            }
            for _ in 0..r.random_range(0..3) {
                dets.push(Detection {
                    bbox: random_box(r),
                    confidence: r.random_range(0.0..1.0),
                });
            }
            DetectionSet {
                image_id: format!("img{i}"),
                detections: dets,
                ground_truth: gts,
            }
        })
        .collect();
    if sets.iter().all(|s| s.ground_truth.is_empty()) {
        sets[0].ground_truth.push(random_box(r));
    }
    sets
}

fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut suppressed = vec![false; dets.len()];
    let mut out = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        out.push(dets[i]);
        for &j in &order[k + 1..] {
            if iou(&dets[i].bbox, &dets[j].bbox) > thr {
                suppressed[j] = true;
            }
        }
    }
    out
}

fn window_max(m: &Mask, k: usize) -> Mask {
    let r = (k / 2) as isize;
    let (h, w) = (m.height() as isize, m.width() as isize);
    Mask::from_fn(m.height(), m.width(), |y, x| {
        let mut on = false;
        for yy in y as isize - r..=y as isize + r {
            for xx in x as isize - r..=x as isize + r {
                if (0..h).contains(&yy) && (0..w).contains(&xx) {
                    on |= m.get(yy as usize, xx as usize);
                }
            }
        }
        on
    })
}

fn f1_oracle(sets: &[DetectionSet], t: f64) -> f64 {
    let n_gt: usize = sets.iter().map(|s| s.ground_truth.len()).sum();
    let (tp, n) = true_positives(sets, t);
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (n + n_gt) as f64
    }
}

pub fn oracles() -> Outcome {
    let mut r = rng(4);
    let mut ap_err: f64 = 0.0;
    let mut nms_mismatch = 0;
    let mut f1_mismatch = 0;
    for _ in 0..50 {
        let sets = random_sets(&mut r);
        ap_err = ap_err.max((ap50(&sets) - brute_force_ap(&sets)).abs());

        let dets: Vec<Detection> = sets.iter().flat_map(|s| s.detections.clone()).collect();
        let thr = r.random_range(0.2..0.8);
        if nms(&dets, thr) != reference_nms(&dets, thr) {
            nms_mismatch += 1;
        }

        if !dets.is_empty() {
            // sweep every distinct confidence; ties go to the higher threshold
            let mut cands: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
            cands.sort_by(|a, b| b.total_cmp(a));
            let best = cands
                .iter()
                .map(|&t| (f1_oracle(&sets, t), t))
                .fold(
                    (f64::NEG_INFINITY, f64::NAN),
                    |acc, x| if x.0 > acc.0 { x } else { acc },
                );
            if f1_optimal_threshold(&sets).unwrap() != best.1 {
                f1_mismatch += 1;
            }
        }
    }
    let mut dil_mismatch = 0;
    for i in 0..50 {
        let m = random_mask(&mut r, 16, if i % 2 == 0 { 0.05 } else { 0.3 });
        let k = [1, 3, 5, 7][i % 4];
        if dilate(&m, k).unwrap() != window_max(&m, k) {
            dil_mismatch += 1;
        }
    }
    let pass = ap_err <= 1e-9 && nms_mismatch == 0 && f1_mismatch == 0 && dil_mismatch == 0;
    Outcome::new(
        pass,
        format!(
            "AP50 max |diff| {ap_err:.1e} over 50 sets; NMS mismatches {nms_mismatch}/50; \
             dilation mismatches {dil_mismatch}/50; F1-threshold mismatches {f1_mismatch}"
        ),
    )
}

pub fn color_round_trip() -> Outcome {
    let mut r = rng(5);
    let data: Vec<f32> = (0..30_000).map(|_| r.random_range(0.0..=1.0)).collect();
    let img = RgbImage::new(100, 100, data).unwrap();
    let back = lab_to_rgb(&rgb_to_lab(&img).unwrap()).unwrap();
    let max_err = img
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    let grays: Vec<f32> = (0..1000).flat_map(|i| [i as f32 / 999.0; 3]).collect();
    let lab = rgb_to_lab(&RgbImage::new(1, 1000, grays).unwrap()).unwrap();
    let max_ab = lab.a.iter().chain(&lab.b).map(|v| v.abs() as f64).fold(0.0, f64::max);
    Outcome::new(
        max_err <= 1e-3 && max_ab <= 1e-6,
        format!("10000 samples, max channel error {max_err:.2e} (limit 1e-3); achromatic max |a|,|b| {max_ab:.1e}"),
    )
}
