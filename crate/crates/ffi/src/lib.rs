//! C interface to camodiff: color conversion, SSIM, AP50, and loaded
//! detector and generator handles.
//!
//! Every function returns a `CamodiffStatus`. On failure the message is
//! retrievable with `camodiff_last_error` on the same thread until the next
//! call. Images are row-major interleaved RGB `f32` in [0,1].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use camodiff::colorspace::{rgb_to_lab, RgbImage};
use camodiff::detect::{ap50, detect_boxes, Detection, DetectionSet, Detector};
use camodiff::evalharness::ssim;
use camodiff::maskops::Mask;
use camodiff::pipeline::Generator;
use camodiff::synthcorpus::{BBox, SceneLabel, SceneRecord};
use camodiff::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamodiffStatus {
    Ok = 0,
    Internal = 1,
    Validation = 2,
    NotReady = 3,
    Numerical = 4,
    NullPointer = 5,
    /// The output buffer was too small; the required length was written.
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamodiffBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamodiffDetection {
    pub bbox: CamodiffBox,
    pub confidence: f64,
}

/// Detections and ground truth of one image, borrowed for one call.
#[repr(C)]
pub struct CamodiffImageResult {
    pub detections: *const CamodiffDetection,
    pub n_detections: usize,
    pub ground_truth: *const CamodiffBox,
    pub n_ground_truth: usize,
}

/// Opaque handle to a frozen detector.
pub struct CamodiffDetector(Detector);

/// Opaque handle to a frozen generator checkpoint.
pub struct CamodiffGenerator(Generator);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CamodiffStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => CamodiffStatus::Validation,
            3 => CamodiffStatus::NotReady,
            4 => CamodiffStatus::Numerical,
            _ => CamodiffStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CamodiffStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CamodiffStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CamodiffStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside camodiff".into());
            CamodiffStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CamodiffStatus::Validation, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn image(rgb: *const f32, height: usize, width: usize) -> Result<RgbImage, Failure> {
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Failure(CamodiffStatus::Validation, "image dimensions overflow".into()))?;
    Ok(RgbImage::new(height, width, slice(rgb, n, "rgb")?.to_vec())?)
}

fn to_bbox(b: &CamodiffBox) -> BBox {
    BBox {
        x: b.x,
        y: b.y,
        w: b.w,
        h: b.h,
    }
}

fn from_bbox(b: &BBox) -> CamodiffBox {
    CamodiffBox {
        x: b.x,
        y: b.y,
        w: b.w,
        h: b.h,
    }
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library and valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn camodiff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Converts `height*width` RGB pixels to interleaved (L, a, b).
///
/// # Safety
/// `rgb` and `lab_out` must each hold `height*width*3` floats.
#[no_mangle]
pub unsafe extern "C" fn camodiff_rgb_to_lab(
    rgb: *const f32,
    height: usize,
    width: usize,
    lab_out: *mut f32,
) -> CamodiffStatus {
    guard(|| {
        let img = image(rgb, height, width)?;
        let lab = rgb_to_lab(&img)?;
        let out = slice_mut(lab_out, height * width * 3, "lab_out")?;
        for i in 0..height * width {
            out[3 * i] = lab.l[i];
            out[3 * i + 1] = lab.a[i];
            out[3 * i + 2] = lab.b[i];
        }
        Ok(())
    })
}

/// Grayscale SSIM of two equally sized RGB images.
///
/// # Safety
/// `a` and `b` must each hold `height*width*3` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn camodiff_ssim(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CamodiffStatus {
    guard(|| {
        let v = ssim(&image(a, height, width)?, &image(b, height, width)?)?;
        *slice_mut(out, 1, "out")?.first_mut().unwrap() = v;
        Ok(())
    })
}

/// AP at IoU 0.5 over `n_images` per-image results.
///
/// # Safety
/// `images` must hold `n_images` entries whose arrays match their counts.
#[no_mangle]
pub unsafe extern "C" fn camodiff_ap50(
    images: *const CamodiffImageResult,
    n_images: usize,
    out: *mut f64,
) -> CamodiffStatus {
    guard(|| {
        let mut sets = Vec::with_capacity(n_images);
        for (i, r) in slice(images, n_images, "images")?.iter().enumerate() {
            let detections = slice(r.detections, r.n_detections, "detections")?
                .iter()
                .map(|d| Detection {
                    bbox: to_bbox(&d.bbox),
                    confidence: d.confidence,
                })
                .collect();
            let ground_truth = slice(r.ground_truth, r.n_ground_truth, "ground_truth")?
                .iter()
                .map(to_bbox)
                .collect();
            sets.push(DetectionSet {
                image_id: i.to_string(),
                detections,
                ground_truth,
            });
        }
        *slice_mut(out, 1, "out")?.first_mut().unwrap() = ap50(&sets);
        Ok(())
    })
}

/// Loads a detector checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn camodiff_detector_load(dir: *const c_char, out: *mut *mut CamodiffDetector) -> CamodiffStatus {
    guard(|| {
        let slot = slice_mut(out, 1, "out")?;
        let det = Detector::load(&path(dir)?)?.frozen()?;
        slot[0] = Box::into_raw(Box::new(CamodiffDetector(det)));
        Ok(())
    })
}

/// Detects vehicles above `conf_threshold` after NMS at `nms_iou`. Writes at
/// most `capacity` detections and the total count to `n_out`.
///
/// # Safety
/// `det` must come from `camodiff_detector_load`; `rgb` must hold
/// `height*width*3` floats; `out` must hold `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn camodiff_detector_detect(
    det: *const CamodiffDetector,
    rgb: *const f32,
    height: usize,
    width: usize,
    conf_threshold: f64,
    nms_iou: f64,
    out: *mut CamodiffDetection,
    capacity: usize,
    n_out: *mut usize,
) -> CamodiffStatus {
    guard(|| {
        let det = det.as_ref().ok_or_else(|| null("detector"))?;
        let n_slot = slice_mut(n_out, 1, "n_out")?;
        let found = detect_boxes(&det.0, &image(rgb, height, width)?, conf_threshold, nms_iou)?;
        n_slot[0] = found.len();
        if found.len() > capacity {
            return Err(Failure(
                CamodiffStatus::BufferTooSmall,
                format!("{} detections, capacity {capacity}", found.len()),
            ));
        }
        if !found.is_empty() {
            let dst = slice_mut(out, found.len(), "out")?;
            for (d, s) in dst.iter_mut().zip(&found) {
                *d = CamodiffDetection {
                    bbox: from_bbox(&s.bbox),
                    confidence: s.confidence,
                };
            }
        }
        Ok(())
    })
}

/// # Safety
/// `det` must come from `camodiff_detector_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn camodiff_detector_free(det: *mut CamodiffDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Loads a stage checkpoint together with the autoencoder it records.
///
/// # Safety
/// `checkpoint` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn camodiff_generator_load(
    checkpoint: *const c_char,
    out: *mut *mut CamodiffGenerator,
) -> CamodiffStatus {
    guard(|| {
        let slot = slice_mut(out, 1, "out")?;
        let gen = Generator::load(&path(checkpoint)?)?;
        slot[0] = Box::into_raw(Box::new(CamodiffGenerator(gen)));
        Ok(())
    })
}

/// Camouflages the vehicle under `mask` (one byte per pixel, nonzero inside)
/// and writes the raw sample and its composite over the input.
///
/// # Safety
/// `gen` must come from `camodiff_generator_load`; `rgb`, `camouflaged_out`
/// and `composited_out` must hold `height*width*3` floats; `mask` must hold
/// `height*width` bytes; `scene_label` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn camodiff_generator_infer(
    gen: *const CamodiffGenerator,
    rgb: *const f32,
    mask: *const u8,
    height: usize,
    width: usize,
    scene_label: *const c_char,
    seed: u64,
    camouflaged_out: *mut f32,
    composited_out: *mut f32,
) -> CamodiffStatus {
    guard(|| {
        let gen = gen.as_ref().ok_or_else(|| null("generator"))?;
        let img = image(rgb, height, width)?;
        let m: Vec<u8> = slice(mask, height * width, "mask")?
            .iter()
            .map(|&v| u8::from(v != 0))
            .collect();
        let mask = Mask::new(height, width, m)?;
        if scene_label.is_null() {
            return Err(null("scene_label"));
        }
        let label: SceneLabel = CStr::from_ptr(scene_label)
            .to_str()
            .map_err(|_| Failure(CamodiffStatus::Validation, "scene label is not UTF-8".into()))?
            .parse()?;
        let record = SceneRecord::from_parts("ffi", img, mask, label, seed)?;
        let (cam, comp) = gen.0.infer(&record, seed)?;
        let n = height * width * 3;
        slice_mut(camouflaged_out, n, "camouflaged_out")?.copy_from_slice(cam.data());
        slice_mut(composited_out, n, "composited_out")?.copy_from_slice(comp.data());
        Ok(())
    })
}

/// # Safety
/// `gen` must come from `camodiff_generator_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn camodiff_generator_free(gen: *mut CamodiffGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}
