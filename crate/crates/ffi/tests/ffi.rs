use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use camodiff::backend::{AeShape, Autoencoder};
use camodiff::colorspace::srgb_to_lab;
use camodiff::config::Config;
use camodiff::critic::{Critic, CriticShape};
use camodiff::detect::{ArchVariant, Detector, DetectorShape};
use camodiff::pipeline::{latest_checkpoint, record_seed, Generator, Stage, Workspace};
use camodiff::synthcorpus::GenParams;
use camodiff::workflow;
use camodiff_ffi::*;

fn last_error() -> String {
    let p = camodiff_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn rgb_to_lab_matches_core() {
    let rgb = [0.5f32, 0.5, 0.5, 1.0, 0.0, 0.0];
    let mut lab = [0f32; 6];
    let s = unsafe { camodiff_rgb_to_lab(rgb.as_ptr(), 1, 2, lab.as_mut_ptr()) };
    assert_eq!(s, CamodiffStatus::Ok);
    assert!(camodiff_last_error().is_null());
    for (px, out) in rgb.chunks(3).zip(lab.chunks(3)) {
        let want = srgb_to_lab([px[0] as f64, px[1] as f64, px[2] as f64]);
        for c in 0..3 {
            assert!((out[c] as f64 - want[c]).abs() < 1e-4);
        }
    }
    assert!((lab[0] - 53.39).abs() < 0.01);
}

#[test]
fn invalid_input_reports_validation_and_message() {
    let rgb = [1.5f32, 0.0, 0.0];
    let mut lab = [0f32; 3];
    let s = unsafe { camodiff_rgb_to_lab(rgb.as_ptr(), 1, 1, lab.as_mut_ptr()) };
    assert_eq!(s, CamodiffStatus::Validation);
    assert!(last_error().contains("outside [0,1]"));
    let s = unsafe { camodiff_rgb_to_lab(ptr::null(), 1, 1, lab.as_mut_ptr()) };
    assert_eq!(s, CamodiffStatus::NullPointer);
}

#[test]
fn ssim_of_identical_images_is_one() {
    let img: Vec<f32> = (0..16 * 16 * 3).map(|i| (i % 7) as f32 / 7.0).collect();
    let mut v = 0.0;
    assert_eq!(
        unsafe { camodiff_ssim(img.as_ptr(), img.as_ptr(), 16, 16, &mut v) },
        CamodiffStatus::Ok
    );
    assert!((v - 1.0).abs() < 1e-9);
}

#[test]
fn ap50_counts_hits_and_misses() {
    let gt = [CamodiffBox {
        x: 0.0,
        y: 0.0,
        w: 10.0,
        h: 10.0,
    }];
    let hit = CamodiffDetection {
        bbox: gt[0],
        confidence: 0.9,
    };
    let miss = CamodiffDetection {
        bbox: CamodiffBox {
            x: 20.0,
            y: 20.0,
            w: 5.0,
            h: 5.0,
        },
        confidence: 0.95,
    };
    let dets = [miss, hit];
    let images = [
        CamodiffImageResult {
            detections: dets.as_ptr(),
            n_detections: 2,
            ground_truth: gt.as_ptr(),
            n_ground_truth: 1,
        },
        CamodiffImageResult {
            detections: ptr::null(),
            n_detections: 0,
            ground_truth: gt.as_ptr(),
            n_ground_truth: 1,
        },
    ];
    let mut v = 0.0;
    assert_eq!(unsafe { camodiff_ap50(images.as_ptr(), 2, &mut v) }, CamodiffStatus::Ok);
    // ranks: miss (P 0), hit (P 1/2, R 1/2); interpolated AP = 0.5 * 0.5
    assert!((v - 0.25).abs() < 1e-12);
}

#[test]
fn missing_checkpoint_is_not_ready() {
    let dir = tempfile::tempdir().unwrap();
    let p = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    let mut det: *mut CamodiffDetector = ptr::null_mut();
    assert_eq!(
        unsafe { camodiff_detector_load(p.as_ptr(), &mut det) },
        CamodiffStatus::NotReady
    );
    assert!(det.is_null());
    let mut gen: *mut CamodiffGenerator = ptr::null_mut();
    assert_ne!(
        unsafe { camodiff_generator_load(p.as_ptr(), &mut gen) },
        CamodiffStatus::Ok
    );
    assert!(gen.is_null());
    unsafe {
        camodiff_detector_free(ptr::null_mut());
        camodiff_generator_free(ptr::null_mut());
    }
}

/// A 16px workspace with untrained models and a two-iteration stage-1 run.
fn tiny_workspace(root: &Path) -> (Config, Workspace) {
    let ws = Workspace::new(root);
    let mut cfg = Config::default();
    cfg.corpus.params = GenParams {
        image_size: 16,
        ..GenParams::default()
    };
    cfg.corpus.n_train = 6;
    cfg.corpus.n_val = 2;
    cfg.corpus.n_test = 2;
    cfg.backend.factor = 2;
    cfg.backend.ae_channels = 8;
    cfg.backend.denoiser_channels = 8;
    cfg.backend.time_dim = 8;
    cfg.backend.sampling_steps = Some(2);
    cfg.backend.prior_iterations = 0;
    cfg.strategy.dilation_kernel_px = 5;
    cfg.stage1.iterations = 2;
    cfg.stage1.batch_size = 2;
    cfg.stage1.checkpoint_every = 2;
    cfg.stage1.probe_size = 2;
    workflow::gen_data(&cfg, &ws).unwrap();
    Autoencoder::init(
        AeShape {
            image_size: 16,
            factor: 2,
            latent_channels: 4,
            channels: 8,
        },
        1,
    )
    .unwrap()
    .save(&ws.autoencoder())
    .unwrap();
    Critic::init(
        CriticShape {
            latent_channels: 4,
            channels: [4, 4, 4],
            classes: 5,
        },
        2,
    )
    .unwrap()
    .save(&ws.critic())
    .unwrap();
    Detector::init(
        DetectorShape {
            variant: ArchVariant::WideShallow,
            image_size: 16,
            grid: 4,
        },
        3,
    )
    .unwrap()
    .save(&ws.detector(ArchVariant::WideShallow))
    .unwrap();
    workflow::train(&cfg, &ws, Stage::NoBox, 0).unwrap();
    (cfg, ws)
}

#[test]
fn handles_match_the_core_library() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ws) = tiny_workspace(dir.path());
    let corpus = workflow::load_corpus(&ws).unwrap();
    let r = &corpus.test[0];
    let (h, w) = (r.image.height(), r.image.width());

    let det_dir = CString::new(ws.detector(ArchVariant::WideShallow).to_str().unwrap()).unwrap();
    let mut det: *mut CamodiffDetector = ptr::null_mut();
    assert_eq!(
        unsafe { camodiff_detector_load(det_dir.as_ptr(), &mut det) },
        CamodiffStatus::Ok
    );
    let core_det = Detector::load(&ws.detector(ArchVariant::WideShallow)).unwrap();
    let want = camodiff::detect::detect_boxes(&core_det, &r.image, 0.0, 0.5).unwrap();
    let mut n = 0usize;
    let s =
        unsafe { camodiff_detector_detect(det, r.image.data().as_ptr(), h, w, 0.0, 0.5, ptr::null_mut(), 0, &mut n) };
    assert_eq!(n, want.len());
    assert_eq!(
        s,
        if n == 0 {
            CamodiffStatus::Ok
        } else {
            CamodiffStatus::BufferTooSmall
        }
    );
    let mut out = vec![
        CamodiffDetection {
            bbox: CamodiffBox {
                x: 0.0,
                y: 0.0,
                w: 0.0,
                h: 0.0
            },
            confidence: 0.0
        };
        n
    ];
    let s = unsafe {
        camodiff_detector_detect(
            det,
            r.image.data().as_ptr(),
            h,
            w,
            0.0,
            0.5,
            out.as_mut_ptr(),
            n,
            &mut n,
        )
    };
    assert_eq!(s, CamodiffStatus::Ok);
    for (a, b) in out.iter().zip(&want) {
        assert_eq!(a.confidence, b.confidence);
        assert_eq!(
            (a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h),
            (b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h)
        );
    }
    unsafe { camodiff_detector_free(det) };

    let ckpt = latest_checkpoint(&ws.run(Stage::NoBox)).unwrap();
    let ckpt_c = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut gen: *mut CamodiffGenerator = ptr::null_mut();
    assert_eq!(
        unsafe { camodiff_generator_load(ckpt_c.as_ptr(), &mut gen) },
        CamodiffStatus::Ok
    );
    let seed = record_seed(cfg.eval.sample_seed, r);
    let (cam, comp) = Generator::load(&ckpt).unwrap().infer(r, seed).unwrap();
    let mask: Vec<u8> = (0..h * w).map(|i| r.vehicle_mask.get(i / w, i % w) as u8).collect();
    let label = CString::new(r.scene_label.as_str()).unwrap();
    let mut cam_out = vec![0f32; h * w * 3];
    let mut comp_out = vec![0f32; h * w * 3];
    let s = unsafe {
        camodiff_generator_infer(
            gen,
            r.image.data().as_ptr(),
            mask.as_ptr(),
            h,
            w,
            label.as_ptr(),
            seed,
            cam_out.as_mut_ptr(),
            comp_out.as_mut_ptr(),
        )
    };
    assert_eq!(s, CamodiffStatus::Ok, "{}", last_error());
    assert_eq!(cam_out, cam.data());
    assert_eq!(comp_out, comp.data());

    let bad = CString::new("swamp").unwrap();
    let s = unsafe {
        camodiff_generator_infer(
            gen,
            r.image.data().as_ptr(),
            mask.as_ptr(),
            h,
            w,
            bad.as_ptr(),
            seed,
            cam_out.as_mut_ptr(),
            comp_out.as_mut_ptr(),
        )
    };
    assert_eq!(s, CamodiffStatus::Validation);
    assert!(last_error().contains("swamp"));
    let empty = vec![0u8; h * w];
    let s = unsafe {
        camodiff_generator_infer(
            gen,
            r.image.data().as_ptr(),
            empty.as_ptr(),
            h,
            w,
            label.as_ptr(),
            seed,
            cam_out.as_mut_ptr(),
            comp_out.as_mut_ptr(),
        )
    };
    assert_eq!(s, CamodiffStatus::Validation);
    unsafe { camodiff_generator_free(gen) };
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"camodiff.h\"\nint main(void) { CamodiffStatus s = CAMODIFF_STATUS_OK; CamodiffDetector *d = 0; \
         camodiff_detector_free(d); return (int)s; }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&header)
        .arg(&src)
        .output();
    match out {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("skipping: no C compiler ({e})"),
    }
}
