//! End-to-end steps over a workspace directory; each CLI subcommand is one
//! function here.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::backend::{train_autoencoder, AeReport, Autoencoder};
use crate::colorspace::RgbImage;
use crate::config::{Config, Defense};
use crate::critic::{critic_dataset, train_critic as fit_critic, CriticReport};
use crate::detect::{train_detector, ArchVariant, Detector, DetectorReport};
use crate::error::{Error, Result};
use crate::evalharness::{evaluate, evaluate_cross_background, evaluate_run, EvalReport, NamedDetector, Provenance};
use crate::pipeline::{
    latest_checkpoint, train_stage, Generator, PriorReport, Stage, StageConfig, StageOutcome, Workspace,
};
use crate::synthcorpus::{manifest_hash, read_corpus, save_rgb_png, write_corpus, Corpus, SceneRecord, Split};

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

/// Generates the corpus, writes it and returns it as read back from disk.
pub fn gen_data(cfg: &Config, ws: &Workspace) -> Result<Corpus> {
    let corpus = cfg.corpus.generate()?;
    write_corpus(&corpus, &ws.corpus())?;
    read_corpus(&ws.corpus())
}

pub fn load_corpus(ws: &Workspace) -> Result<Corpus> {
    let c = read_corpus(&ws.corpus())?;
    if c.is_empty() {
        return Err(Error::not_ready(format!("no corpus in {}", ws.corpus().display())));
    }
    Ok(c)
}

fn images(records: &[SceneRecord]) -> Vec<RgbImage> {
    records.iter().map(|r| r.image.clone()).collect()
}

pub fn train_ae(cfg: &Config, ws: &Workspace, seed: u64) -> Result<AeReport> {
    let corpus = load_corpus(ws)?;
    let (ae, report) = train_autoencoder(&images(&corpus.train), &images(&corpus.val), &cfg.backend, seed)?;
    ae.save(&ws.autoencoder())?;
    write_json(&ws.autoencoder().join("report.json"), &report)?;
    Ok(report)
}

/// Trains the denoiser prior for the configured strategy.
pub fn train_prior(cfg: &Config, ws: &Workspace, seed: u64) -> Result<PriorReport> {
    let corpus = load_corpus(ws)?;
    let report = crate::pipeline::train_prior(
        &corpus.train,
        &cfg.backend,
        &cfg.strategy,
        &cfg.corpus.params,
        &ws.autoencoder(),
        seed,
        &ws.prior(),
    )?;
    write_json(&ws.prior().join("report.json"), &report)?;
    Ok(report)
}

pub fn train_critic(cfg: &Config, ws: &Workspace, seed: u64) -> Result<CriticReport> {
    let corpus = load_corpus(ws)?;
    let ae = Autoencoder::load(&ws.autoencoder())?.frozen()?;
    let labels = &cfg.corpus.params.scene_labels;
    let k = cfg.critic.exemplars_per_concept;
    let train = critic_dataset(&ae, &corpus.train, labels, &cfg.corpus.params, k, seed)?;
    let held = critic_dataset(&ae, &corpus.val, labels, &cfg.corpus.params, k, seed ^ 0x5EED)?;
    let (critic, report) = fit_critic(
        (&train.0, &train.1),
        (&held.0, &held.1),
        labels.len(),
        &cfg.critic,
        seed,
    )?;
    critic.save(&ws.critic())?;
    write_json(&ws.critic().join("report.json"), &report)?;
    Ok(report)
}

pub fn train_detectors(
    cfg: &Config,
    ws: &Workspace,
    seed: u64,
    variants: &[ArchVariant],
) -> Result<Vec<DetectorReport>> {
    let corpus = load_corpus(ws)?;
    let mut out = Vec::new();
    for (i, &v) in variants.iter().enumerate() {
        let (det, report) = train_detector(
            &corpus.train,
            &corpus.val,
            v,
            &cfg.detector,
            seed.wrapping_add(i as u64),
        )?;
        det.save(&ws.detector(v))?;
        write_json(&ws.detector(v).join("report.json"), &report)?;
        out.push(report);
    }
    Ok(out)
}

/// Trains one stage; the validation split provides the probe batch.
pub fn train(cfg: &Config, ws: &Workspace, stage: Stage, seed: u64) -> Result<StageOutcome> {
    let corpus = load_corpus(ws)?;
    let sc = StageConfig::from_config(cfg, stage, ws, seed)?;
    train_stage(&corpus.train, &corpus.val, &sc, &ws.run(stage))
}

/// The given checkpoint, or the latest checkpoint of the stage-2 run.
pub fn resolve_checkpoint(ws: &Workspace, checkpoint: Option<&Path>) -> Result<PathBuf> {
    match checkpoint {
        Some(p) => Ok(p.to_path_buf()),
        None => latest_checkpoint(&ws.run(Stage::WhiteBox)),
    }
}

/// Samples the first `count` records of a split and writes
/// `{id}_camouflaged.png` and `{id}_composited.png` to `out`.
pub fn sample(
    cfg: &Config,
    ws: &Workspace,
    checkpoint: Option<&Path>,
    split: Split,
    count: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus(ws)?;
    let gen = Generator::load(&resolve_checkpoint(ws, checkpoint)?)?;
    let records = corpus.split(split);
    let mut written = Vec::new();
    for r in records.iter().take(count) {
        let (cam, comp) = gen.infer(r, crate::pipeline::record_seed(cfg.eval.sample_seed, r))?;
        for (name, img) in [("camouflaged", &cam), ("composited", &comp)] {
            let p = out.join(format!("{}_{name}.png", r.id));
            save_rgb_png(img, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}

fn capped(records: &[SceneRecord], cap: Option<usize>) -> &[SceneRecord] {
    &records[..cap.unwrap_or(records.len()).min(records.len())]
}

struct Detectors {
    white: Detector,
    black: Detector,
}

fn load_detectors(cfg: &Config, ws: &Workspace) -> Result<Detectors> {
    Ok(Detectors {
        white: Detector::load(&ws.detector(cfg.detector.white_box))?.frozen()?,
        black: Detector::load(&ws.detector(cfg.detector.black_box))?.frozen()?,
    })
}

fn provenance(cfg: &Config, ws: &Workspace, gen: &Generator, dets: &Detectors) -> Result<Provenance> {
    let mut hashes = BTreeMap::new();
    hashes.insert("denoiser".to_string(), gen.checkpoint_hash()?);
    hashes.insert("autoencoder".to_string(), gen.ae.store().hash()?);
    hashes.insert(cfg.detector.white_box.id().to_string(), dets.white.store().hash()?);
    hashes.insert(cfg.detector.black_box.id().to_string(), dets.black.store().hash()?);
    Ok(Provenance {
        config_hash: cfg.hash()?,
        corpus_manifest_hash: manifest_hash(&ws.corpus())?,
        checkpoint_hashes: hashes,
    })
}

/// Evaluation directory of one named evaluation.
pub fn eval_dir(ws: &Workspace, name: &str) -> PathBuf {
    ws.eval().join(name)
}

/// Attack evaluation of a checkpoint against both detectors on the test split.
pub fn eval(cfg: &Config, ws: &Workspace, checkpoint: Option<&Path>, name: &str) -> Result<EvalReport> {
    let corpus = load_corpus(ws)?;
    let gen = Generator::load(&resolve_checkpoint(ws, checkpoint)?)?;
    let dets = load_detectors(cfg, ws)?;
    let test = capped(&corpus.test, cfg.eval.max_records);
    let val = capped(&corpus.val, cfg.eval.max_records);
    let named = [
        NamedDetector {
            id: cfg.detector.white_box.id().to_string(),
            model: &dets.white,
        },
        NamedDetector {
            id: cfg.detector.black_box.id().to_string(),
            model: &dets.black,
        },
    ];
    let dir = eval_dir(ws, name);
    let (rows, run) = evaluate(&gen, &named, test, val, &cfg.detector, &cfg.eval, Some(&dir))?;
    let mut rows = rows;
    for d in cfg.eval.defenses.iter().filter(|d| **d != Defense::None) {
        rows.extend(evaluate_run(
            &run,
            gen.config.strategy.mode,
            &named[..1],
            test,
            val,
            &cfg.detector,
            &cfg.eval,
            *d,
            Some(&dir),
        )?);
    }
    let report = EvalReport {
        rows,
        provenance: provenance(cfg, ws, &gen, &dets)?,
    };
    report.write(&dir)?;
    Ok(report)
}

/// Defended evaluation of the white-box detector for every configured defense.
pub fn eval_defense(cfg: &Config, ws: &Workspace, checkpoint: Option<&Path>, name: &str) -> Result<EvalReport> {
    let corpus = load_corpus(ws)?;
    let gen = Generator::load(&resolve_checkpoint(ws, checkpoint)?)?;
    let dets = load_detectors(cfg, ws)?;
    let test = capped(&corpus.test, cfg.eval.max_records);
    let val = capped(&corpus.val, cfg.eval.max_records);
    let named = [NamedDetector {
        id: cfg.detector.white_box.id().to_string(),
        model: &dets.white,
    }];
    let dir = eval_dir(ws, name);
    let run = crate::evalharness::run_attack(&gen, test, cfg.eval.sample_seed)?;
    let mut rows = Vec::new();
    for d in &cfg.eval.defenses {
        rows.extend(evaluate_run(
            &run,
            gen.config.strategy.mode,
            &named,
            test,
            val,
            &cfg.detector,
            &cfg.eval,
            *d,
            Some(&dir),
        )?);
    }
    let report = EvalReport {
        rows,
        provenance: provenance(cfg, ws, &gen, &dets)?,
    };
    report.write(&dir)?;
    Ok(report)
}

/// Cross-background transfer of a scene-level checkpoint.
pub fn eval_transfer(cfg: &Config, ws: &Workspace, checkpoint: Option<&Path>, name: &str) -> Result<EvalReport> {
    let corpus = load_corpus(ws)?;
    let gen = Generator::load(&resolve_checkpoint(ws, checkpoint)?)?;
    let dets = load_detectors(cfg, ws)?;
    let test = capped(&corpus.test, cfg.eval.max_records);
    let val = capped(&corpus.val, cfg.eval.max_records);
    let mut rows = Vec::new();
    for (id, model) in [
        (cfg.detector.white_box.id(), &dets.white),
        (cfg.detector.black_box.id(), &dets.black),
    ] {
        let named = NamedDetector {
            id: id.to_string(),
            model,
        };
        rows.extend(evaluate_cross_background(
            &gen,
            &named,
            test,
            val,
            cfg.eval.cross_backgrounds,
            &cfg.detector,
            &cfg.eval,
        )?);
    }
    let report = EvalReport {
        rows,
        provenance: provenance(cfg, ws, &gen, &dets)?,
    };
    report.write(&eval_dir(ws, name))?;
    Ok(report)
}

/// Tables of every evaluation under the workspace, in name order.
pub fn report(ws: &Workspace) -> Result<String> {
    let root = ws.eval();
    let mut names: Vec<String> = match fs::read_dir(&root) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("report.json").exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect(),
        Err(_) => Vec::new(),
    };
    if names.is_empty() {
        return Err(Error::not_ready(format!(
            "no evaluation reports under {}",
            root.display()
        )));
    }
    names.sort();
    let mut out = String::new();
    for n in names {
        let r = EvalReport::read(&root.join(&n))?;
        out.push_str(&format!("== {n} ==\n{}\n", r.table()));
    }
    Ok(out)
}
