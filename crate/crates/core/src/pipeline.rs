//! Stage orchestration: No-Box training, White-Box continuation from a frozen
//! stage-1 copy, the one-stage ablation, and sampling-based inference.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{
    condition_tensor, denoise, forward_noise, gaussian, image_batch, one_step_estimate, sample_batch, Autoencoder,
    BackendConfig, BackendMode, Conditioning, Denoiser, DenoiserShape, NoiseSchedule, MIN_FLOW_T,
};
use crate::colorspace::RgbImage;
use crate::config::{Config, LossToggles, StageSettings};
use crate::critic::Critic;
use crate::detect::{max_vehicle_confidence, ArchVariant, Detector};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, background_latent, background_loss_with_target, color_consistency_loss, combine_stage1,
    combine_stage2, struct_loss, style_loss_with_reference, style_reference, LossReport, LossTerms, LossWeights,
};
use crate::maskops::{composite, composite_tensor, Mask};
use crate::nn::{self, Adam};
use crate::reference::{build_conditioning, select_reference, StrategyConfig};
use crate::synthcorpus::{GenParams, SceneRecord};

// ---------------------------------------------------------------------------
// Workspace layout

/// Artifact layout under one output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn autoencoder(&self) -> PathBuf {
        self.root.join("ae")
    }

    pub fn prior(&self) -> PathBuf {
        self.root.join("prior")
    }

    pub fn critic(&self) -> PathBuf {
        self.root.join("critic")
    }

    pub fn detector(&self, variant: ArchVariant) -> PathBuf {
        self.root.join("detectors").join(variant.id())
    }

    pub fn run(&self, stage: Stage) -> PathBuf {
        self.root.join("runs").join(stage.id())
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

// ---------------------------------------------------------------------------
// Stage configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    NoBox,
    WhiteBox,
    OneStage,
}

impl Stage {
    pub fn id(self) -> &'static str {
        match self {
            Stage::NoBox => "stage1",
            Stage::WhiteBox => "stage2",
            Stage::OneStage => "onestage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub backend: BackendConfig,
    pub strategy: StrategyConfig,
    pub gen_params: GenParams,
    pub autoencoder_checkpoint: PathBuf,
    pub critic_checkpoint: PathBuf,
    pub detector_checkpoint: Option<PathBuf>,
    pub stage1_checkpoint: Option<PathBuf>,
    /// Initialization of the stages that do not continue from stage 1.
    pub prior_checkpoint: Option<PathBuf>,
    pub loss_toggles: LossToggles,
    pub checkpoint_every: usize,
    pub probe_size: usize,
}

impl StageConfig {
    /// Stage configuration drawn from the run config and workspace layout.
    /// The one-stage ablation uses the stage-2 settings for the combined
    /// iteration budget of both stages.
    pub fn from_config(cfg: &Config, stage: Stage, ws: &Workspace, seed: u64) -> Result<Self> {
        let s: &StageSettings = match stage {
            Stage::NoBox => &cfg.stage1,
            Stage::WhiteBox | Stage::OneStage => &cfg.stage2,
        };
        let iterations = match stage {
            Stage::OneStage => cfg.stage1.iterations + cfg.stage2.iterations,
            _ => s.iterations,
        };
        let detector = (stage != Stage::NoBox).then(|| ws.detector(cfg.detector.white_box));
        let stage1 = (stage == Stage::WhiteBox)
            .then(|| latest_checkpoint(&ws.run(Stage::NoBox)))
            .transpose()?;
        let out = Self {
            stage,
            weights: s.weights,
            learning_rate: s.learning_rate,
            iterations,
            batch_size: s.batch_size,
            seed,
            backend: cfg.backend.clone(),
            strategy: cfg.strategy.clone(),
            gen_params: cfg.corpus.params.clone(),
            autoencoder_checkpoint: ws.autoencoder(),
            critic_checkpoint: ws.critic(),
            detector_checkpoint: detector,
            stage1_checkpoint: stage1,
            prior_checkpoint: (stage != Stage::WhiteBox && cfg.backend.prior_iterations > 0).then(|| ws.prior()),
            loss_toggles: s.loss_toggles,
            checkpoint_every: s.checkpoint_every,
            probe_size: s.probe_size,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.backend.validate()?;
        self.strategy.validate(&self.gen_params.scene_labels)?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        match self.stage {
            Stage::NoBox => {}
            Stage::WhiteBox => {
                if self.stage1_checkpoint.is_none() {
                    return Err(Error::validation("white_box stage requires a stage-1 checkpoint"));
                }
                if self.detector_checkpoint.is_none() {
                    return Err(Error::validation("white_box stage requires a detector checkpoint"));
                }
            }
            Stage::OneStage => {
                if self.detector_checkpoint.is_none() {
                    return Err(Error::validation("one_stage requires a detector checkpoint"));
                }
            }
        }
        Ok(())
    }

    /// Weights actually applied: disabled terms are zeroed, the scene-level
    /// strategy has no background term, stage 1 has neither adversarial nor
    /// color term, and the one-stage run has no color term.
    pub fn effective_weights(&self) -> LossWeights {
        let t = self.active_terms();
        let pick = |on: bool, w: f64| if on { w } else { 0.0 };
        LossWeights {
            structure: pick(t.structure, self.weights.structure),
            alpha: pick(t.style, self.weights.alpha),
            beta: pick(t.background, self.weights.beta),
            gamma: pick(t.color, self.weights.gamma),
            lambda: pick(t.adversarial, self.weights.lambda),
        }
    }

    /// Terms computed at each step.
    pub fn active_terms(&self) -> LossToggles {
        let t = self.loss_toggles;
        LossToggles {
            structure: t.structure,
            style: t.style,
            background: t.background && self.strategy.image_level(),
            adversarial: t.adversarial && self.stage != Stage::NoBox,
            color: t.color && self.stage == Stage::WhiteBox,
        }
    }

    fn denoiser_shape(&self, ae: &Autoencoder) -> DenoiserShape {
        let a = ae.shape();
        DenoiserShape {
            latent_channels: a.latent_channels,
            latent_size: a.latent_size(),
            factor: a.factor,
            with_background: self.strategy.image_level(),
            channels: self.backend.denoiser_channels,
            time_dim: self.backend.time_dim,
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

fn step_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step}"))
}

/// Checkpoint with the highest step number in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let entries =
        fs::read_dir(&dir).map_err(|_| Error::not_ready(format!("no checkpoints under {}", dir.display())))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for e in entries {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("step_").and_then(|n| n.parse::<usize>().ok()) {
            if e.path().join("manifest.json").exists() && best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, e.path()));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::not_ready(format!("no checkpoints under {}", dir.display())))
}

fn load_frozen_ae(path: &Path) -> Result<Autoencoder> {
    Autoencoder::load(path)?.frozen()
}

fn load_frozen_critic(path: &Path) -> Result<Critic> {
    Critic::load(path)?.frozen()
}

fn load_frozen_detector(path: &Path) -> Result<Detector> {
    Detector::load(path)?.frozen()
}

// ---------------------------------------------------------------------------
// Training

/// Per-checkpoint metrics on the fixed probe batch, from full sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub step: usize,
    pub style_loss: f64,
    pub struct_loss: f64,
    /// Mean over probe composites of the highest cell vehicle probability.
    pub detector_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub final_checkpoint: PathBuf,
    pub last_report: Option<LossReport>,
    pub probes: Vec<ProbeMetrics>,
}

/// Inputs that do not depend on the trained model, precomputed per record.
struct Cache {
    cond: Tensor,
    z0: Tensor,
    x0: Tensor,
    style_ref: Vec<Tensor>,
    bg_target: Option<Tensor>,
}

struct Frozen {
    ae: Autoencoder,
    critic: Critic,
    detector: Option<Detector>,
}

fn build_cache(
    records: &[SceneRecord],
    strategy: &StrategyConfig,
    params: &GenParams,
    active: LossToggles,
    ae: &Autoencoder,
    critic: Option<&Critic>,
    shape: DenoiserShape,
) -> Result<Cache> {
    let dev = ae.device().clone();
    let dt = ae.dtype();
    let mut cond = Vec::new();
    let mut z0 = Vec::new();
    let mut x0 = Vec::new();
    let mut style: Vec<Vec<Tensor>> = Vec::new();
    let mut bg = Vec::new();
    for chunk in records.chunks(64) {
        let conds = chunk
            .iter()
            .map(|r| build_conditioning(r, strategy, params))
            .collect::<Result<Vec<_>>>()?;
        let crefs: Vec<&Conditioning> = conds.iter().collect();
        cond.push(condition_tensor(&crefs, shape.factor, shape.with_background, &dev, dt)?);
        let imgs: Vec<&RgbImage> = chunk.iter().map(|r| &r.image).collect();
        let x = image_batch(&imgs, &dev)?.to_dtype(dt)?;
        z0.push(ae.encode(&x)?.detach());
        if let (true, Some(critic)) = (active.style, critic) {
            let refs = chunk
                .iter()
                .map(|r| select_reference(r, strategy, params))
                .collect::<Result<Vec<_>>>()?;
            let xs: Vec<&RgbImage> = refs.iter().map(|(x, _)| x).collect();
            let ms: Vec<&Mask> = refs.iter().map(|(_, m)| m).collect();
            let xs = image_batch(&xs, &dev)?.to_dtype(dt)?;
            style.push(style_reference(critic, ae, &xs, &ms)?);
        }
        if active.background {
            let ms: Vec<&Mask> = chunk.iter().map(|r| &r.vehicle_mask).collect();
            bg.push(background_latent(ae, &x, &ms)?.detach());
        }
        x0.push(x);
    }
    let style_ref = if style.is_empty() {
        Vec::new()
    } else {
        (0..style[0].len())
            .map(|l| Tensor::cat(&style.iter().map(|s| &s[l]).collect::<Vec<_>>(), 0))
            .collect::<candle_core::Result<Vec<_>>>()?
    };
    Ok(Cache {
        cond: Tensor::cat(&cond, 0)?,
        z0: Tensor::cat(&z0, 0)?,
        x0: Tensor::cat(&x0, 0)?,
        style_ref,
        bg_target: if bg.is_empty() {
            None
        } else {
            Some(Tensor::cat(&bg, 0)?)
        },
    })
}

fn sample_t(rng: &mut ChaCha8Rng, sched: &NoiseSchedule) -> f64 {
    match sched.alpha_bar() {
        Some(ab) => rng.random_range(0..ab.len()) as f64,
        None => rng.random_range(MIN_FLOW_T..=1.0),
    }
}

/// Sum of weighted scalar terms; `None` tensors are skipped.
fn weighted_sum(parts: &[(Option<&Tensor>, f64)]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (t, w) in parts {
        if let Some(t) = t {
            let v = t.affine(*w, 0.0)?;
            total = Some(match total {
                None => v,
                Some(acc) => (acc + v)?,
            });
        }
    }
    total.ok_or_else(|| Error::validation("every loss term is disabled"))
}

fn opt_scalar(t: &Option<Tensor>) -> Result<Option<f64>> {
    t.as_ref().map(nn::scalar).transpose()
}

fn probe(
    step: usize,
    model: &Denoiser,
    fr: &Frozen,
    sched: &NoiseSchedule,
    cfg: &StageConfig,
    records: &[SceneRecord],
    cache: &Cache,
) -> Result<ProbeMetrics> {
    let conds = records
        .iter()
        .map(|r| build_conditioning(r, &cfg.strategy, &cfg.gen_params))
        .collect::<Result<Vec<_>>>()?;
    let crefs: Vec<&Conditioning> = conds.iter().collect();
    let seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    let imgs = sample_batch(model, &fr.ae, sched, &crefs, cfg.backend.steps(), &seeds)?;
    let refs: Vec<&RgbImage> = imgs.iter().collect();
    let x_hat = image_batch(&refs, fr.ae.device())?.to_dtype(fr.ae.dtype())?;
    let masks: Vec<&Mask> = records.iter().map(|r| &r.vehicle_mask).collect();
    let style = if cache.style_ref.is_empty() {
        let xr = records
            .iter()
            .map(|r| select_reference(r, &cfg.strategy, &cfg.gen_params))
            .collect::<Result<Vec<_>>>()?;
        let xs: Vec<&RgbImage> = xr.iter().map(|(x, _)| x).collect();
        let ms: Vec<&Mask> = xr.iter().map(|(_, m)| m).collect();
        let xs = image_batch(&xs, fr.ae.device())?.to_dtype(fr.ae.dtype())?;
        style_reference(&fr.critic, &fr.ae, &xs, &ms)?
    } else {
        cache.style_ref.clone()
    };
    let style_loss = nn::scalar(&style_loss_with_reference(&fr.critic, &fr.ae, &x_hat, &masks, &style)?)?;
    let struct_loss = nn::scalar(&struct_loss(&cache.x0, &x_hat, &masks)?)?;
    let detector_confidence = match &fr.detector {
        Some(d) => {
            let comp = composite_tensor(
                &x_hat,
                &cache.x0,
                &crate::losses::mask_batch(&masks, x_hat.device(), x_hat.dtype())?,
            )?;
            let c = max_vehicle_confidence(d, &comp)?;
            Some(c.iter().sum::<f64>() / c.len() as f64)
        }
        None => None,
    };
    Ok(ProbeMetrics {
        step,
        style_loss,
        struct_loss,
        detector_confidence,
    })
}

/// Shared training loop of all three stages.
///
/// Each step draws a batch of records and one uniform timestep, noises the
/// clean latents, forms the one-step clean estimate, decodes it and applies
/// the stage objective; only the denoiser is updated.
pub fn train_stage(
    train: &[SceneRecord],
    probe_records: &[SceneRecord],
    cfg: &StageConfig,
    run_dir: &Path,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let fr = Frozen {
        ae: load_frozen_ae(&cfg.autoencoder_checkpoint)?,
        critic: load_frozen_critic(&cfg.critic_checkpoint)?,
        detector: cfg
            .detector_checkpoint
            .as_deref()
            .map(load_frozen_detector)
            .transpose()?,
    };
    let size = fr.ae.shape().image_size;
    if train.iter().any(|r| r.image.height() != size) || size != cfg.gen_params.image_size {
        return Err(Error::validation(format!(
            "corpus images do not match the autoencoder size {size}"
        )));
    }
    let sched = cfg.backend.schedule()?;
    let shape = cfg.denoiser_shape(&fr.ae);
    let (model, reference) = match cfg.stage {
        Stage::WhiteBox => {
            let path = cfg.stage1_checkpoint.as_deref().expect("validated");
            let (m, _) = Denoiser::load(path)?;
            if m.shape() != shape {
                return Err(Error::load(
                    path,
                    "stage-1 checkpoint shape differs from this configuration",
                ));
            }
            let frozen = m.frozen()?;
            (m, Some(frozen))
        }
        _ => match &cfg.prior_checkpoint {
            Some(path) => {
                let (m, _) = Denoiser::load(path)?;
                if m.shape() != shape {
                    return Err(Error::load(
                        path,
                        "prior checkpoint shape differs from this configuration",
                    ));
                }
                (m, None)
            }
            None => (Denoiser::init(shape, cfg.seed)?, None),
        },
    };
    let detector_hash = fr.detector.as_ref().map(|d| d.store().hash()).transpose()?;
    let reference_hash = reference.as_ref().map(|r| r.store().hash()).transpose()?;

    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    fs::create_dir_all(run_dir.join("probe"))?;
    let mut log = std::io::BufWriter::new(fs::File::create(run_dir.join("losses.jsonl"))?);

    let caching = |recs: &[SceneRecord]| {
        build_cache(
            recs,
            &cfg.strategy,
            &cfg.gen_params,
            cfg.active_terms(),
            &fr.ae,
            Some(&fr.critic),
            shape,
        )
    };
    let cache = caching(train)?;
    let n_probe = cfg.probe_size.min(probe_records.len());
    let probe_set = &probe_records[..n_probe];
    let probe_cache = if n_probe > 0 { Some(caching(probe_set)?) } else { None };
    let mut probes = Vec::new();
    let mut run_probe = |step: usize, model: &Denoiser| -> Result<()> {
        if let Some(pc) = &probe_cache {
            let m = probe(step, model, &fr, &sched, cfg, probe_set, pc)?;
            fs::write(
                run_dir.join("probe").join(format!("step_{step}.json")),
                serde_json::to_string_pretty(&m)?,
            )?;
            probes.push(m);
        }
        Ok(())
    };
    run_probe(0, &model)?;

    let weights = cfg.effective_weights();
    let active = cfg.active_terms();
    let mut opt = Adam::new(model.store().vars(), cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57A6E);
    let dev = fr.ae.device().clone();
    let n = train.len();
    let mut last_report = None;
    let save = |step: usize, model: &Denoiser| -> Result<PathBuf> {
        let dir = step_dir(run_dir, step);
        model.save(&dir, serde_json::json!({ "stage_config": cfg, "step": step }))?;
        Ok(dir)
    };
    let mut last_ckpt = None;
    for step in 1..=cfg.iterations {
        let idx: Vec<u32> = (0..cfg.batch_size).map(|_| rng.random_range(0..n) as u32).collect();
        let t = sample_t(&mut rng, &sched);
        let noise_seed: u64 = rng.random();
        let ids = Tensor::from_vec(idx.clone(), idx.len(), &dev)?;
        let masks: Vec<&Mask> = idx.iter().map(|&i| &train[i as usize].vehicle_mask).collect();
        let cond = cache.cond.index_select(&ids, 0)?;
        let z0 = cache.z0.index_select(&ids, 0)?;
        let x0 = cache.x0.index_select(&ids, 0)?;
        let eps = gaussian(z0.dims(), noise_seed, 11, &dev, z0.dtype())?;
        let zt = forward_noise(&z0, t, &eps, &sched)?;
        let pred = denoise(&model, &zt, t, &cond, &sched)?;
        let x_hat = fr.ae.decode(&one_step_estimate(&zt, t, &pred, &sched)?)?;

        let l_struct = active.structure.then(|| struct_loss(&x0, &x_hat, &masks)).transpose()?;
        let l_style = if active.style {
            let r: Vec<Tensor> = cache
                .style_ref
                .iter()
                .map(|s| s.index_select(&ids, 0))
                .collect::<candle_core::Result<_>>()?;
            Some(style_loss_with_reference(&fr.critic, &fr.ae, &x_hat, &masks, &r)?)
        } else {
            None
        };
        let l_bg = match (&cache.bg_target, active.background) {
            (Some(bg), true) => Some(background_loss_with_target(
                &fr.critic,
                &fr.ae,
                &bg.index_select(&ids, 0)?,
                &x_hat,
                &masks,
            )?),
            _ => None,
        };
        let l_adv = if active.adversarial {
            let det = fr.detector.as_ref().expect("validated");
            let m = crate::losses::mask_batch(&masks, x_hat.device(), x_hat.dtype())?;
            Some(adversarial_loss(det, &composite_tensor(&x_hat, &x0, &m)?, &masks)?)
        } else {
            None
        };
        let l_color = match (&reference, active.color) {
            (Some(r), true) => {
                let pr = denoise(r, &zt, t, &cond, &sched)?;
                let x_i = fr.ae.decode(&one_step_estimate(&zt, t, &pr, &sched)?)?.detach();
                Some(color_consistency_loss(&x_i, &x_hat, &masks)?)
            }
            _ => None,
        };
        let terms = LossTerms {
            structure: opt_scalar(&l_struct)?,
            style: opt_scalar(&l_style)?,
            background: opt_scalar(&l_bg)?,
            adversarial: opt_scalar(&l_adv)?,
            color: opt_scalar(&l_color)?,
        };
        let all = [
            terms.structure,
            terms.style,
            terms.background,
            terms.adversarial,
            terms.color,
        ];
        if all.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{} step {step} at t = {t}: non-finite loss terms {terms:?}",
                cfg.stage.id()
            )));
        }
        let total = match cfg.stage {
            Stage::NoBox => combine_stage1(&terms, &weights)?,
            _ => combine_stage2(&terms, &weights)?,
        };
        let loss = weighted_sum(&[
            (l_struct.as_ref(), weights.structure),
            (l_style.as_ref(), weights.alpha),
            (l_bg.as_ref(), weights.beta),
            (l_adv.as_ref(), weights.lambda),
            (l_color.as_ref(), weights.gamma),
        ])?;
        opt.backward_step(&loss)
            .map_err(|e| Error::Numerical(format!("{} step {step} at t = {t}: {e}", cfg.stage.id())))?;
        let report = LossReport {
            step,
            t,
            terms,
            weights,
            total,
        };
        writeln!(log, "{}", serde_json::to_string(&report)?)?;
        if step % 100 == 0 {
            log::info!(
                "{} step {step}/{}: total {:.5}",
                cfg.stage.id(),
                cfg.iterations,
                report.total
            );
        }
        last_report = Some(report);
        let at_ckpt = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if at_ckpt || step == cfg.iterations {
            log.flush()?;
            last_ckpt = Some(save(step, &model)?);
            run_probe(step, &model)?;
        }
    }
    log.flush()?;
    let final_checkpoint = match last_ckpt {
        Some(p) => p,
        None => save(0, &model)?,
    };
    if detector_hash != fr.detector.as_ref().map(|d| d.store().hash()).transpose()? {
        return Err(Error::Numerical("detector parameters changed during training".into()));
    }
    if reference_hash != reference.as_ref().map(|r| r.store().hash()).transpose()? {
        return Err(Error::Numerical("frozen stage-1 copy changed during training".into()));
    }
    Ok(StageOutcome {
        final_checkpoint,
        last_report,
        probes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorReport {
    pub iterations: usize,
    /// Mean clean-latent squared error over the last 100 steps.
    pub final_loss: f64,
}

/// Conditional denoiser trained by clean-latent regression on the corpus:
/// the generative prior that the No-Box and one-stage runs fine-tune.
pub fn train_prior(
    train: &[SceneRecord],
    backend: &BackendConfig,
    strategy: &StrategyConfig,
    params: &GenParams,
    ae_path: &Path,
    seed: u64,
    out: &Path,
) -> Result<PriorReport> {
    backend.validate()?;
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let ae = load_frozen_ae(ae_path)?;
    let a = ae.shape();
    let shape = DenoiserShape {
        latent_channels: a.latent_channels,
        latent_size: a.latent_size(),
        factor: a.factor,
        with_background: strategy.image_level(),
        channels: backend.denoiser_channels,
        time_dim: backend.time_dim,
    };
    let none = LossToggles {
        structure: false,
        style: false,
        background: false,
        adversarial: false,
        color: false,
    };
    let cache = build_cache(train, strategy, params, none, &ae, None, shape)?;
    let sched = backend.schedule()?;
    let model = Denoiser::init(shape, seed)?;
    let mut opt = Adam::new(model.store().vars(), backend.prior_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9A10);
    let dev = ae.device().clone();
    let n = train.len();
    let mut recent = std::collections::VecDeque::with_capacity(100);
    for step in 1..=backend.prior_iterations {
        let p = step as f64 / backend.prior_iterations as f64;
        opt.lr = backend.prior_lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()));
        let idx: Vec<u32> = (0..backend.prior_batch_size)
            .map(|_| rng.random_range(0..n) as u32)
            .collect();
        let t = sample_t(&mut rng, &sched);
        let noise_seed: u64 = rng.random();
        let ids = Tensor::from_vec(idx, backend.prior_batch_size, &dev)?;
        let z0 = cache.z0.index_select(&ids, 0)?;
        let eps = gaussian(z0.dims(), noise_seed, 11, &dev, z0.dtype())?;
        let zt = forward_noise(&z0, t, &eps, &sched)?;
        let x0 = model.clean_estimate(&zt, t, &cache.cond.index_select(&ids, 0)?, &sched)?;
        let loss = (x0 - &z0)?.sqr()?.mean_all()?;
        let v = nn::scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("prior loss is {v} at step {step}, t = {t}")));
        }
        opt.backward_step(&loss)?;
        if recent.len() == 100 {
            recent.pop_front();
        }
        recent.push_back(v);
        if step % 500 == 0 {
            log::info!("prior step {step}/{}: loss {v:.5}", backend.prior_iterations);
        }
    }
    let report = PriorReport {
        iterations: backend.prior_iterations,
        final_loss: recent.iter().sum::<f64>() / recent.len().max(1) as f64,
    };
    model.save(out, serde_json::json!({ "prior": report }))?;
    Ok(report)
}

fn expect_stage(cfg: &StageConfig, stage: Stage) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::validation(format!(
            "expected a {:?} configuration, got {:?}",
            stage, cfg.stage
        )));
    }
    Ok(())
}

/// No-Box stage: structure, style and background terms only.
pub fn train_stage1(
    train: &[SceneRecord],
    probe: &[SceneRecord],
    cfg: &StageConfig,
    run_dir: &Path,
) -> Result<StageOutcome> {
    expect_stage(cfg, Stage::NoBox)?;
    train_stage(train, probe, cfg, run_dir)
}

/// White-Box stage, continuing from the stage-1 checkpoint in `cfg`.
pub fn train_stage2(
    train: &[SceneRecord],
    probe: &[SceneRecord],
    cfg: &StageConfig,
    run_dir: &Path,
) -> Result<StageOutcome> {
    expect_stage(cfg, Stage::WhiteBox)?;
    train_stage(train, probe, cfg, run_dir)
}

/// Joint training from scratch with every term except color consistency.
pub fn train_one_stage(
    train: &[SceneRecord],
    probe: &[SceneRecord],
    cfg: &StageConfig,
    run_dir: &Path,
) -> Result<StageOutcome> {
    expect_stage(cfg, Stage::OneStage)?;
    train_stage(train, probe, cfg, run_dir)
}

/// Reads the loss stream of a run.
pub fn read_loss_log(run_dir: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(run_dir.join("losses.jsonl"))
        .map_err(|_| Error::not_ready(format!("no loss log in {}", run_dir.display())))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

// ---------------------------------------------------------------------------
// Inference

/// A trained denoiser with everything needed to sample from it.
pub struct Generator {
    pub denoiser: Denoiser,
    pub ae: Autoencoder,
    pub schedule: NoiseSchedule,
    pub config: StageConfig,
    pub steps: usize,
}

impl Generator {
    /// Loads a denoiser checkpoint and the autoencoder recorded with it.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let (denoiser, run) = Denoiser::load(checkpoint)?;
        let config: StageConfig =
            serde_json::from_value(run["stage_config"].clone()).map_err(|e| Error::load(checkpoint, e))?;
        let ae = load_frozen_ae(&config.autoencoder_checkpoint)?;
        Ok(Self {
            schedule: config.backend.schedule()?,
            steps: config.backend.steps(),
            denoiser: denoiser.frozen()?,
            ae,
            config,
        })
    }

    pub fn mode(&self) -> BackendMode {
        self.schedule.mode()
    }

    pub fn checkpoint_hash(&self) -> Result<String> {
        self.denoiser.store().hash()
    }

    /// Camouflaged sample and its composite over the record's own background.
    pub fn infer_batch(&self, records: &[&SceneRecord], seeds: &[u64]) -> Result<Vec<(RgbImage, RgbImage)>> {
        let conds = records
            .iter()
            .map(|r| build_conditioning(r, &self.config.strategy, &self.config.gen_params))
            .collect::<Result<Vec<_>>>()?;
        let crefs: Vec<&Conditioning> = conds.iter().collect();
        let out = sample_batch(&self.denoiser, &self.ae, &self.schedule, &crefs, self.steps, seeds)?;
        records
            .iter()
            .zip(out)
            .map(|(r, cam)| {
                let comp = composite(&cam, &r.image, &r.vehicle_mask)?;
                Ok((cam, comp))
            })
            .collect()
    }

    pub fn infer(&self, record: &SceneRecord, seed: u64) -> Result<(RgbImage, RgbImage)> {
        Ok(self.infer_batch(&[record], &[seed])?.remove(0))
    }
}

/// Sampling seed of a record under a base seed.
pub fn record_seed(base: u64, record: &SceneRecord) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ record.seed
}

/// Loads the checkpoint and returns `(camouflaged, composited)`.
pub fn infer(checkpoint: &Path, record: &SceneRecord, seed: u64) -> Result<(RgbImage, RgbImage)> {
    Generator::load(checkpoint)?.infer(record, seed)
}
