//! Joint training of encoder, decoder and discriminator.
//!
//! Each step updates encoder and decoder on the reconstruction and
//! non-saturating adversarial losses, then the discriminator on its logistic
//! loss plus a lazily applied R1 penalty. All randomness (batch order, input
//! masks, noise grids) comes from generators seeded by the run seed and the
//! step index, so a resumed run reproduces an uninterrupted one.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};
use thiserror::Error;

use crate::checkpoint::{
    self, checkpoint_name, CheckpointError, LoadedCheckpoint, OptimizerSnapshot, SaveOptions,
};
use crate::geometry::BoxSet;
use crate::imaging::{batch_tensor, Image};
use crate::networks::perceptual::PerceptualExtractor;
use crate::networks::{FaceModel, ModelConfig, NetworkError, NoiseGrids};
use crate::objectives::{
    discriminator_adv, generator_adv, r1_penalty, r1_scale, recon_loss, scalar, LossReport, LossWeights,
    ObjectiveError,
};
use crate::sprites::{self, BiasSpec, IrregularMask, SpriteError};

pub const LOSS_HEADER: &str = "step,l1,perceptual,g_adv,d_adv,r1";
pub const CONFIG_FILE: &str = "train_config.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] SpriteError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFinite {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("out of memory at step {step}: {detail}; reduce batch_size or the channel schedule")]
    OutOfMemory { step: u64, detail: String },
    #[error("training step {step} failed: {detail}")]
    Runtime { step: u64, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Procedurally rendered sprites.
    Sprites {
        count: usize,
        seed: u64,
        #[serde(default)]
        bias: Option<BiasSpec>,
    },
    /// A folder of PNGs (optionally with `attributes.csv`).
    Folder { path: PathBuf },
}

impl DatasetSpec {
    pub fn load(&self, resolution: usize) -> Result<Vec<Image>, TrainError> {
        let items = match self {
            DatasetSpec::Sprites { count, seed, bias } => sprites::generate_sprites(*count, resolution, *seed, *bias)?,
            DatasetSpec::Folder { path } => sprites::load_folder(path, resolution)?,
        };
        Ok(items.into_iter().map(|li| li.pixels).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Defaults to the standard boxes rescaled to the model resolution.
    #[serde(default)]
    pub boxes: Option<BoxSet>,
    pub dataset: DatasetSpec,
    pub batch_size: usize,
    pub steps: u64,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub losses: LossWeights,
    #[serde(default = "yes")]
    pub perceptual: bool,
    /// Irregular-mask perturbation of the encoder input.
    #[serde(default = "yes")]
    pub perturb_inputs: bool,
    /// 0 saves only at the end of the run.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub seed: u64,
    #[serde(default = "cpu")]
    pub device: String,
}

fn yes() -> bool {
    true
}

fn cpu() -> String {
    "cpu".into()
}

impl TrainConfig {
    pub fn new(model: ModelConfig, dataset: DatasetSpec, steps: u64) -> Self {
        Self {
            seed: model.seed,
            model,
            boxes: None,
            dataset,
            batch_size: 16,
            steps,
            optimizer: AdamConfig::default(),
            losses: LossWeights::default(),
            perceptual: true,
            perturb_inputs: true,
            checkpoint_every: 0,
            device: cpu(),
        }
    }

    pub fn box_set(&self) -> Result<BoxSet, TrainError> {
        match &self.boxes {
            Some(b) => Ok(b.clone()),
            None => BoxSet::default_for(self.model.image_resolution())
                .map_err(|e| TrainError::Config(e.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.device != "cpu" {
            return Err(TrainError::Config(format!(
                "device {:?} is not available; only \"cpu\" is supported",
                self.device
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(TrainError::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moments are plain tensors so they can be
/// checkpointed and restored exactly.
#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, named: Vec<(String, Tensor)>) -> Self {
        let (names, params): (Vec<String>, Vec<Tensor>) = named.into_iter().unzip();
        let m = params.iter().map(|p| p.zeros_like().detach()).collect();
        let v = params.iter().map(|p| p.zeros_like().detach()).collect();
        Self {
            config,
            step: 0,
            names,
            params,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn update(&mut self, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.params.len());
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        tch::no_grad(|| {
            for ((p, g), (m, v)) in self.params.iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                // parameters unreachable from the loss get an undefined gradient
                let zero;
                let g = if g.defined() {
                    g
                } else {
                    zero = p.zeros_like();
                    &zero
                };
                *m = &*m * beta1 + g * (1.0 - beta1);
                *v = &*v * beta2 + g.square() * (1.0 - beta2);
                let update = (&*m / bc1) / ((&*v / bc2).sqrt() + eps) * lr;
                let _ = p.shallow_clone().g_sub_(&update);
            }
        });
    }

    /// Moments keyed `"{prefix}.m.{name}"` and `"{prefix}.v.{name}"`.
    pub fn state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.names.len());
        for (i, n) in self.names.iter().enumerate() {
            out.push((format!("{prefix}.m.{n}"), self.m[i].shallow_clone()));
            out.push((format!("{prefix}.v.{n}"), self.v[i].shallow_clone()));
        }
        out
    }

    pub fn restore(&mut self, prefix: &str, step: u64, tensors: &HashMap<&str, &Tensor>) -> Result<(), TrainError> {
        for (i, n) in self.names.iter().enumerate() {
            for (moment, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}.{moment}.{n}");
                let t = tensors
                    .get(key.as_str())
                    .ok_or_else(|| TrainError::Config(format!("optimizer state {key} is missing")))?;
                if t.size() != self.params[i].size() {
                    return Err(TrainError::Config(format!(
                        "optimizer state {key} has shape {:?}, parameter has {:?}",
                        t.size(),
                        self.params[i].size()
                    )));
                }
                *slot = t.to_kind(self.params[i].kind()).detach().copy();
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Generator for the randomness of one training step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Dataset indices of the batch used at 1-based `step`: the data is walked
/// through a fresh permutation each epoch.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (0..batch)
        .map(|t| {
            let pos = (step - 1) * batch as u64 + t as u64;
            let epoch = pos / n as u64;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cache = Some((epoch, epoch_permutation(seed, epoch, n)));
            }
            cache.as_ref().unwrap().1[(pos % n as u64) as usize]
        })
        .collect()
}

/// `[B, 1, H, W]` keep-masks: each sample is masked with probability 1/2.
pub fn input_masks(rng: &mut ChaCha8Rng, batch: usize, resolution: usize) -> (Tensor, Vec<bool>) {
    let hw = resolution * resolution;
    let mut data = vec![1f32; batch * hw];
    let mut masked = Vec::with_capacity(batch);
    for b in 0..batch {
        let m = rng.random_bool(0.5);
        if m {
            let mask = IrregularMask::random(rng, resolution, resolution);
            for (dst, src) in data[b * hw..(b + 1) * hw].iter_mut().zip(&mask.mask) {
                *dst = *src as f32;
            }
        }
        masked.push(m);
    }
    let t = Tensor::from_slice(&data).view([batch as i64, 1, resolution as i64, resolution as i64]);
    (t, masked)
}

pub fn loss_row(step: u64, r: &LossReport) -> String {
    format!("{},{},{},{},{},{}", step, r.l1_pixel, r.perceptual, r.g_adv, r.d_adv, r.r1)
}

#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: FaceModel,
    data: Tensor,
    count: usize,
    perceptual: Option<PerceptualExtractor>,
    gen_opt: Adam,
    disc_opt: Adam,
    step: u64,
    out_dir: PathBuf,
    last_checkpoint: Option<PathBuf>,
    history: Vec<LossReport>,
}

impl Trainer {
    /// Start a fresh run, loading the dataset described by the config.
    pub fn new(config: TrainConfig, out_dir: &Path) -> Result<Self, TrainError> {
        config.validate()?;
        let images = config.dataset.load(config.model.image_resolution())?;
        Self::with_images(config, &images, out_dir)
    }

    /// Start a fresh run on images already in memory.
    pub fn with_images(config: TrainConfig, images: &[Image], out_dir: &Path) -> Result<Self, TrainError> {
        config.validate()?;
        let model = FaceModel::new(config.model.clone(), config.box_set()?)?;
        let mut t = Self::assemble(config, model, images, out_dir)?;
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let cfg_path = out_dir.join(CONFIG_FILE);
        let json = serde_json::to_string_pretty(&t.config).map_err(|e| TrainError::Config(e.to_string()))?;
        fs::write(&cfg_path, json).map_err(io_err(&cfg_path))?;
        let loss_path = t.loss_path();
        fs::write(&loss_path, format!("{LOSS_HEADER}\n")).map_err(io_err(&loss_path))?;
        t.last_checkpoint = None;
        Ok(t)
    }

    /// Continue a run from a checkpoint written by [`Trainer::save_checkpoint`].
    /// Rows of the loss log past the checkpoint are discarded. `steps`
    /// overrides the stored total if given.
    pub fn resume(ckpt_dir: &Path, steps: Option<u64>) -> Result<Self, TrainError> {
        let loaded = checkpoint::load_checkpoint(ckpt_dir)?;
        let mut config = loaded
            .manifest
            .training
            .clone()
            .ok_or_else(|| TrainError::Config("checkpoint carries no training configuration".into()))?;
        if let Some(s) = steps {
            config.steps = s;
        }
        let images = config.dataset.load(config.model.image_resolution())?;
        Self::resume_with_images(loaded, config, &images, ckpt_dir)
    }

    pub fn resume_with_images(
        loaded: LoadedCheckpoint,
        config: TrainConfig,
        images: &[Image],
        ckpt_dir: &Path,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let out_dir = ckpt_dir.parent().unwrap_or(Path::new(".")).to_path_buf();
        let LoadedCheckpoint {
            manifest,
            model,
            optimizer,
            loss_curve,
        } = loaded;
        let mut t = Self::assemble(config, model, images, &out_dir)?;
        if let Some(o) = &optimizer {
            let map: HashMap<&str, &Tensor> = o.tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
            t.gen_opt.restore("generator", o.generator_step, &map)?;
            t.disc_opt.restore("discriminator", o.discriminator_step, &map)?;
        }
        t.step = manifest.iteration;
        let curve = loss_curve.unwrap_or_else(|| format!("{LOSS_HEADER}\n"));
        t.history = parse_loss_curve(&curve, manifest.iteration, &t.config.losses);
        let mut kept = String::new();
        for line in curve.lines() {
            let keep = match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
                Some(step) => step <= manifest.iteration,
                None => true,
            };
            if keep {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        let loss_path = t.loss_path();
        fs::write(&loss_path, kept).map_err(io_err(&loss_path))?;
        t.last_checkpoint = Some(ckpt_dir.to_path_buf());
        Ok(t)
    }

    fn assemble(config: TrainConfig, model: FaceModel, images: &[Image], out_dir: &Path) -> Result<Self, TrainError> {
        if images.is_empty() {
            return Err(TrainError::Config("the training set is empty".into()));
        }
        let refs: Vec<&Image> = images.iter().collect();
        let data = model.images_tensor(&refs)?;
        let gen: Vec<(String, Tensor)> = sorted(model.generator_vars().variables());
        let disc: Vec<(String, Tensor)> = sorted(model.discriminator_vars().variables());
        let perceptual = config.perceptual.then(|| PerceptualExtractor::random(config.seed));
        Ok(Self {
            gen_opt: Adam::new(config.optimizer, gen),
            disc_opt: Adam::new(config.optimizer, disc),
            count: images.len(),
            config,
            model,
            data,
            perceptual,
            step: 0,
            out_dir: out_dir.to_path_buf(),
            last_checkpoint: None,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &FaceModel {
        &self.model
    }

    pub fn into_model(self) -> FaceModel {
        self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[LossReport] {
        &self.history
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn loss_path(&self) -> PathBuf {
        self.out_dir.join(checkpoint::LOSS_FILE)
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    pub fn optimizer_snapshot(&self) -> OptimizerSnapshot {
        let mut tensors = self.gen_opt.state("generator");
        tensors.extend(self.disc_opt.state("discriminator"));
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        OptimizerSnapshot {
            generator_step: self.gen_opt.step_count(),
            discriminator_step: self.disc_opt.step_count(),
            tensors,
        }
    }

    /// Run one optimisation step, append it to the loss log and return it.
    pub fn train_step(&mut self) -> Result<LossReport, TrainError> {
        let step = self.step + 1;
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| self.compute_step(step)));
        let report = match outcome {
            Ok(r) => r?,
            Err(payload) => {
                let detail = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "unknown failure".into());
                let lower = detail.to_lowercase();
                return Err(if lower.contains("alloc") || lower.contains("out of memory") {
                    TrainError::OutOfMemory { step, detail }
                } else {
                    TrainError::Runtime { step, detail }
                });
            }
        };
        self.step = step;
        let path = self.loss_path();
        let mut f = OpenOptions::new().append(true).create(true).open(&path).map_err(io_err(&path))?;
        writeln!(f, "{}", loss_row(step, &report)).map_err(io_err(&path))?;
        self.history.push(report);
        Ok(report)
    }

    fn non_finite(&self, step: u64) -> TrainError {
        TrainError::NonFinite {
            step,
            last_checkpoint: self.last_checkpoint.clone(),
        }
    }

    fn compute_step(&mut self, step: u64) -> Result<LossReport, TrainError> {
        let cfg = &self.config;
        let w = cfg.losses;
        let b = cfg.batch_size;
        let r = self.model.resolution();
        let idx: Vec<i64> = batch_indices(cfg.seed, step, b, self.count).iter().map(|&i| i as i64).collect();
        let x = self.data.index_select(0, &Tensor::from_slice(&idx));
        let mut rng = step_rng(cfg.seed, step);
        let x_in = if cfg.perturb_inputs {
            let (m, _) = input_masks(&mut rng, b, r);
            &x * m.to_kind(x.kind())
        } else {
            x.shallow_clone()
        };
        let noise = self
            .model
            .decoder
            .uses_noise()
            .then(|| NoiseGrids::sample(&self.model.decoder.noise_shapes(b), &mut rng, self.model.kind()));

        // encoder and decoder
        let e = self.model.encoder.forward(&x_in)?;
        let x_hat = self
            .model
            .decoder
            .forward(&e.icon, &e.components, noise.as_ref().map(|n| n.0.as_slice()))?;
        let (l1, perc) = recon_loss(&x, &x_hat, self.perceptual.as_ref())?;
        let g_adv = generator_adv(&self.model.discriminator.forward(&x_hat)?);
        let (l1_v, perc_v, g_v) = (scalar(&l1), scalar(&perc), scalar(&g_adv));
        if !(l1_v.is_finite() && perc_v.is_finite() && g_v.is_finite()) {
            return Err(self.non_finite(step));
        }
        let total_g = &l1 * w.l1 + &perc * w.perceptual + &g_adv * w.adversarial;
        let grads = Tensor::run_backward(&[&total_g], self.gen_opt.params(), false, false);
        self.gen_opt.update(&grads);

        // discriminator
        let d = &self.model.discriminator;
        let fake = x_hat.detach();
        let d_adv = discriminator_adv(&d.forward(&x)?, &d.forward(&fake)?);
        let scale = r1_scale(step, w.r1_interval);
        let mut total_d = &d_adv * w.adversarial;
        let mut r1_v = 0.0;
        if scale > 0.0 && w.r1_gamma > 0.0 {
            let r1 = r1_penalty(|t| d.forward(t).expect("discriminator input shape"), &x, w.r1_gamma)?;
            r1_v = scalar(&r1);
            total_d += r1 * scale;
        }
        let d_v = scalar(&d_adv);
        if !(d_v.is_finite() && r1_v.is_finite()) {
            return Err(self.non_finite(step));
        }
        let grads = Tensor::run_backward(&[&total_d], self.disc_opt.params(), false, false);
        self.disc_opt.update(&grads);

        Ok(LossReport::new(l1_v, perc_v, g_v, d_v, r1_v, scale, &w))
    }

    /// Write `ckpt-{step}` under the run directory.
    pub fn save_checkpoint(&mut self) -> Result<PathBuf, TrainError> {
        let dir = self.out_dir.join(checkpoint_name(self.step));
        let curve = fs::read_to_string(self.loss_path()).map_err(io_err(&self.loss_path()))?;
        let snapshot = self.optimizer_snapshot();
        checkpoint::save_checkpoint(
            &dir,
            &self.model,
            SaveOptions {
                iteration: self.step,
                optimizer: Some(&snapshot),
                training: Some(&self.config),
                loss_curve: Some(&curve),
            },
        )?;
        self.last_checkpoint = Some(dir.clone());
        Ok(dir)
    }

    /// Train until the configured step count, checkpointing on schedule and
    /// at the end.
    pub fn run(&mut self, mut on_step: impl FnMut(u64, &LossReport)) -> Result<Option<PathBuf>, TrainError> {
        let every = self.config.checkpoint_every;
        while self.step < self.config.steps {
            let report = self.train_step()?;
            on_step(self.step, &report);
            if every > 0 && self.step.is_multiple_of(every) {
                self.save_checkpoint()?;
            }
        }
        let expected = self.out_dir.join(checkpoint_name(self.step));
        if self.last_checkpoint.as_deref() != Some(expected.as_path()) {
            self.save_checkpoint()?;
        }
        Ok(self.last_checkpoint.clone())
    }

    /// Reconstruction of the first `n` training images without noise, as
    /// `(inputs, outputs)`.
    pub fn preview(&self, n: usize) -> Result<(Tensor, Tensor), TrainError> {
        let _g = tch::no_grad_guard();
        let x = self.data.narrow(0, 0, n.min(self.count) as i64);
        let y = self.model.reconstruct(&x)?;
        Ok((x, y))
    }
}

fn sorted(map: HashMap<String, Tensor>) -> Vec<(String, Tensor)> {
    let mut v: Vec<(String, Tensor)> = map.into_iter().collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

fn parse_loss_curve(text: &str, up_to: u64, w: &LossWeights) -> Vec<LossReport> {
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').filter_map(|s| s.parse().ok()).collect();
        if f.len() == 6 && (f[0] as u64) <= up_to {
            let scale = r1_scale(f[0] as u64, w.r1_interval);
            out.push(LossReport::new(f[1], f[2], f[3], f[4], f[5], scale, w));
        }
    }
    out
}

/// Decode a batch tensor back into images.
pub fn tensor_images(t: &Tensor) -> Vec<Image> {
    (0..t.size()[0]).map(|i| Image::from_tensor(&t.get(i))).collect()
}

/// Convenience for callers holding images rather than tensors.
pub fn stack(images: &[Image]) -> Tensor {
    let refs: Vec<&Image> = images.iter().collect();
    batch_tensor(&refs, Kind::Float, tch::Device::Cpu)
}
