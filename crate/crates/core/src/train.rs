//! AdamW and the pretrain / fine-tune loops.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{load_samples, read_manifest, Sample};
use crate::error::{Error, Result};
use crate::generate::{recognize, GenerateConfig};
use crate::metrics::{Protocol, Report};
use crate::model::{Example, OcrModel};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};
use crate::tokenizer::Vocab;
use crate::vision::{apply_rotation_policy, augment, AugmentPolicy, TextImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments per parameter, in store order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Weight decay `θ ← θ − lr·wd·θ` comes first and is kept
    /// out of the moments. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, th) in p.data_mut().iter_mut().enumerate() {
                *th *= decay;
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *th -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_global_norm<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn default_lr(self) -> f64 {
        match self {
            Phase::Pretrain => 1e-4,
            Phase::Finetune => 5e-6,
        }
    }
}

/// Training hyperparameters shared by both phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Overrides the phase default (pretrain 1e-4, finetune 5e-6).
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// Apply the 95/2.5/2.5 rotation policy to training images.
    pub rotate: bool,
    /// Apply `augment_policy` after rotation.
    pub augment: bool,
    pub augment_policy: AugmentPolicy,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: None,
            batch_size: 32,
            epochs: 1,
            seed: 0,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            clip_norm: 1.0,
            rotate: true,
            augment: true,
            augment_policy: AugmentPolicy::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self, phase: Phase) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr.unwrap_or(phase.default_lr()),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// No rotation or augmentation.
    pub fn plain(mut self) -> Self {
        self.rotate = false;
        self.augment = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.lr.is_some_and(|lr| !(lr >= 0.0 && lr.is_finite())) {
            return Err(Error::invalid("lr must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Seconds since the trainer was created.
    pub wall_time: f64,
    pub phase: Phase,
}

/// Owns the optimizer state so training can continue across calls.
pub struct Trainer<'m, T> {
    pub model: &'m mut OcrModel<T>,
    pub config: TrainConfig,
    pub phase: Phase,
    opt: AdamW<T>,
    epoch: usize,
    step: usize,
    started: Instant,
    log: Option<BufWriter<File>>,
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<'m, T: Float> Trainer<'m, T> {
    pub fn new(model: &'m mut OcrModel<T>, config: TrainConfig, phase: Phase) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(model.params(), config.adamw(phase));
        Ok(Self {
            model,
            config,
            phase,
            opt,
            epoch: 0,
            step: 0,
            started: Instant::now(),
            log: None,
        })
    }

    /// Appends every step record to `path` as one JSON object per line.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.log = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn epochs(&self) -> usize {
        self.epoch
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps.is_none_or(|m| self.step < m)
    }

    /// Training images for one batch; rotation and augmentation use a
    /// generator derived from (seed, epoch, sample index) so the result does
    /// not depend on thread scheduling.
    fn prepare(&self, data: &[Sample], idx: &[usize]) -> Result<Vec<TextImage>> {
        let cfg = &self.config;
        let epoch = self.epoch as u64;
        idx.par_iter()
            .map(|&i| {
                let img = &data[i].image;
                if !cfg.rotate && !cfg.augment {
                    return Ok(img.clone());
                }
                let mut rng = derived_rng(cfg.seed ^ 0x5eed_a11c, (epoch << 32) | i as u64);
                let mut img = if cfg.rotate {
                    apply_rotation_policy(img, &mut rng)?
                } else {
                    img.clone()
                };
                if cfg.augment {
                    img = augment(&img, &cfg.augment_policy, &mut rng);
                }
                Ok(img)
            })
            .collect()
    }

    /// One optimizer step on `batch`; returns the pre-update loss and the
    /// gradient norm before clipping.
    pub fn step_on(&mut self, batch: &[Example]) -> Result<(f64, f64)> {
        let mut rng = derived_rng(self.config.seed ^ 0xd20f_0a7e, self.step as u64);
        let (loss, mut grads) = self.model.loss_and_grads(batch, Some(&mut rng))?;
        let norm = clip_global_norm(&mut grads, self.config.clip_norm);
        self.opt.step(self.model.params_mut(), &grads)?;
        self.step += 1;
        Ok((loss.f64(), norm))
    }

    /// A seeded shuffle of `data` cut into batches; one step per batch.
    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut derived_rng(self.config.seed, self.epoch as u64));
        let mut records = Vec::new();
        for idx in order.chunks(self.config.batch_size) {
            if !self.budget_left() {
                break;
            }
            let images = self.prepare(data, idx)?;
            let batch: Vec<Example> = idx
                .iter()
                .zip(&images)
                .map(|(&i, image)| Example {
                    image,
                    target: &data[i].target,
                })
                .collect();
            let (loss, grad_norm) = self.step_on(&batch)?;
            let rec = StepRecord {
                step: self.step,
                epoch: self.epoch,
                loss,
                lr: self.opt.config.lr,
                grad_norm,
                wall_time: self.started.elapsed().as_secs_f64(),
                phase: self.phase,
            };
            if let Some(w) = &mut self.log {
                let line = serde_json::to_string(&rec).expect("serializable record");
                writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
            }
            records.push(rec);
        }
        if let Some(w) = &mut self.log {
            w.flush().map_err(|e| Error::io("metrics log", e))?;
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Runs the configured number of epochs (or until `max_steps`). When
    /// `checkpoint` is given the model is saved there after every epoch.
    pub fn run(&mut self, data: &[Sample], checkpoint: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut all = Vec::new();
        for _ in 0..self.config.epochs {
            if !self.budget_left() {
                break;
            }
            all.extend(self.run_epoch(data)?);
            if let Some(p) = checkpoint {
                checkpoint::save(self.model, p)?;
            }
        }
        Ok(all)
    }
}

/// Files written by a manifest-driven run.
#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub skipped: Vec<(PathBuf, String)>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Loads a manifest (skipping unreadable samples) and trains on it, writing
/// `model.ckpt` and `metrics.jsonl` under `out_dir`.
pub fn train_manifest<T: Float>(
    model: &mut OcrModel<T>,
    vocab: &Vocab,
    manifest: &Path,
    config: &TrainConfig,
    phase: Phase,
    out_dir: &Path,
) -> Result<RunOutput> {
    let entries = read_manifest(manifest)?;
    let loaded = load_samples(&entries, vocab, model.patch_config().channels, model.max_text_len());
    if !loaded.skipped.is_empty() {
        log::warn!("skipped {} of {} samples", loaded.skipped.len(), entries.len());
    }
    if loaded.samples.is_empty() {
        return Err(Error::invalid(format!("no usable samples in {}", manifest.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let metrics_log = out_dir.join(METRICS_FILE);
    let mut trainer = Trainer::new(model, config.clone(), phase)?;
    trainer.log_to(&metrics_log)?;
    let records = trainer.run(&loaded.samples, Some(&checkpoint))?;
    Ok(RunOutput {
        records,
        checkpoint,
        metrics_log,
        skipped: loaded.skipped,
    })
}

/// Loads a pretrained checkpoint (refusing a vocabulary mismatch) and
/// continues training on `samples` at the fine-tuning rate.
pub fn finetune<T: Float>(
    pretrained: &Path,
    vocab: &Vocab,
    samples: &[Sample],
    config: &TrainConfig,
    checkpoint_out: Option<&Path>,
) -> Result<(OcrModel<T>, Vec<StepRecord>)> {
    let mut model = checkpoint::load::<T>(pretrained, vocab)?;
    let records = Trainer::new(&mut model, config.clone(), Phase::Finetune)?.run(samples, checkpoint_out)?;
    Ok((model, records))
}

/// Recognizes every image in parallel.
pub fn recognize_all<T: Float>(
    model: &OcrModel<T>,
    vocab: &Vocab,
    images: &[&TextImage],
    cfg: &GenerateConfig,
) -> Result<Vec<String>> {
    images
        .par_iter()
        .map(|img| recognize(model, vocab, img, cfg).map(|(s, _)| s))
        .collect()
}

pub fn evaluate<T: Float>(
    model: &OcrModel<T>,
    vocab: &Vocab,
    samples: &[Sample],
    cfg: &GenerateConfig,
    protocol: Protocol,
) -> Result<Report> {
    let images: Vec<&TextImage> = samples.iter().map(|s| &s.image).collect();
    let preds = recognize_all(model, vocab, &images, cfg)?;
    let gts: Vec<&str> = samples.iter().map(|s| s.label.as_str()).collect();
    Report::new(protocol, &preds, &gts)
}
