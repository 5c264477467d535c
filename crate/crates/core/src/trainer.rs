//! Alternating adversarial training with checkpoint/resume.
//!
//! All randomness is derived from `(seed, purpose, index)`: the parameter
//! initialization, the per-epoch shuffle and the per-step cut draws. A run
//! resumed at step k therefore sees exactly the batches an uninterrupted run
//! would have seen, and together with the stored Adam moments this makes the
//! loss trajectory identical.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, sample_feasible_cut, write_triplet_grid, AugmentedSample, SIDE_CUTS_DEG};
use crate::checkpoint::{self, CheckpointMeta, FORMAT_VERSION};
use crate::config::PipelineConfig;
use crate::dataset::{check_resolution, load_frame, Manifest, Split};
use crate::error::{Error, Result};
use crate::geometry::ConeSpec;
use crate::losses::{build_lpips, combined_g_loss, d_loss, scalar, LossBundle, Lpips};
use crate::models::{images_to_tensor, Discriminator, Generator};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::seeding::derive_rng;

const DOMAIN_INIT_G: u64 = 1;
const DOMAIN_INIT_D: u64 = 2;
const DOMAIN_SHUFFLE: u64 = 3;
const DOMAIN_CUTS: u64 = 4;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const ORDER_FILE: &str = "data_order.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:08}.safetensors")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub resolution: [usize; 2],
    pub d_steps_per_g_step: usize,
    /// Loss bundles kept in the checkpoint's history ring.
    pub history_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 16,
            lr_g: 2e-4,
            lr_d: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            seed: 0,
            checkpoint_every: 100,
            resolution: [128, 128],
            d_steps_per_g_step: 1,
            history_len: 100,
        }
    }
}

impl TrainConfig {
    /// Checks the config a user may run with: positive learning rates.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::validation("learning rates must be > 0"));
        }
        self.validate_mechanics()
    }

    /// Everything except the sign of the learning rates; zero rates are
    /// allowed here so a frozen step can be exercised.
    pub(crate) fn validate_mechanics(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::validation("steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(Error::validation("d_steps_per_g_step must be >= 1"));
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0 && self.lr_g.is_finite() && self.lr_d.is_finite()) {
            return Err(Error::validation("learning rates must be finite and non-negative"));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(format!("adam beta {b} outside [0, 1)")));
            }
        }
        check_resolution(self.resolution[0], self.resolution[1])
    }
}

#[derive(Debug, Clone)]
pub struct TrainingFrame {
    pub pixels: Array2<f32>,
    pub cone: ConeSpec,
    pub frame_id: String,
}

/// Frames of one split, resized to the training resolution and held in
/// memory.
#[derive(Debug, Clone)]
pub struct TrainData {
    frames: Vec<TrainingFrame>,
}

impl TrainData {
    pub fn load(manifest: &Manifest, split: Split, resolution: [usize; 2]) -> Result<Self> {
        let mut frames = Vec::new();
        for record in manifest.split(split) {
            let f = load_frame(manifest, record, (resolution[0], resolution[1]))?;
            frames.push(TrainingFrame {
                pixels: f.pixels,
                cone: f.cone,
                frame_id: f.record.key(),
            });
        }
        Self::from_frames(frames)
    }

    pub fn from_frames(frames: Vec<TrainingFrame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::validation("no frames to train on"));
        }
        Ok(TrainData { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[TrainingFrame] {
        &self.frames
    }

    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.frames.len()).collect();
        order.shuffle(&mut derive_rng(seed, DOMAIN_SHUFFLE, epoch));
        order
    }

    /// Frame indices of the batch consumed by step `step` (0-based). The
    /// frames are read as one continuous stream of epoch permutations.
    pub fn batch_indices(&self, seed: u64, step: u64, batch_size: usize) -> Vec<usize> {
        let n = self.frames.len() as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..batch_size as u64)
            .map(|k| {
                let pos = step * batch_size as u64 + k;
                let epoch = pos / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    cached = Some((epoch, self.epoch_order(seed, epoch)));
                }
                cached.as_ref().expect("just filled").1[(pos % n) as usize]
            })
            .collect()
    }

    pub fn batch_for_step(&self, seed: u64, step: u64, batch_size: usize) -> Result<Vec<AugmentedSample>> {
        let mut rng = derive_rng(seed, DOMAIN_CUTS, step);
        self.batch_indices(seed, step, batch_size)
            .into_iter()
            .map(|i| {
                let f = &self.frames[i];
                augment(&f.pixels, &f.cone, sample_feasible_cut(&mut rng, f.cone.spread_deg)?)
            })
            .collect()
    }

    /// Deterministic evaluation batch: the first `n` frames, cycling through
    /// the training cuts.
    pub fn fixed_batch(&self, n: usize) -> Result<Vec<AugmentedSample>> {
        self.frames
            .iter()
            .take(n)
            .enumerate()
            .map(|(k, f)| augment(&f.pixels, &f.cone, SIDE_CUTS_DEG[k % SIDE_CUTS_DEG.len()]))
            .collect()
    }
}

/// Tensors of a batch, all `(N, 1, H, W)`.
struct BatchTensors {
    masked: Tensor,
    augment_mask: Tensor,
    cut_mask: Tensor,
    target: Tensor,
}

fn batch_tensors(batch: &[AugmentedSample], resolution: [usize; 2], device: &Device) -> Result<BatchTensors> {
    if batch.is_empty() {
        return Err(Error::validation("empty training batch"));
    }
    for s in batch {
        if s.target.dim() != (resolution[0], resolution[1]) {
            return Err(Error::validation(format!(
                "sample shape {:?} does not match the configured resolution {:?}",
                s.target.dim(),
                resolution
            )));
        }
    }
    let stack = |f: &dyn Fn(&AugmentedSample) -> Array2<f32>| -> Result<Tensor> {
        let imgs: Vec<Array2<f32>> = batch.iter().map(f).collect();
        images_to_tensor(&imgs.iter().collect::<Vec<_>>(), device)
    };
    Ok(BatchTensors {
        masked: stack(&|s| s.masked_image.clone())?,
        augment_mask: stack(&|s| s.augment_mask.to_f32())?,
        cut_mask: stack(&|s| s.cut_region().to_f32())?,
        target: stack(&|s| s.target.clone())?,
    })
}

/// Generator output with the known pixels pasted back.
fn composite(gen: &Tensor, t: &BatchTensors) -> Result<Tensor> {
    Ok((&t.masked + (gen * &t.cut_mask)?)?)
}

pub struct Trainer {
    config: PipelineConfig,
    device: Device,
    generator: Generator,
    g_store: ParamStore,
    discriminator: Discriminator,
    d_store: ParamStore,
    opt_g: Adam,
    opt_d: Adam,
    lpips: Lpips,
    step: u64,
    history: VecDeque<LossBundle>,
    dump_dir: PathBuf,
}

impl Trainer {
    /// Fresh networks initialized from `config.train.seed`.
    pub fn new(config: &PipelineConfig, device: &Device) -> Result<Self> {
        config.train.validate_mechanics()?;
        let seed = config.train.seed;
        let mut g_store = ParamStore::new(device);
        let generator = Generator::new(&config.generator, &mut g_store, &mut derive_rng(seed, DOMAIN_INIT_G, 0))?;
        let mut d_store = ParamStore::new(device);
        let discriminator =
            Discriminator::new(&config.discriminator, &mut d_store, &mut derive_rng(seed, DOMAIN_INIT_D, 0))?;
        let t = &config.train;
        Ok(Trainer {
            config: config.clone(),
            device: device.clone(),
            generator,
            g_store,
            discriminator,
            d_store,
            opt_g: Adam::new(t.lr_g, t.adam_beta1, t.adam_beta2),
            opt_d: Adam::new(t.lr_d, t.adam_beta1, t.adam_beta2),
            lpips: build_lpips(&config.lpips, device)?,
            step: 0,
            history: VecDeque::new(),
            dump_dir: std::env::temp_dir(),
        })
    }

    /// Restores networks, optimizer moments, step and loss history. The
    /// training section of `config` may differ from the stored one only in
    /// `steps` and `checkpoint_every`.
    pub fn resume(path: &Path, config: &PipelineConfig, device: &Device) -> Result<Self> {
        let ck = checkpoint::load(path, device)?;
        let stored = &ck.meta.config;
        let mut comparable = config.clone();
        comparable.train.steps = stored.train.steps;
        comparable.train.checkpoint_every = stored.train.checkpoint_every;
        comparable.fid = stored.fid.clone();
        if &comparable != stored {
            return Err(Error::validation(format!(
                "{} was written with a different configuration; only steps and checkpoint_every may change on resume",
                path.display()
            )));
        }
        let mut tr = Trainer::new(config, device)?;
        tr.g_store.assign(&ck.tensors, "")?;
        tr.d_store.assign(&ck.tensors, "")?;
        tr.opt_g.restore(ck.meta.adam_g_step, &ck.tensors, "opt_g/", &tr.g_store)?;
        tr.opt_d.restore(ck.meta.adam_d_step, &ck.tensors, "opt_d/", &tr.d_store)?;
        tr.step = ck.meta.step;
        tr.history = ck.meta.loss_history.into_iter().collect();
        Ok(tr)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_params(&self) -> &ParamStore {
        &self.g_store
    }

    pub fn discriminator_params(&self) -> &ParamStore {
        &self.d_store
    }

    pub fn history(&self) -> impl Iterator<Item = &LossBundle> {
        self.history.iter()
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Where batches that produced a non-finite loss are dumped.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = dir.into();
    }

    /// `d_steps_per_g_step` discriminator updates on (real frames, detached
    /// composites), then one generator update. The reported `d_loss` is the
    /// one of the last discriminator update, measured before it was applied.
    pub fn train_step(&mut self, batch: &[AugmentedSample]) -> Result<LossBundle> {
        let t = batch_tensors(batch, self.config.train.resolution, &self.device)?;
        let n = batch.len();
        // G is not touched by the D updates, so one forward pass serves both
        // the detached D inputs and the G objective.
        let gen = self.generator.forward(&t.masked, &t.augment_mask)?;
        let mut last_d = f64::NAN;
        for _ in 0..self.config.train.d_steps_per_g_step {
            let fake = composite(&gen.detach(), &t)?;
            let scores = self.discriminator.forward(&Tensor::cat(&[&t.target, &fake], 0)?)?;
            let loss = d_loss(&scores.narrow(0, 0, n)?, &scores.narrow(0, n, n)?)?;
            last_d = scalar(&loss)?;
            if !last_d.is_finite() {
                return Err(self.abort(batch, format!("d_loss = {last_d}")));
            }
            let grads = loss.backward()?;
            self.opt_d.step(&self.d_store, &grads)?;
        }
        let fake = composite(&gen, &t)?;
        let scores = self.discriminator.forward(&fake)?;
        let (g_loss, mut bundle) = combined_g_loss(&scores, &fake, &t.target, &self.lpips, &self.config.loss_weights)?;
        bundle.d_loss = last_d;
        if !bundle.is_finite() {
            return Err(self.abort(batch, format!("{bundle:?}")));
        }
        let grads = g_loss.backward()?;
        self.opt_g.step(&self.g_store, &grads)?;
        self.step += 1;
        self.history.push_back(bundle);
        while self.history.len() > self.config.train.history_len.max(1) {
            self.history.pop_front();
        }
        Ok(bundle)
    }

    fn abort(&self, batch: &[AugmentedSample], detail: String) -> Error {
        let step = self.step + 1;
        let dir = self.dump_dir.join(format!("nonfinite-step-{step:08}"));
        let dumped = std::fs::create_dir_all(&dir).is_ok()
            && batch
                .iter()
                .enumerate()
                .all(|(k, s)| write_triplet_grid(s, &dir.join(format!("sample-{k:03}.png"))).is_ok());
        let where_ = if dumped {
            format!("; batch dumped to {}", dir.display())
        } else {
            String::from("; batch dump failed")
        };
        log::error!("non-finite loss at step {step}: {detail}{where_}");
        Error::NonFiniteLoss {
            step,
            detail: format!("{detail}{where_}"),
        }
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            step: self.step,
            seed: self.config.train.seed,
            config: self.config.clone(),
            generator_parameters: self.g_store.num_elements(),
            discriminator_parameters: self.d_store.num_elements(),
            adam_g_step: self.opt_g.step_count(),
            adam_d_step: self.opt_d.step_count(),
            loss_history: self.history.iter().copied().collect(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors = self.g_store.snapshot();
        tensors.extend(self.d_store.snapshot());
        tensors.extend(self.opt_g.state_tensors("opt_g/"));
        tensors.extend(self.opt_d.state_tensors("opt_d/"));
        checkpoint::save(path, &self.checkpoint_meta(), &tensors)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_lpips: f64,
    pub g_total: f64,
    /// Seconds since this invocation of `fit` started.
    pub wall_time: f64,
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps_run: u64,
}

/// Trains on the manifest's train split until `config.train.steps`, writing
/// the log, the data order, periodic checkpoints and `final.safetensors`
/// into `out`.
pub fn fit(config: &PipelineConfig, manifest: &Manifest, out: &Path, opts: &FitOptions) -> Result<FitOutcome> {
    config.validate()?;
    let data = TrainData::load(manifest, Split::Train, config.train.resolution)?;
    fit_data(config, &data, out, opts)
}

pub fn fit_data(config: &PipelineConfig, data: &TrainData, out: &Path, opts: &FitOptions) -> Result<FitOutcome> {
    let device = Device::Cpu;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::resume(path, config, &device)?,
        None => Trainer::new(config, &device)?,
    };
    trainer.set_dump_dir(out);
    let tc = &config.train;
    let start_step = trainer.step();
    if start_step > tc.steps {
        return Err(Error::validation(format!(
            "checkpoint is at step {start_step}, beyond the requested {} steps",
            tc.steps
        )));
    }

    let log_path = out.join(LOG_FILE);
    let order_path = out.join(ORDER_FILE);
    keep_lines_up_to(&log_path, start_step, |l| serde_json::from_str::<LogRecord>(l).ok().map(|r| r.step))?;
    keep_lines_up_to(&order_path, start_step, |l| {
        serde_json::from_str::<OrderRecord>(l).ok().map(|r| r.first_step)
    })?;
    let mut logged_epochs: std::collections::BTreeSet<u64> = if order_path.exists() {
        std::fs::read_to_string(&order_path)
            .map_err(|e| Error::io(&order_path, e))?
            .lines()
            .filter_map(|l| serde_json::from_str::<OrderRecord>(l).ok().map(|r| r.epoch))
            .collect()
    } else {
        Default::default()
    };
    let mut log = append(&log_path)?;
    let mut order_log = append(&order_path)?;

    let n = data.len() as u64;
    let bs = tc.batch_size as u64;
    let started = Instant::now();
    for step in start_step..tc.steps {
        for epoch in step * bs / n..=(step * bs + bs - 1) / n {
            if logged_epochs.insert(epoch) {
                let order = data.epoch_order(tc.seed, epoch);
                let rec = OrderRecord {
                    epoch,
                    first_step: step + 1,
                    frame_ids: order.iter().map(|&i| data.frames()[i].frame_id.clone()).collect(),
                };
                writeln!(order_log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&order_path, e))?;
            }
        }
        let batch = data.batch_for_step(tc.seed, step, tc.batch_size)?;
        let b = trainer.train_step(&batch)?;
        let rec = LogRecord {
            step: trainer.step(),
            d_loss: b.d_loss,
            g_adv: b.g_adv,
            g_lpips: b.g_lpips,
            g_total: b.g_total,
            wall_time: started.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        log::info!(
            "step {}/{}: d {:.4} g_adv {:.4} g_lpips {:.4} ({:.1}s)",
            rec.step,
            tc.steps,
            rec.d_loss,
            rec.g_adv,
            rec.g_lpips,
            rec.wall_time
        );
        if tc.checkpoint_every > 0 && rec.step % tc.checkpoint_every == 0 && rec.step < tc.steps {
            trainer.save_checkpoint(&out.join(checkpoint_name(rec.step)))?;
        }
    }
    order_log.flush().map_err(|e| Error::io(&order_path, e))?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.save_checkpoint(&final_checkpoint)?;
    Ok(FitOutcome {
        final_checkpoint,
        log: log_path,
        steps_run: tc.steps - start_step,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OrderRecord {
    epoch: u64,
    first_step: u64,
    frame_ids: Vec<String>,
}

fn append(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Drops lines whose step key is beyond `step` (left over from a run that
/// went further than the checkpoint being resumed).
fn keep_lines_up_to(path: &Path, step: u64, key: impl Fn(&str) -> Option<u64>) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text
        .lines()
        .filter(|l| key(l).is_some_and(|s| s <= step))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Held-out quality of the raw generator inside the cut region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutStats {
    /// Mean absolute error against the ground truth, averaged per image.
    pub l1_cut: f64,
    /// Standard deviation of generated pixels, averaged per image.
    pub std_cut: f64,
}

pub fn heldout_stats(generator: &Generator, batch: &[AugmentedSample], device: &Device) -> Result<HeldoutStats> {
    if batch.is_empty() {
        return Err(Error::validation("empty evaluation batch"));
    }
    let (mut l1, mut sd) = (0.0, 0.0);
    for s in batch {
        let out = crate::models::generator_forward(generator, &s.masked_image, &s.augment_mask, device)?;
        let cut = s.cut_region();
        let vals: Vec<(f64, f64)> = cut
            .view()
            .indexed_iter()
            .filter(|(_, &m)| m == 1)
            .map(|(ij, _)| (out[ij] as f64, s.target[ij] as f64))
            .collect();
        if vals.is_empty() {
            return Err(Error::validation("evaluation sample has an empty cut region"));
        }
        let k = vals.len() as f64;
        l1 += vals.iter().map(|(g, t)| (g - t).abs()).sum::<f64>() / k;
        let mean = vals.iter().map(|v| v.0).sum::<f64>() / k;
        sd += (vals.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / k).sqrt();
    }
    let n = batch.len() as f64;
    Ok(HeldoutStats {
        l1_cut: l1 / n,
        std_cut: sd / n,
    })
}
