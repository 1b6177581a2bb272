//! Flow-matching training: AdamW with decoupled weight decay, warmup plus
//! linear decay, EMA shadow weights and a progressive stage schedule that
//! mixes Text2Image, Video2World and Text2World items.

use std::io::Write;

use crossbeam_channel::bounded;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::conditioning::{apply_frame_replacement, sample_condition_mask, ConditioningSpec, MaskStage};
use crate::error::{Error, Result};
use crate::flowmatch::{gaussian, interpolate, velocity_target, TimestepSampler, TimestepSamplerConfig};
use crate::tensor::{LatentTensor, Tensor, VideoTensor};
use crate::worldmodel::patch::{patchify, token_frames};
use crate::worldmodel::text::{HashedTextEncoder, TextEmbedding};
use crate::worldmodel::tokenizer::{four, CausalTokenizer};
use crate::worldmodel::{is_camera_trainable, is_control_param, Binder, ModelConfig, ModelInput, ParamSet, WorldModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Text2Image,
    Video2World,
    Text2World,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub tasks: Vec<Task>,
    /// Square side length in pixels.
    pub resolution: usize,
    /// Pixel frames of video items; image items always use one frame.
    pub video_frames: usize,
    pub beta_shift: f64,
    /// Number of optimizer steps spent in this stage.
    pub steps: usize,
}

impl Stage {
    /// Condition-frame distribution for video items of this stage.
    pub fn mask_stage(&self) -> MaskStage {
        if self.tasks.contains(&Task::Text2World) {
            MaskStage::Final
        } else {
            MaskStage::Joint
        }
    }

    fn has_video(&self) -> bool {
        self.tasks.iter().any(|t| *t != Task::Text2Image)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub stage_schedule: Vec<Stage>,
    pub ema_decay: f64,
    /// Probability of replacing the caption with the null embedding.
    pub text_dropout: f64,
    pub timestep: TimestepSamplerConfig,
    pub seed: u64,
}

/// Five-stage progression with step counts as fractions of `max_steps`.
fn stage_schedule(resolutions: [usize; 5], video_frames: usize, max_steps: usize) -> Vec<Stage> {
    use Task::*;
    let tasks = [
        vec![Text2Image],
        vec![Text2Image, Video2World],
        vec![Text2Image, Video2World],
        vec![Text2Image, Video2World],
        vec![Text2Image, Video2World, Text2World],
    ];
    let fractions = [0.1, 0.15, 0.2, 0.25, 0.3];
    let betas = [1.0, 1.0, 3.0, 5.0, 5.0];
    let mut out = Vec::new();
    let mut used = 0;
    for i in 0..5 {
        let steps = if i == 4 {
            max_steps.saturating_sub(used)
        } else {
            (max_steps as f64 * fractions[i]).round() as usize
        };
        used += steps;
        out.push(Stage {
            tasks: tasks[i].clone(),
            resolution: resolutions[i],
            video_frames,
            beta_shift: betas[i],
            steps,
        });
    }
    out
}

impl TrainConfig {
    /// Optimizer settings of the 2B model over a 93-frame schedule.
    pub fn full_2b(max_steps: usize) -> Self {
        Self {
            lr_peak: 3e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.001,
            warmup_steps: 2000,
            max_steps,
            batch_size: 1,
            stage_schedule: stage_schedule([192, 192, 480, 704, 704], 93, max_steps),
            ema_decay: 0.9999,
            text_dropout: 0.1,
            timestep: TimestepSamplerConfig::default(),
            seed: 0,
        }
    }

    pub fn full_14b(max_steps: usize) -> Self {
        Self {
            lr_peak: 1.3e-5,
            ..Self::full_2b(max_steps)
        }
    }

    /// CPU-sized run on procedurally generated clips: 16 → 48 px, 9 frames.
    pub fn desk(max_steps: usize) -> Self {
        Self {
            lr_peak: 1e-3,
            warmup_steps: (max_steps / 20).clamp(1, 100).min(max_steps.saturating_sub(1)),
            batch_size: 4,
            stage_schedule: stage_schedule([16, 16, 32, 48, 48], 9, max_steps),
            ema_decay: 0.99,
            ..Self::full_2b(max_steps)
        }
    }

    /// Same schedule shape over `max_steps`: stage lengths and warmup are
    /// rescaled proportionally, the last stage absorbing rounding.
    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        let old = self.max_steps.max(1) as f64;
        let scale = max_steps as f64 / old;
        let n = self.stage_schedule.len();
        let mut used = 0;
        for (i, s) in self.stage_schedule.iter_mut().enumerate() {
            s.steps = if i + 1 == n {
                max_steps.saturating_sub(used)
            } else {
                ((s.steps as f64 * scale).round() as usize).min(max_steps - used)
            };
            used += s.steps;
        }
        self.warmup_steps = ((self.warmup_steps as f64 * scale).round() as usize).min(max_steps.saturating_sub(1));
        self.max_steps = max_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_peak > 0.0) {
            return Err(Error::invalid("lr_peak must be positive"));
        }
        if self.warmup_steps >= self.max_steps {
            return Err(Error::invalid(format!(
                "warmup_steps {} must be below max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || !(0.0..=1.0).contains(&self.text_dropout) {
            return Err(Error::invalid("ema_decay and text_dropout must lie in [0, 1]"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.stage_schedule.is_empty() {
            return Err(Error::invalid("stage schedule is empty"));
        }
        for (i, s) in self.stage_schedule.iter().enumerate() {
            if s.tasks.is_empty() || s.resolution == 0 || s.resolution % 16 != 0 {
                return Err(Error::invalid(format!(
                    "stage {i}: needs tasks and a resolution divisible by 16"
                )));
            }
            if s.has_video() && (s.video_frames < 2 || (s.video_frames - 1) % 4 != 0) {
                return Err(Error::invalid(format!(
                    "stage {i}: video_frames must be 1 + 4k with k >= 1"
                )));
            }
            if !(s.beta_shift > 0.0) {
                return Err(Error::invalid(format!("stage {i}: beta_shift must be positive")));
            }
        }
        self.timestep.validate()
    }
}

/// Linear warmup from 0 to `lr_peak`, then linear decay to 0 at `max_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.max_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond max_steps {}",
            cfg.max_steps
        )));
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return Ok(cfg.lr_peak);
        }
        return Ok(cfg.lr_peak * step as f64 / cfg.warmup_steps as f64);
    }
    let span = (cfg.max_steps - cfg.warmup_steps) as f64;
    Ok(cfg.lr_peak * (cfg.max_steps - step) as f64 / span)
}

/// Stage owning `step`; stages cover half-open step ranges and the last one
/// absorbs any steps past the schedule.
pub fn progressive_stage(step: usize, cfg: &TrainConfig) -> Result<&Stage> {
    let last = cfg
        .stage_schedule
        .last()
        .ok_or_else(|| Error::invalid("stage schedule is empty"))?;
    let mut start = 0;
    for s in &cfg.stage_schedule {
        if step < start + s.steps {
            return Ok(s);
        }
        start += s.steps;
    }
    Ok(last)
}

/// Index of the stage owning `step`.
pub fn stage_index(step: usize, cfg: &TrainConfig) -> usize {
    let mut start = 0;
    for (i, s) in cfg.stage_schedule.iter().enumerate() {
        if step < start + s.steps {
            return i;
        }
        start += s.steps;
    }
    cfg.stage_schedule.len().saturating_sub(1)
}

#[derive(Clone, Debug, Default)]
pub struct AdamW {
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every parameter present in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))?;
            p.ensure_same_shape(g, name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((x, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: ParamSet,
}

impl Ema {
    pub fn new(params: &ParamSet, decay: f64) -> Self {
        Self {
            decay,
            shadow: params.clone(),
        }
    }

    /// `ema ← decay·ema + (1 − decay)·θ`.
    pub fn update(&mut self, params: &ParamSet) {
        let d = self.decay;
        for (name, s) in self.shadow.iter_mut() {
            if let Some(p) = params.get(name) {
                for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
                    *a = d * *a + (1.0 - d) * b;
                }
            }
        }
    }
}

/// Which parameters receive gradient updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Freeze {
    #[default]
    None,
    /// Only the control branch trains.
    Base,
    /// Only self-attention and the camera projection train.
    CameraFinetune,
}

impl Freeze {
    pub fn trains(&self, name: &str) -> bool {
        match self {
            Freeze::None => true,
            Freeze::Base => is_control_param(name),
            Freeze::CameraFinetune => is_camera_trainable(name),
        }
    }
}

/// One fully-sampled training example: noise and timestep are drawn up front
/// so a step is a pure function of its batch.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub latent: LatentTensor,
    pub text: Option<TextEmbedding>,
    pub cond: ConditioningSpec,
    pub t: f64,
    pub noise: LatentTensor,
}

/// Masked flow-matching loss of one item and its parameter gradients.
pub fn item_loss_and_grads(model: &WorldModel, freeze: Freeze, item: &TrainItem) -> Result<(f64, ParamSet)> {
    let x_t = interpolate(&item.latent, &item.noise, item.t)?;
    let x_t = apply_frame_replacement(&x_t, &item.cond)?;
    let target = velocity_target(&item.latent, &item.noise)?;
    let loss_mask = item.cond.loss_mask();
    let [tl, c, h, w] = four(item.latent.shape())?;
    let per_token = (c * 4) as f64;
    let frames = token_frames(tl, h, w);
    let denom: f64 = frames.iter().map(|&f| loss_mask[f] * per_token).sum();
    if denom == 0.0 {
        return Err(Error::invalid("loss mask selects no elements"));
    }
    let weights = Tensor::new(vec![frames.len(), 1], frames.iter().map(|&f| loss_mask[f]).collect())?;

    let mask = item.cond.mask_values();
    let input = ModelInput::new(&x_t, &mask, item.t, item.text.as_ref()).with_conditioning(&item.cond);
    let mut g = Graph::new();
    let mut b = Binder::with_filter(&model.params, |n| freeze.trains(n));
    let pred = model.forward(&mut g, &mut b, &input)?;
    let tgt = g.constant(patchify(&target)?);
    let diff = g.sub(pred, tgt)?;
    let sq = g.mul(diff, diff)?;
    let w = g.constant(weights);
    let weighted = g.mul_col(sq, w)?;
    let total = g.sum(weighted);
    let loss = g.scale(total, 1.0 / denom);
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((value, b.gradients(&grads)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub stage: usize,
}

pub struct Trainer {
    pub model: WorldModel,
    pub ema: Ema,
    pub cfg: TrainConfig,
    pub freeze: Freeze,
    opt: AdamW,
}

impl Trainer {
    pub fn new(model: WorldModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let ema = Ema::new(&model.params, cfg.ema_decay);
        Ok(Self {
            model,
            ema,
            cfg,
            freeze: Freeze::None,
            opt: AdamW::new(),
        })
    }

    pub fn with_freeze(mut self, freeze: Freeze) -> Self {
        self.freeze = freeze;
        self
    }

    /// Average the batch gradient, take one AdamW step, blend the EMA.
    pub fn train_step(&mut self, batch: &[TrainItem], step: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut total = 0.0;
        let mut acc: Option<ParamSet> = None;
        for item in batch {
            let (loss, grads) = item_loss_and_grads(&self.model, self.freeze, item)?;
            total += loss;
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => {
                    for (k, g) in grads {
                        match a.get_mut(&k) {
                            Some(t) => t.add_assign(&g),
                            None => {
                                a.insert(k, g);
                            }
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let loss = total / n;
        let mut grads = acc.expect("non-empty batch");
        for g in grads.values_mut() {
            *g = g.scaled(1.0 / n);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, what: "loss".into() });
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                what: format!("gradient of `{name}`"),
            });
        }
        let lr = lr_at(step.min(self.cfg.max_steps), &self.cfg)?;
        self.opt.step(
            &mut self.model.params,
            &grads,
            lr,
            self.cfg.betas,
            self.cfg.eps,
            self.cfg.weight_decay,
        )?;
        self.ema.update(&self.model.params);
        Ok(loss)
    }

    pub fn ema_model(&self) -> WorldModel {
        WorldModel {
            config: self.model.config.clone(),
            params: self.ema.shadow.clone(),
        }
    }

    /// Full schedule. Batches are prepared on a loader thread and handed over
    /// a bounded channel; losses are returned and optionally logged as JSONL.
    pub fn run<S: DataSource>(&mut self, source: &mut S, mut log: Option<&mut dyn Write>) -> Result<Vec<f64>> {
        let cfg = self.cfg.clone();
        let mut prep = BatchBuilder::new(&self.model.config, &cfg)?;
        let (tx, rx) = bounded::<Result<Vec<TrainItem>>>(4);
        std::thread::scope(|scope| {
            scope.spawn(move || {
                for step in 0..cfg.max_steps {
                    let batch = prep.build(source, step);
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            });
            let mut losses = Vec::with_capacity(self.cfg.max_steps);
            for step in 0..self.cfg.max_steps {
                let batch = rx
                    .recv()
                    .map_err(|_| Error::invalid("data loader stopped early"))??;
                let loss = self.train_step(&batch, step)?;
                losses.push(loss);
                if let Some(w) = log.as_deref_mut() {
                    let rec = LogRecord {
                        step,
                        loss,
                        lr: lr_at(step, &self.cfg)?,
                        stage: stage_index(step, &self.cfg),
                    };
                    serde_json::to_writer(&mut *w, &rec)?;
                    w.write_all(b"\n")?;
                }
            }
            drop(rx);
            Ok(losses)
        })
    }
}

/// A captioned pixel clip.
#[derive(Clone, Debug)]
pub struct Sample {
    pub video: VideoTensor,
    pub caption: String,
}

pub trait DataSource: Send {
    /// A clip of `frames` frames at `resolution`×`resolution`.
    fn sample(&mut self, resolution: usize, frames: usize, rng: &mut ChaCha8Rng) -> Result<Sample>;
}

/// Turns raw samples into [`TrainItem`]s: tokenizes, encodes captions, picks
/// the task, draws condition masks, timesteps and noise.
pub struct BatchBuilder {
    cfg: TrainConfig,
    latent_channels: usize,
    tokenizer: CausalTokenizer,
    text: HashedTextEncoder,
    timesteps: TimestepSampler,
    rng: ChaCha8Rng,
}

impl BatchBuilder {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            latent_channels: model.latent_channels,
            tokenizer: CausalTokenizer::default(),
            text: HashedTextEncoder::with_dim(model.text_dim),
            timesteps: TimestepSampler::new(cfg.timestep.clone())?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn build<S: DataSource + ?Sized>(&mut self, source: &mut S, step: usize) -> Result<Vec<TrainItem>> {
        let stage = progressive_stage(step, &self.cfg)?.clone();
        self.timesteps.cfg.beta = stage.beta_shift;
        (0..self.cfg.batch_size)
            .map(|_| {
                let task = stage.tasks[self.rng.random_range(0..stage.tasks.len())];
                let frames = if task == Task::Text2Image { 1 } else { stage.video_frames };
                let sample = source.sample(stage.resolution, frames, &mut self.rng)?;
                let latent = self.tokenizer.encode(&sample.video)?;
                if latent.shape()[1] != self.latent_channels {
                    return Err(Error::shape(format!(
                        "clip encodes to {} latent channels, model expects {}",
                        latent.shape()[1],
                        self.latent_channels
                    )));
                }
                let tl = latent.len0();
                let cond = if task == Task::Text2Image {
                    ConditioningSpec::text2world(tl)
                } else {
                    sample_condition_mask(stage.mask_stage(), tl, &mut self.rng)?
                }
                .with_clean_latent(&latent)?;
                let text = if self.rng.random_bool(self.cfg.text_dropout) {
                    None
                } else {
                    Some(self.text.encode(&sample.caption))
                };
                let t = self.timesteps.sample(&mut self.rng);
                let noise = gaussian(latent.shape(), &mut self.rng);
                Ok(TrainItem {
                    latent,
                    text,
                    cond,
                    t,
                    noise,
                })
            })
            .collect()
    }
}

/// `config.json` for the `train` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let mut cfg = TrainConfig::full_2b(10_000);
        assert_eq!(lr_at(2000, &cfg).unwrap(), 3e-5);
        assert_eq!(lr_at(10_000, &cfg).unwrap(), 0.0);
        assert!((lr_at(1000, &cfg).unwrap() - 1.5e-5).abs() < 1e-18);
        assert!(lr_at(10_001, &cfg).is_err());
        cfg.warmup_steps = 10_000;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_partition() {
        let cfg = TrainConfig::desk(2000);
        assert_eq!(cfg.stage_schedule.iter().map(|s| s.steps).sum::<usize>(), 2000);
        assert_eq!(progressive_stage(0, &cfg).unwrap().tasks, vec![Task::Text2Image]);
        assert_eq!(progressive_stage(1999, &cfg).unwrap().tasks.len(), 3);
        assert_eq!(stage_index(199, &cfg), 0);
        assert_eq!(stage_index(200, &cfg), 1);
        let mut empty = cfg.clone();
        empty.stage_schedule.clear();
        assert!(progressive_stage(0, &empty).is_err());
    }

    #[test]
    fn ema_extremes() {
        let p: ParamSet = [("a".to_string(), Tensor::full(&[2], 3.0))].into();
        let q: ParamSet = [("a".to_string(), Tensor::full(&[2], 7.0))].into();
        let mut e = Ema::new(&p, 1.0);
        e.update(&q);
        assert_eq!(e.shadow, p);
        let mut e = Ema::new(&p, 0.0);
        e.update(&q);
        assert_eq!(e.shadow, q);
    }

    #[test]
    fn freeze_filters() {
        assert!(Freeze::Base.trains("control.blocks.0.mlp.fc1.weight"));
        assert!(!Freeze::Base.trains("blocks.0.mlp.fc1.weight"));
        assert!(Freeze::CameraFinetune.trains("blocks.3.self_attn.q.weight"));
        assert!(Freeze::CameraFinetune.trains("camera_proj.weight"));
        assert!(!Freeze::CameraFinetune.trains("blocks.3.adaln_sa.up.weight"));
    }
}

