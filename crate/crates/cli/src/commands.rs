//! Subcommand definitions and their implementations.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use worldflow_core::checkpoint::Checkpoint;
use worldflow_core::conditioning::ConditioningSpec;
use worldflow_core::datakit::{curate, ClipFilter, ClipRecord, DedupConfig, MotionMagnitudeFilter, MovingShapes, ShardConfig};
use worldflow_core::evalkit::{self, LocalContrastScorer, Vote};
use worldflow_core::flowmatch::{euler_sample, SamplerConfig};
use worldflow_core::grpo::{GrpoTrainer, RLConfig, RlCondition};
use worldflow_core::merge::{self, default_grid, grid_search, MergeMethod};
use worldflow_core::rewardsvc::{
    BrightnessReward, CheckerboardReward, MotionSmoothnessReward, RewardClient, RewardScorer, RewardService, ServiceConfig,
    TokenizerDecoder,
};
use worldflow_core::trainer::{item_loss_and_grads, BatchBuilder, Freeze, RunConfig, Stage, Task, TrainConfig, Trainer};
use worldflow_core::worldmodel::text::HashedTextEncoder;
use worldflow_core::worldmodel::tokenizer::CausalTokenizer;
use worldflow_core::worldmodel::{ModelConfig, ParamSet, WorldModel};
use worldflow_core::{Tensor, VideoTensor};

use crate::http::HttpRewardClient;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] worldflow_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png error: {0}")]
    Png(#[from] png::EncodingError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "worldflow", version, about = "Flow-matching world-model toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train a world model on procedurally generated moving shapes.
    Train(TrainArgs),
    /// Generate a clip with the Euler sampler.
    Sample(SampleArgs),
    /// Merge checkpoints, or grid-search merge recipes.
    Merge(MergeArgs),
    /// GRPO post-training against a reward.
    Rl(RlArgs),
    /// Compute evaluation metrics.
    Eval(EvalArgs),
    /// Filter, deduplicate and shard a clip manifest.
    Curate(CurateArgs),
    /// Run the reward service over HTTP.
    ServeRewards(ServeArgs),
}

/// Worker cap from `WORLDFLOW_THREADS`, else the available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("WORLDFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One structured log line on stdout.
pub fn emit<T: Serialize>(event: &str, body: &T) {
    let mut v = serde_json::to_value(body).unwrap_or(serde_json::Value::Null);
    let line = match v.as_object_mut() {
        Some(obj) => {
            obj.insert("event".into(), event.into());
            v
        }
        None => serde_json::json!({ "event": event, "value": v }),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn load_model(path: &Path) -> CliResult<(WorldModel, u64)> {
    let ck = Checkpoint::load(path)?;
    let step = ck.step;
    Ok((ck.into_model()?, step))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Merge(a) => merge_cmd(a),
        Command::Rl(a) => rl(a),
        Command::Eval(a) => eval(a),
        Command::Curate(a) => curate_cmd(a),
        Command::ServeRewards(a) => serve(a),
    }
}

// ---------------------------------------------------------------- train

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FreezeArg {
    None,
    Base,
    Camera,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `{model, train}` JSON; defaults to the small model with the desk schedule.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    pub freeze: FreezeArg,
    #[arg(long)]
    pub out: PathBuf,
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig {
            model: ModelConfig::small(),
            train: TrainConfig::desk(a.steps.unwrap_or(2000)),
        },
    };
    if let Some(n) = a.steps {
        if n == 0 {
            return Err(usage("--steps must be at least 1"));
        }
        cfg.train = cfg.train.with_max_steps(n);
    }
    if let Some(lr) = a.lr {
        cfg.train.lr_peak = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let (model, start) = match &a.init {
        Some(p) => load_model(p)?,
        None => (WorldModel::new(cfg.model.clone(), cfg.train.seed)?, 0),
    };
    cfg.model = model.config.clone();
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    emit("config", &serde_json::json!({ "command": "train", "config": cfg }));

    let freeze = match a.freeze {
        FreezeArg::None => Freeze::None,
        FreezeArg::Base => Freeze::Base,
        FreezeArg::Camera => Freeze::CameraFinetune,
    };
    let mut trainer = Trainer::new(model, cfg.train.clone())?.with_freeze(freeze);
    let mut log = BufWriter::new(File::create(a.out.join("train_log.jsonl"))?);
    let losses = trainer.run(&mut MovingShapes, Some(&mut log))?;
    log.flush()?;
    let step = start + losses.len() as u64;
    Checkpoint::from_model(&trainer.model, step).save(&a.out.join("checkpoint"))?;
    Checkpoint::from_model(&trainer.ema_model(), step).save(&a.out.join("ema"))?;
    let n = losses.len();
    let k = n.min(50).max(1);
    emit(
        "done",
        &serde_json::json!({
            "steps": n,
            "first_loss": losses[..k.min(n)].iter().sum::<f64>() / k as f64,
            "last_loss": losses[n.saturating_sub(k)..].iter().sum::<f64>() / k as f64,
        }),
    );
    Ok(())
}

// ---------------------------------------------------------------- sample

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    T2w,
    I2w,
    V2w,
}

impl Mode {
    fn cond_frames(self) -> usize {
        match self {
            Mode::T2w => 0,
            Mode::I2w => 1,
            Mode::V2w => 5,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    /// Checkpoint directory; a fresh small model seeded by `--model-seed` otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long, value_enum, default_value = "t2w")]
    pub mode: Mode,
    #[arg(long, default_value = "")]
    pub prompt: String,
    /// Raw conditioning video for i2w / v2w.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 3.0)]
    pub guidance: f64,
    #[arg(long, default_value_t = 16)]
    pub resolution: usize,
    /// Pixel frames, 1 + 4k.
    #[arg(long, default_value_t = 9)]
    pub frames: usize,
    /// Also dump frames as PNG.
    #[arg(long)]
    pub png: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn sample(a: SampleArgs) -> CliResult<()> {
    if a.frames == 0 || (a.frames - 1) % 4 != 0 {
        return Err(usage("--frames must be 1 + 4k"));
    }
    if a.mode != Mode::T2w && a.init.is_none() {
        return Err(usage("--init is required for i2w and v2w"));
    }
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("run_config.json"), &a)?;
    emit("config", &serde_json::json!({ "command": "sample", "config": &a }));

    let model = match &a.ckpt {
        Some(p) => load_model(p)?.0,
        None => WorldModel::new(ModelConfig::small(), a.model_seed.unwrap_or(0))?,
    };
    let tok = CausalTokenizer::default();
    let channels = model.config.latent_channels / tok.latent_channels(1);
    let latent_shape = tok.latent_shape(&[a.frames, channels, a.resolution, a.resolution])?;
    let tl = latent_shape[0];
    let k = a.mode.cond_frames();
    let mut cond = ConditioningSpec::new(k, tl)?;
    if let Some(p) = &a.init {
        if k > 0 {
            let init = Tensor::read_raw(p)?;
            if init.len0() < k {
                return Err(usage(format!("--init holds {} frames, mode needs {k}", init.len0())));
            }
            cond = cond.with_clean_latent(&tok.encode(&init.narrow0(0, k)?)?)?;
        }
    }
    let text = HashedTextEncoder::with_dim(model.config.text_dim).encode(&a.prompt);
    let scfg = SamplerConfig {
        num_steps: a.steps,
        guidance_scale: a.guidance,
        seed: a.seed,
    };
    let latent = euler_sample(&model, &cond, &text, &latent_shape, &scfg)?;
    let video = tok.decode(&latent)?;
    latent.write_raw(&a.out.join("latent.f32"))?;
    video.write_raw(&a.out.join("video.f32"))?;
    if a.png {
        write_png_frames(&video, &a.out.join("frames"))?;
    }
    emit(
        "done",
        &serde_json::json!({ "video": a.out.join("video.f32"), "shape": video.shape() }),
    );
    Ok(())
}

/// One 8-bit PNG per frame; values are clamped to [0, 1].
pub fn write_png_frames(video: &VideoTensor, dir: &Path) -> CliResult<()> {
    let s = video.shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(usage(format!("PNG output needs 1 or 3 channels, clip has {c}"))),
    };
    fs::create_dir_all(dir)?;
    let d = video.data();
    for f in 0..t {
        let mut buf = vec![0u8; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = d[((f * c + ch) * h + y) * w + x];
                    buf[(y * w + x) * c + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        let file = BufWriter::new(File::create(dir.join(format!("frame_{f:04}.png")))?);
        let mut enc = png::Encoder::new(file, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()?.write_image_data(&buf)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- merge

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeArg {
    Soup,
    Ties,
    DareLinear,
    DareTies,
    /// Evaluate the default recipe grid; writes `grid.jsonl` and the best merge.
    Grid,
}

#[derive(Debug, Args, Serialize)]
pub struct MergeArgs {
    #[arg(long, value_enum)]
    pub method: MergeArg,
    /// Fine-tuned checkpoint directories.
    #[arg(long, value_delimiter = ',', required = true)]
    pub inputs: Vec<PathBuf>,
    /// Shared pre-trained checkpoint; required except for soup.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Soup weights, or dare-linear per-model weights.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    pub drop_p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Score used by grid search: negative mean flow-matching loss on a fixed,
/// seeded batch of 16 px moving-shape items.
pub fn validation_scorer(config: &ModelConfig, seed: u64) -> CliResult<impl Fn(&ParamSet) -> worldflow_core::Result<f64> + Sync> {
    let mut tc = TrainConfig::desk(2);
    tc.stage_schedule = vec![Stage {
        tasks: vec![Task::Text2Image, Task::Video2World, Task::Text2World],
        resolution: 16,
        video_frames: 9,
        beta_shift: 1.0,
        steps: 2,
    }];
    tc.batch_size = 8;
    tc.text_dropout = 0.0;
    tc.seed = seed;
    let items = BatchBuilder::new(config, &tc)?.build(&mut MovingShapes, 0)?;
    let config = config.clone();
    Ok(move |params: &ParamSet| {
        let model = WorldModel::from_params(config.clone(), params.clone())?;
        let mut total = 0.0;
        for it in &items {
            total += item_loss_and_grads(&model, Freeze::None, it)?.0;
        }
        Ok(-total / items.len() as f64)
    })
}

fn merge_cmd(a: MergeArgs) -> CliResult<()> {
    fs::create_dir_all(&a.out)?;
    emit("config", &serde_json::json!({ "command": "merge", "config": &a }));
    let inputs: Vec<Checkpoint> = a.inputs.iter().map(|p| Checkpoint::load(p)).collect::<Result<_, _>>()?;
    let fts: Vec<&ParamSet> = inputs.iter().map(|c| &c.params).collect();
    let base = a.base.as_deref().map(Checkpoint::load).transpose()?;
    let template = base.as_ref().unwrap_or(&inputs[0]);
    let need_base = || base.as_ref().map(|b| &b.params).ok_or_else(|| usage("--base is required for this method"));
    let n = fts.len();

    let merged = match a.method {
        MergeArg::Soup => {
            let w = a.weights.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
            merge::soup(&fts, &w)?
        }
        MergeArg::Ties => merge::ties(need_base()?, &fts, a.density, a.lambda)?,
        MergeArg::DareLinear => {
            let w = a.weights.clone().unwrap_or_else(|| vec![a.lambda / n as f64; n]);
            merge::dare_linear(need_base()?, &fts, a.drop_p, &w, a.seed)?
        }
        MergeArg::DareTies => merge::dare_ties(need_base()?, &fts, a.drop_p, a.density, a.lambda, a.seed)?,
        MergeArg::Grid => {
            let b = need_base()?;
            let scorer = validation_scorer(&template.config, a.seed)?;
            let cands = grid_search(b, &fts, &default_grid(), &scorer, a.seed, thread_cap())?;
            let mut f = BufWriter::new(File::create(a.out.join("grid.jsonl"))?);
            for c in &cands {
                serde_json::to_writer(&mut f, c)?;
                f.write_all(b"\n")?;
                emit("candidate", c);
            }
            f.flush()?;
            let best: &MergeMethod = &cands[0].method;
            best.apply(b, &fts, a.seed)?
        }
    };
    let ck = Checkpoint {
        config: template.config.clone(),
        step: template.step,
        params: merged,
    };
    ck.save(&a.out)?;
    emit("done", &serde_json::json!({ "checkpoint": a.out }));
    Ok(())
}

// ---------------------------------------------------------------- rl

#[derive(Debug, Args)]
pub struct RlArgs {
    /// RL hyperparameters as JSON; library defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// `brightness`, `motion`, `checkerboard`, or a reward service URL.
    #[arg(long, default_value = "brightness")]
    pub reward: String,
    /// Reward types requested from a remote service.
    #[arg(long, value_delimiter = ',')]
    pub reward_types: Option<Vec<String>>,
    #[arg(long, default_value_t = 0.5)]
    pub brightness_target: f64,
    #[arg(long, value_delimiter = ',', default_value = "a bright frame")]
    pub prompts: Vec<String>,
    #[arg(long, default_value_t = 16)]
    pub resolution: usize,
    #[arg(long, default_value_t = 1)]
    pub frames: usize,
    #[arg(long)]
    pub updates: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn builtin_scorer(name: &str, brightness_target: f64) -> Option<Arc<dyn RewardScorer>> {
    match name {
        "brightness" => Some(Arc::new(BrightnessReward { target: brightness_target })),
        "motion" => Some(Arc::new(MotionSmoothnessReward)),
        "checkerboard" => Some(Arc::new(CheckerboardReward { cell: 2 })),
        _ => None,
    }
}

fn rl(a: RlArgs) -> CliResult<()> {
    let mut cfg: RLConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RLConfig {
            batch_conditions: 1,
            ..RLConfig::default()
        },
    };
    if let Some(v) = a.updates {
        cfg.updates = v;
    }
    if let Some(v) = a.group_size {
        cfg.group_size = v;
    }
    if let Some(v) = a.steps {
        cfg.num_steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let remote = a.reward.starts_with("http://") || a.reward.starts_with("https://");
    let client: Box<dyn RewardClient> = if remote {
        if let Some(t) = &a.reward_types {
            cfg.reward_types = t.clone();
        }
        Box::new(HttpRewardClient::new(&a.reward))
    } else {
        let scorer = builtin_scorer(&a.reward, a.brightness_target)
            .ok_or_else(|| usage(format!("unknown reward `{}`", a.reward)))?;
        cfg.reward_types = vec![a.reward.clone()];
        let k = thread_cap().clamp(1, 4);
        let svc_cfg = ServiceConfig {
            decode_workers: k,
            score_workers: k,
            ..ServiceConfig::default()
        };
        Box::new(RewardService::start(svc_cfg, Arc::new(TokenizerDecoder::default()), vec![scorer])?)
    };
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("rl_config.json"), &cfg)?;
    emit("config", &serde_json::json!({ "command": "rl", "reward": a.reward, "config": cfg }));

    let model = match &a.ckpt {
        Some(p) => load_model(p)?.0,
        None => WorldModel::new(ModelConfig::small(), cfg.seed)?,
    };
    let tok = CausalTokenizer::default();
    let channels = model.config.latent_channels / tok.latent_channels(1);
    let latent_shape = tok.latent_shape(&[a.frames, channels, a.resolution, a.resolution])?.to_vec();
    let enc = HashedTextEncoder::with_dim(model.config.text_dim);
    let conditions: Vec<RlCondition> = a
        .prompts
        .iter()
        .map(|p| RlCondition {
            prompt: p.clone(),
            text: enc.encode(p),
            cond: ConditioningSpec::text2world(latent_shape[0]),
            latent_shape: latent_shape.clone(),
        })
        .collect();
    let mut trainer = GrpoTrainer::new(model, cfg)?;
    let mut log = BufWriter::new(File::create(a.out.join("rl_log.jsonl"))?);
    let stats = trainer.run(&conditions, client.as_ref(), Some(&mut log))?;
    log.flush()?;
    Checkpoint::from_model(&trainer.policy, stats.len() as u64).save(&a.out.join("policy"))?;
    Checkpoint::from_model(&trainer.ema_model(), stats.len() as u64).save(&a.out.join("ema"))?;
    emit(
        "done",
        &serde_json::json!({
            "updates": stats.len(),
            "final_mean_reward": stats.last().map(|s| s.mean_reward),
        }),
    );
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rnds,
    Psnr,
    Ssim,
    Latentl2,
    Winrate,
    Fvd,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Generated raw tensors (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub gen: Vec<PathBuf>,
    /// Reference raw tensors, paired with `--gen`.
    #[arg(long = "ref", value_delimiter = ',')]
    pub reference: Vec<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub peak: f64,
    /// RNDS: split each clip into chunks of this many frames.
    #[arg(long)]
    pub chunk_frames: Option<usize>,
    /// Inputs are already latents (latentl2, fvd).
    #[arg(long)]
    pub latent: bool,
    /// JSON array of "A" / "B" / "tie" for winrate.
    #[arg(long)]
    pub votes: Option<PathBuf>,
    /// Directory for `result.json` (and `rnds.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_all(paths: &[PathBuf]) -> CliResult<Vec<Tensor>> {
    Ok(paths.iter().map(|p| Tensor::read_raw(p)).collect::<Result<_, _>>()?)
}

fn chunks(clips: Vec<Tensor>, frames: Option<usize>) -> CliResult<Vec<Tensor>> {
    let Some(k) = frames else { return Ok(clips) };
    if k == 0 {
        return Err(usage("--chunk-frames must be positive"));
    }
    let mut out = Vec::new();
    for c in clips {
        let t = c.len0();
        for s in (0..t).step_by(k) {
            out.push(c.narrow0(s, (s + k).min(t))?);
        }
    }
    Ok(out)
}

fn paired(a: &EvalArgs) -> CliResult<(Vec<Tensor>, Vec<Tensor>)> {
    if a.gen.is_empty() || a.gen.len() != a.reference.len() {
        return Err(usage("--gen and --ref need the same non-zero number of files"));
    }
    Ok((load_all(&a.gen)?, load_all(&a.reference)?))
}

fn to_latents(clips: Vec<Tensor>, already: bool) -> CliResult<Vec<Tensor>> {
    if already {
        return Ok(clips);
    }
    let tok = CausalTokenizer::default();
    Ok(clips.iter().map(|c| tok.encode(c)).collect::<Result<_, _>>()?)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let result = match a.metric {
        Metric::Rnds => {
            if a.gen.is_empty() || a.reference.is_empty() {
                return Err(usage("rnds needs --gen and --ref"));
            }
            let gen = chunks(load_all(&a.gen)?, a.chunk_frames)?;
            let gt = chunks(load_all(&a.reference)?, a.chunk_frames)?;
            let curve = evalkit::rnds_from_chunks(&LocalContrastScorer::default(), &gen, &gt)?;
            if let Some(out) = &a.out {
                fs::create_dir_all(out)?;
                fs::write(out.join("rnds.csv"), curve.to_csv())?;
            }
            serde_json::json!({ "metric": "rnds", "values": curve.values, "scorer_id": curve.scorer_id })
        }
        Metric::Psnr | Metric::Ssim => {
            let (g, r) = paired(&a)?;
            let vals = g
                .iter()
                .zip(&r)
                .map(|(x, y)| if a.metric == Metric::Psnr { evalkit::psnr(x, y, a.peak) } else { evalkit::ssim(x, y, a.peak) })
                .collect::<Result<Vec<_>, _>>()?;
            serde_json::json!({ "metric": a.metric, "values": vals, "mean": mean(&vals) })
        }
        Metric::Latentl2 => {
            let (g, r) = paired(&a)?;
            let (g, r) = (to_latents(g, a.latent)?, to_latents(r, a.latent)?);
            let vals = g.iter().zip(&r).map(|(x, y)| evalkit::latent_l2(x, y)).collect::<Result<Vec<_>, _>>()?;
            serde_json::json!({ "metric": "latentl2", "values": vals, "mean": mean(&vals) })
        }
        Metric::Fvd => {
            let (g, r) = paired(&a)?;
            let v = evalkit::fvd_proxy(&to_latents(g, a.latent)?, &to_latents(r, a.latent)?)?;
            serde_json::json!({ "metric": "fvd", "value": v })
        }
        Metric::Winrate => {
            let path = a.votes.as_ref().ok_or_else(|| usage("winrate needs --votes"))?;
            let votes: Vec<Vote> = read_json(path)?;
            serde_json::json!({ "metric": "winrate", "value": evalkit::win_rate(&votes)? })
        }
    };
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("result.json"), &result)?;
    }
    emit("result", &result);
    Ok(())
}

// ---------------------------------------------------------------- curate

#[derive(Debug, Args, Serialize)]
pub struct CurateArgs {
    /// Line-delimited JSON clip records.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    pub dedup_threshold: f64,
    #[arg(long, default_value_t = 16)]
    pub buckets: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drop clips whose mean absolute frame difference is below this.
    #[arg(long)]
    pub min_motion: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn curate_cmd(a: CurateArgs) -> CliResult<()> {
    emit("config", &serde_json::json!({ "command": "curate", "config": &a }));
    let mut records = Vec::new();
    for (i, line) in BufReader::new(File::open(&a.input)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord =
            serde_json::from_str(&line).map_err(|e| usage(format!("{}:{}: {e}", a.input.display(), i + 1)))?;
        records.push(rec);
    }
    let root = a.input.parent().map(Path::to_path_buf).unwrap_or_default();
    let load = |rec: &ClipRecord| -> worldflow_core::Result<Option<VideoTensor>> {
        match &rec.path {
            Some(p) => Tensor::read_raw(&root.join(p)).map(Some),
            None => Ok(None),
        }
    };
    let motion = a.min_motion.map(|m| MotionMagnitudeFilter { min_motion: m });
    let filters: Vec<&dyn ClipFilter> = motion.iter().map(|f| f as &dyn ClipFilter).collect();
    let dedup = DedupConfig {
        threshold: a.dedup_threshold,
        num_buckets: a.buckets,
        seed: a.seed,
    };
    let (kept, report) = curate(records, &load, &filters, dedup, &ShardConfig::default())?;

    fs::create_dir_all(&a.out)?;
    let mut shards: std::collections::BTreeMap<String, Vec<&ClipRecord>> = Default::default();
    for r in &kept {
        shards.entry(r.shard_key.clone().unwrap_or_default()).or_default().push(r);
    }
    for (key, recs) in &shards {
        let dir = a.out.join(key);
        fs::create_dir_all(&dir)?;
        let mut f = BufWriter::new(File::create(dir.join("manifest.jsonl"))?);
        for r in recs {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    write_json(&a.out.join("report.json"), &report)?;
    emit("done", &serde_json::json!({ "report": report, "shards": shards.len() }));
    Ok(())
}

// ---------------------------------------------------------------- serve-rewards

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Workers per stage, capped by WORLDFLOW_THREADS.
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    #[arg(long, default_value_t = 4)]
    pub channel_capacity: usize,
    /// Append finished task records to this JSONL file; reloaded on start.
    #[arg(long)]
    pub persist: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub brightness_target: f64,
}

fn serve(a: ServeArgs) -> CliResult<()> {
    let k = a.workers.clamp(1, thread_cap());
    let cfg = ServiceConfig {
        decode_workers: k,
        score_workers: k,
        channel_capacity: a.channel_capacity.max(1),
        persist: a.persist.clone(),
    };
    let scorers = ["brightness", "motion", "checkerboard"]
        .iter()
        .filter_map(|n| builtin_scorer(n, a.brightness_target))
        .collect();
    let svc = Arc::new(RewardService::start(cfg, Arc::new(TokenizerDecoder::default()), scorers)?);
    emit("config", &serde_json::json!({ "command": "serve-rewards", "config": &a, "workers": k }));

    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(k)
        .enable_all()
        .build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        emit("listening", &serde_json::json!({ "addr": listener.local_addr()?.to_string() }));
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        crate::http::serve(listener, svc.clone(), shutdown).await
    })?;
    drop(rt);
    if let Ok(svc) = Arc::try_unwrap(svc) {
        svc.shutdown();
    }
    emit("stopped", &serde_json::json!({}));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        for argv in [
            vec!["worldflow", "train", "--out", "o"],
            vec!["worldflow", "sample", "--mode", "i2w", "--init", "x.f32", "--out", "o"],
            vec!["worldflow", "merge", "--method", "dare-ties", "--inputs", "a,b", "--base", "c", "--out", "o"],
            vec!["worldflow", "rl", "--reward", "motion", "--out", "o"],
            vec!["worldflow", "eval", "--metric", "psnr", "--gen", "a", "--ref", "b"],
            vec!["worldflow", "curate", "--in", "m.jsonl", "--out", "o"],
            vec!["worldflow", "serve-rewards", "--port", "0", "--workers", "2"],
        ] {
            Cli::try_parse_from(&argv).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
        }
        assert!(Cli::try_parse_from(["worldflow", "train", "--bogus"]).is_err());
    }
}
