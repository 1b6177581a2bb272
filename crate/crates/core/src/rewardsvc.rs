//! Asynchronous reward evaluation. Enqueued tasks get a UUID at once; a
//! decode pool and a scoring pool, joined by a bounded channel, process
//! items in a pipeline, and results land in a shared store that callers poll.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Tensor, VideoTensor};
use crate::worldmodel::tokenizer::CausalTokenizer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub text_alignment: f64,
    pub motion_quality: f64,
    pub visual_quality: f64,
    pub sum: f64,
}

impl RewardBreakdown {
    pub fn new(text_alignment: f64, motion_quality: f64, visual_quality: f64) -> Self {
        Self {
            text_alignment,
            motion_quality,
            visual_quality,
            sum: text_alignment + motion_quality + visual_quality,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    TextAlignment,
    MotionQuality,
    VisualQuality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Running,
    Done,
    Error,
}

impl TaskStatus {
    pub fn is_final(self) -> bool {
        matches!(self, TaskStatus::Done | TaskStatus::Error)
    }
}

/// One unit of work in a task payload.
#[derive(Clone, Debug)]
pub enum Item {
    Video(VideoTensor),
    /// Decoded with the causal tokenizer.
    Latent(LatentTensor),
    /// Raw `f32` tensor with a shape sidecar.
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub uuid: Uuid,
    pub status: TaskStatus,
    pub reward_types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<Vec<RewardBreakdown>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A reward function over decoded pixels, contributing to one axis.
pub trait RewardScorer: Send + Sync {
    fn name(&self) -> &str;
    fn axis(&self) -> Axis;
    fn score(&self, video: &VideoTensor) -> Result<f64>;
}

/// Turns a payload item into pixels.
pub trait Decoder: Send + Sync {
    fn decode(&self, item: &Item) -> Result<VideoTensor>;
}

/// Pass-through for videos, tokenizer decode for latents, disk load for paths.
#[derive(Clone, Copy, Debug, Default)]
pub struct TokenizerDecoder {
    pub tokenizer: CausalTokenizer,
}

impl Decoder for TokenizerDecoder {
    fn decode(&self, item: &Item) -> Result<VideoTensor> {
        match item {
            Item::Video(v) => Ok(v.clone()),
            Item::Latent(l) => self.tokenizer.decode(l),
            Item::Path(p) => Tensor::read_raw(p),
        }
    }
}

/// `−|mean pixel value − target|`.
#[derive(Clone, Copy, Debug)]
pub struct BrightnessReward {
    pub target: f64,
}

impl RewardScorer for BrightnessReward {
    fn name(&self) -> &str {
        "brightness"
    }
    fn axis(&self) -> Axis {
        Axis::VisualQuality
    }
    fn score(&self, video: &VideoTensor) -> Result<f64> {
        Ok(-(video.mean() - self.target).abs())
    }
}

/// Negative mean absolute second temporal difference; 0 for constant-velocity
/// or static content, range `(−∞, 0]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct MotionSmoothnessReward;

impl RewardScorer for MotionSmoothnessReward {
    fn name(&self) -> &str {
        "motion"
    }
    fn axis(&self) -> Axis {
        Axis::MotionQuality
    }
    fn score(&self, video: &VideoTensor) -> Result<f64> {
        let t = video.len0();
        if t < 3 {
            return Ok(0.0);
        }
        let mut s = 0.0;
        for f in 2..t {
            let (a, b, c) = (video.frame(f - 2), video.frame(f - 1), video.frame(f));
            s += (0..a.len()).map(|i| (c[i] - 2.0 * b[i] + a[i]).abs()).sum::<f64>();
        }
        Ok(-s / ((t - 2) * video.stride0()) as f64)
    }
}

/// Negative mean squared distance to a checkerboard of `cell`-pixel squares
/// with values 0 and 1; range `[−1, 0]` for pixels in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct CheckerboardReward {
    pub cell: usize,
}

impl RewardScorer for CheckerboardReward {
    fn name(&self) -> &str {
        "checkerboard"
    }
    fn axis(&self) -> Axis {
        Axis::TextAlignment
    }
    fn score(&self, video: &VideoTensor) -> Result<f64> {
        let [_, _, h, w] = crate::worldmodel::tokenizer::four(video.shape())?;
        let cell = self.cell.max(1);
        let plane = h * w;
        let s: f64 = video
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (y, x) = ((i % plane) / w, i % w);
                let target = ((y / cell + x / cell) % 2) as f64;
                (v - target) * (v - target)
            })
            .sum();
        Ok(-s / video.numel().max(1) as f64)
    }
}

/// Enqueue/poll contract shared by the in-process service and remote clients.
pub trait RewardClient: Send + Sync {
    fn enqueue(&self, items: Vec<Item>, reward_types: &[String]) -> Result<Uuid>;
    fn poll(&self, uuid: Uuid) -> Result<TaskRecord>;

    /// Poll until the task is final or `timeout` elapses.
    fn wait(&self, uuid: Uuid, timeout: Duration) -> Result<TaskRecord> {
        let start = Instant::now();
        let mut pause = Duration::from_micros(200);
        loop {
            let rec = self.poll(uuid)?;
            if rec.status.is_final() {
                return Ok(rec);
            }
            if start.elapsed() > timeout {
                return Err(Error::Reward {
                    task: uuid,
                    reason: format!("timed out after {timeout:?} in state {:?}", rec.status),
                });
            }
            std::thread::sleep(pause);
            pause = (pause * 2).min(Duration::from_millis(20));
        }
    }

    /// Enqueue, wait, and return per-item breakdowns or the task's error.
    fn evaluate(&self, items: Vec<Item>, reward_types: &[String], timeout: Duration) -> Result<Vec<RewardBreakdown>> {
        let id = self.enqueue(items, reward_types)?;
        let rec = self.wait(id, timeout)?;
        match rec.status {
            TaskStatus::Done => rec.results.ok_or_else(|| Error::Reward {
                task: id,
                reason: "done without results".into(),
            }),
            _ => Err(Error::Reward {
                task: id,
                reason: rec.error.unwrap_or_else(|| "task failed".into()),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub decode_workers: usize,
    pub score_workers: usize,
    /// Capacity of the decode → score hand-off.
    pub channel_capacity: usize,
    /// Append final task records as JSON lines; reloaded on start.
    pub persist: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            decode_workers: 1,
            score_workers: 1,
            channel_capacity: 4,
            persist: None,
        }
    }
}

struct Entry {
    record: TaskRecord,
    slots: Vec<Option<RewardBreakdown>>,
    remaining: usize,
}

struct Job {
    task: Uuid,
    index: usize,
    item: Item,
}

struct Decoded {
    task: Uuid,
    index: usize,
    video: VideoTensor,
}

struct Shared {
    store: RwLock<HashMap<Uuid, Entry>>,
    scorers: HashMap<String, Arc<dyn RewardScorer>>,
    log: Option<Mutex<File>>,
}

impl Shared {
    fn is_live(&self, task: Uuid) -> bool {
        self.store
            .read()
            .get(&task)
            .is_some_and(|e| !e.record.status.is_final())
    }

    fn mark_running(&self, task: Uuid) {
        if let Some(e) = self.store.write().get_mut(&task) {
            if e.record.status == TaskStatus::Pending {
                e.record.status = TaskStatus::Running;
            }
        }
    }

    fn finish(&self, rec: &TaskRecord) {
        if let Some(log) = &self.log {
            if let Ok(line) = serde_json::to_string(rec) {
                let mut f = log.lock();
                let _ = writeln!(f, "{line}");
            }
        }
    }

    fn fail(&self, task: Uuid, reason: String) {
        let done = {
            let mut store = self.store.write();
            match store.get_mut(&task) {
                Some(e) if !e.record.status.is_final() => {
                    e.record.status = TaskStatus::Error;
                    e.record.error = Some(reason);
                    Some(e.record.clone())
                }
                _ => None,
            }
        };
        if let Some(rec) = done {
            self.finish(&rec);
        }
    }

    fn complete_item(&self, task: Uuid, index: usize, b: RewardBreakdown) {
        let done = {
            let mut store = self.store.write();
            match store.get_mut(&task) {
                Some(e) if !e.record.status.is_final() && e.slots[index].is_none() => {
                    e.slots[index] = Some(b);
                    e.remaining -= 1;
                    if e.remaining == 0 {
                        e.record.status = TaskStatus::Done;
                        e.record.results = Some(e.slots.iter().map(|s| s.expect("all filled")).collect());
                        Some(e.record.clone())
                    } else {
                        None
                    }
                }
                _ => None,
            }
        };
        if let Some(rec) = done {
            self.finish(&rec);
        }
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".into()
    }
}

pub struct RewardService {
    shared: Arc<Shared>,
    intake: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
}

impl RewardService {
    pub fn start(cfg: ServiceConfig, decoder: Arc<dyn Decoder>, scorers: Vec<Arc<dyn RewardScorer>>) -> Result<Self> {
        if scorers.is_empty() {
            return Err(Error::invalid("reward service needs at least one scorer"));
        }
        if cfg.decode_workers == 0 || cfg.score_workers == 0 {
            return Err(Error::invalid("worker pools must be non-empty"));
        }
        let mut store = HashMap::new();
        let log = match &cfg.persist {
            Some(path) => {
                if path.exists() {
                    for line in BufReader::new(File::open(path)?).lines() {
                        let line = line?;
                        if line.trim().is_empty() {
                            continue;
                        }
                        let record: TaskRecord = serde_json::from_str(&line)?;
                        let slots = record.results.clone().unwrap_or_default().into_iter().map(Some).collect();
                        store.insert(record.uuid, Entry { record, slots, remaining: 0 });
                    }
                }
                Some(Mutex::new(OpenOptions::new().create(true).append(true).open(path)?))
            }
            None => None,
        };
        let shared = Arc::new(Shared {
            store: RwLock::new(store),
            scorers: scorers.into_iter().map(|s| (s.name().to_string(), s)).collect(),
            log,
        });
        let (intake, jobs) = unbounded::<Job>();
        let (handoff, decoded) = bounded::<Decoded>(cfg.channel_capacity.max(1));
        let mut workers = Vec::new();
        for _ in 0..cfg.decode_workers {
            let (jobs, handoff, shared, decoder) = (jobs.clone(), handoff.clone(), shared.clone(), decoder.clone());
            workers.push(std::thread::spawn(move || decode_loop(jobs, handoff, shared, decoder)));
        }
        drop(handoff);
        for _ in 0..cfg.score_workers {
            let (decoded, shared) = (decoded.clone(), shared.clone());
            workers.push(std::thread::spawn(move || score_loop(decoded, shared)));
        }
        Ok(Self {
            shared,
            intake: Some(intake),
            workers,
        })
    }

    pub fn reward_types(&self) -> Vec<String> {
        let mut v: Vec<_> = self.shared.scorers.keys().cloned().collect();
        v.sort();
        v
    }

    /// Number of tasks not yet done or failed.
    pub fn in_flight(&self) -> usize {
        self.shared
            .store
            .read()
            .values()
            .filter(|e| !e.record.status.is_final())
            .count()
    }

    /// Stop accepting work, finish every accepted task, join the workers.
    pub fn shutdown(mut self) {
        self.drain();
    }

    fn drain(&mut self) {
        self.intake.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for RewardService {
    fn drop(&mut self) {
        self.drain();
    }
}

impl RewardClient for RewardService {
    fn enqueue(&self, items: Vec<Item>, reward_types: &[String]) -> Result<Uuid> {
        if reward_types.is_empty() {
            return Err(Error::invalid("no reward types requested"));
        }
        if items.is_empty() {
            return Err(Error::invalid("task has no items"));
        }
        for r in reward_types {
            if !self.shared.scorers.contains_key(r) {
                return Err(Error::invalid(format!("unknown reward type `{r}`")));
            }
        }
        let intake = self
            .intake
            .as_ref()
            .ok_or_else(|| Error::invalid("reward service is shutting down"))?;
        let mut types = reward_types.to_vec();
        types.sort();
        types.dedup();
        let uuid = Uuid::new_v4();
        let n = items.len();
        self.shared.store.write().insert(
            uuid,
            Entry {
                record: TaskRecord {
                    uuid,
                    status: TaskStatus::Pending,
                    reward_types: types,
                    results: None,
                    error: None,
                },
                slots: vec![None; n],
                remaining: n,
            },
        );
        for (index, item) in items.into_iter().enumerate() {
            intake
                .send(Job { task: uuid, index, item })
                .map_err(|_| Error::invalid("reward service is shutting down"))?;
        }
        Ok(uuid)
    }

    fn poll(&self, uuid: Uuid) -> Result<TaskRecord> {
        self.shared
            .store
            .read()
            .get(&uuid)
            .map(|e| e.record.clone())
            .ok_or_else(|| Error::NotFound(format!("task {uuid}")))
    }
}

fn decode_loop(jobs: Receiver<Job>, handoff: Sender<Decoded>, shared: Arc<Shared>, decoder: Arc<dyn Decoder>) {
    for job in jobs {
        if !shared.is_live(job.task) {
            continue;
        }
        shared.mark_running(job.task);
        match catch_unwind(AssertUnwindSafe(|| decoder.decode(&job.item))) {
            Ok(Ok(video)) => {
                let msg = Decoded {
                    task: job.task,
                    index: job.index,
                    video,
                };
                if handoff.send(msg).is_err() {
                    return;
                }
            }
            Ok(Err(e)) => shared.fail(job.task, format!("decode of item {}: {e}", job.index)),
            Err(p) => shared.fail(job.task, format!("decode of item {} panicked: {}", job.index, panic_message(p))),
        }
    }
}

fn score_loop(decoded: Receiver<Decoded>, shared: Arc<Shared>) {
    for d in decoded {
        let types = match shared.store.read().get(&d.task) {
            Some(e) if !e.record.status.is_final() => e.record.reward_types.clone(),
            _ => continue,
        };
        // every requested scorer runs concurrently on the same decoded clip
        let outcomes: Vec<(Axis, std::result::Result<Result<f64>, String>)> = std::thread::scope(|s| {
            let handles: Vec<_> = types
                .iter()
                .map(|name| {
                    let scorer = shared.scorers[name].clone();
                    let video = &d.video;
                    (scorer.axis(), s.spawn(move || catch_unwind(AssertUnwindSafe(|| scorer.score(video))).map_err(panic_message)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(axis, h)| (axis, h.join().unwrap_or_else(|p| Err(panic_message(p)))))
                .collect()
        });
        let mut axes = [0.0; 3];
        let mut failure = None;
        for ((axis, outcome), name) in outcomes.into_iter().zip(&types) {
            match outcome {
                Ok(Ok(v)) if v.is_finite() => {
                    axes[axis as usize] += v;
                }
                Ok(Ok(v)) => failure = Some(format!("scorer `{name}` returned {v}")),
                Ok(Err(e)) => failure = Some(format!("scorer `{name}`: {e}")),
                Err(p) => failure = Some(format!("scorer `{name}` panicked: {p}")),
            }
        }
        match failure {
            Some(reason) => shared.fail(d.task, format!("item {}: {reason}", d.index)),
            None => shared.complete_item(d.task, d.index, RewardBreakdown::new(axes[0], axes[1], axes[2])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn service() -> RewardService {
        RewardService::start(
            ServiceConfig::default(),
            Arc::new(TokenizerDecoder::default()),
            vec![Arc::new(BrightnessReward { target: 0.5 }), Arc::new(MotionSmoothnessReward)],
        )
        .unwrap()
    }

    #[test]
    fn enqueue_validation() {
        let svc = service();
        let clip = Item::Video(Tensor::full(&[1, 3, 8, 8], 0.25));
        assert!(svc.enqueue(vec![clip.clone()], &[]).is_err());
        assert!(svc.enqueue(vec![clip.clone()], &["nope".into()]).is_err());
        assert!(svc.enqueue(vec![], &["brightness".into()]).is_err());
        assert!(svc.poll(Uuid::new_v4()).is_err());
        let a = svc.enqueue(vec![clip.clone()], &["brightness".into()]).unwrap();
        let b = svc.enqueue(vec![clip], &["brightness".into()]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn batch_results_and_sum() {
        let svc = service();
        let items = (0..4).map(|i| Item::Video(Tensor::full(&[3, 3, 8, 8], 0.1 * i as f64))).collect();
        let types = ["brightness".to_string(), "motion".to_string()];
        let res = svc.evaluate(items, &types, Duration::from_secs(10)).unwrap();
        assert_eq!(res.len(), 4);
        for (i, r) in res.iter().enumerate() {
            assert!((r.visual_quality + (0.1 * i as f64 - 0.5).abs()).abs() < 1e-12);
            assert_eq!(r.sum, r.text_alignment + r.motion_quality + r.visual_quality);
        }
    }
}
