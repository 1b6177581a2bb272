//! Synthetic moving-shape clips, clip embeddings, online semantic
//! deduplication and multi-axis sharding.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, VideoTensor};
use crate::trainer::{DataSource, Sample};

pub const EMBED_DIM: usize = 64;
pub const MIN_DURATION_S: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Circle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyClipSpec {
    pub kind: ShapeKind,
    /// Square side or circle diameter, in pixels.
    pub size: usize,
    /// Pixels per frame along (x, y).
    pub velocity: (i64, i64),
    pub color: [f64; 3],
    pub background: [f64; 3],
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Top-left corner (square) or bounding-box corner (circle) at frame 0;
    /// drawn from the seed when absent.
    pub start: Option<(usize, usize)>,
    pub fps: f64,
    pub content_type: String,
}

impl ToyClipSpec {
    pub fn new(kind: ShapeKind, size: usize, velocity: (i64, i64), frames: usize, height: usize, width: usize) -> Self {
        Self {
            kind,
            size,
            velocity,
            color: [1.0, 0.0, 0.0],
            background: [0.0; 3],
            frames,
            height,
            width,
            start: None,
            fps: 1.0,
            content_type: "animation".into(),
        }
    }

    fn features(&self) -> Vec<f64> {
        let (w, h) = (self.width.max(1) as f64, self.height.max(1) as f64);
        let mut f = vec![
            (self.kind == ShapeKind::Square) as u8 as f64,
            (self.kind == ShapeKind::Circle) as u8 as f64,
            self.size as f64 / w,
            self.velocity.0 as f64 / w * 8.0,
            self.velocity.1 as f64 / h * 8.0,
        ];
        f.extend(self.color);
        f.extend(self.background);
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub embedding: Vec<f64>,
    /// `(H, W)` in pixels.
    pub resolution: (u32, u32),
    pub created_at: u64,
    pub content_type: String,
    pub duration_s: f64,
    pub aspect_ratio: f64,
    #[serde(default)]
    pub shard_key: Option<String>,
    /// Raw clip tensor on disk, if any.
    #[serde(default)]
    pub path: Option<String>,
}

impl ClipRecord {
    pub fn pixels(&self) -> u64 {
        self.resolution.0 as u64 * self.resolution.1 as u64
    }

    /// Higher resolution wins; on equal resolution the older clip wins.
    pub fn preferred_over(&self, other: &ClipRecord) -> bool {
        self.pixels() > other.pixels() || (self.pixels() == other.pixels() && self.created_at < other.created_at)
    }

    pub fn check_unit_norm(&self) -> Result<()> {
        let n: f64 = self.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "clip `{}` embedding has norm {n}, expected 1",
                self.id
            )));
        }
        Ok(())
    }
}

fn hash_seed(tag: impl Hash) -> u64 {
    let mut h = DefaultHasher::new();
    tag.hash(&mut h);
    h.finish()
}

/// Fixed random projection of a feature vector onto the unit sphere in
/// [`EMBED_DIM`] dimensions. The projection depends only on the feature
/// length, so nearby features map to nearby embeddings.
pub fn embed_features(features: &[f64]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(("worldflow-embed", features.len())));
    let mut out = vec![0.0; EMBED_DIM];
    for &f in features {
        for o in out.iter_mut() {
            let w: f64 = rng.sample(StandardNormal);
            *o += w * f;
        }
    }
    let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        out[0] = 1.0;
    } else {
        out.iter_mut().for_each(|x| *x /= n);
    }
    out
}

/// Embedding of pixel content: time-averaged 4×4 pooled colour plus mean
/// absolute frame difference per channel.
pub fn embed_video(video: &VideoTensor) -> Result<Vec<f64>> {
    let [t, c, h, w] = crate::worldmodel::tokenizer::four(video.shape())?;
    let mut feats = vec![0.0; c * 16 + c];
    for f in 0..t {
        let frame = video.frame(f);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let cell = (y * 4 / h) * 4 + x * 4 / w;
                    feats[ch * 16 + cell] += frame[(ch * h + y) * w + x] / (t * h * w / 16).max(1) as f64;
                }
            }
        }
    }
    if t > 1 {
        for f in 1..t {
            let (a, b) = (video.frame(f - 1), video.frame(f));
            for ch in 0..c {
                let s: f64 = (0..h * w).map(|i| (b[ch * h * w + i] - a[ch * h * w + i]).abs()).sum();
                feats[c * 16 + ch] += s / ((t - 1) * h * w) as f64;
            }
        }
    }
    Ok(embed_features(&feats))
}

fn wrapped_dist(a: i64, b: i64, n: i64) -> i64 {
    let d = (a - b).rem_euclid(n);
    d.min(n - d)
}

/// Render a shape translating at constant velocity with wrap-around borders.
pub fn gen_toy_clip(spec: &ToyClipSpec, seed: u64) -> Result<(VideoTensor, ClipRecord)> {
    if spec.frames == 0 {
        return Err(Error::invalid("a clip needs at least one frame"));
    }
    if spec.height == 0 || spec.width == 0 || spec.size == 0 {
        return Err(Error::invalid("clip dimensions and shape size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x0, y0) = match spec.start {
        Some(p) => p,
        None => (rng.random_range(0..spec.width), rng.random_range(0..spec.height)),
    };
    let (h, w) = (spec.height as i64, spec.width as i64);
    let size = spec.size as i64;
    let plane = spec.height * spec.width;
    let mut data = Vec::with_capacity(spec.frames * 3 * plane);
    for f in 0..spec.frames as i64 {
        let x = (x0 as i64 + spec.velocity.0 * f).rem_euclid(w);
        let y = (y0 as i64 + spec.velocity.1 * f).rem_euclid(h);
        let inside = |px: i64, py: i64| match spec.kind {
            ShapeKind::Square => (px - x).rem_euclid(w) < size && (py - y).rem_euclid(h) < size,
            ShapeKind::Circle => {
                // centre sits at the middle of the size×size box anchored at (x, y)
                let r = size as f64 / 2.0;
                let cx2 = 2 * x + size - 1;
                let cy2 = 2 * y + size - 1;
                let dx = wrapped_dist(2 * px, cx2, 2 * w) as f64 / 2.0;
                let dy = wrapped_dist(2 * py, cy2, 2 * h) as f64 / 2.0;
                dx * dx + dy * dy <= r * r
            }
        };
        for ch in 0..3 {
            for py in 0..h {
                for px in 0..w {
                    data.push(if inside(px, py) { spec.color[ch] } else { spec.background[ch] });
                }
            }
        }
    }
    let video = Tensor::new(vec![spec.frames, 3, spec.height, spec.width], data)?;
    let record = ClipRecord {
        id: format!("toy-{seed:016x}"),
        embedding: embed_features(&spec.features()),
        resolution: (spec.height as u32, spec.width as u32),
        created_at: seed,
        content_type: spec.content_type.clone(),
        duration_s: spec.frames as f64 / spec.fps,
        aspect_ratio: spec.width as f64 / spec.height as f64,
        shard_key: None,
        path: None,
    };
    Ok((video, record))
}

const PALETTE: [(&str, [f64; 3]); 5] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
];
const DIRECTIONS: [(&str, (i64, i64)); 5] = [
    ("right", (1, 0)),
    ("left", (-1, 0)),
    ("down", (0, 1)),
    ("up", (0, -1)),
    ("still", (0, 0)),
];

/// Captioned moving-shape clips for training.
#[derive(Clone, Debug, Default)]
pub struct MovingShapes;

impl MovingShapes {
    /// Caption and spec for explicit choices; speed scales with resolution
    /// (one pixel per frame at 16 px).
    pub fn spec(kind: ShapeKind, color: usize, direction: usize, resolution: usize, frames: usize) -> (ToyClipSpec, String) {
        let (cname, rgb) = PALETTE[color % PALETTE.len()];
        let (dname, (vx, vy)) = DIRECTIONS[direction % DIRECTIONS.len()];
        let speed = (resolution / 16).max(1) as i64;
        let mut spec = ToyClipSpec::new(kind, (resolution / 4).max(1), (vx * speed, vy * speed), frames, resolution, resolution);
        spec.color = rgb;
        let shape = match kind {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
        };
        let caption = if dname == "still" {
            format!("{cname} {shape} standing still")
        } else {
            format!("{cname} {shape} moving {dname}")
        };
        (spec, caption)
    }

    /// Parse captions of the form `"<color> <shape> moving <direction>"`.
    pub fn spec_from_prompt(prompt: &str, resolution: usize, frames: usize) -> Option<(ToyClipSpec, String)> {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        let color = PALETTE.iter().position(|(n, _)| words.contains(n))?;
        let kind = if words.contains(&"circle") { ShapeKind::Circle } else { ShapeKind::Square };
        let dir = DIRECTIONS.iter().position(|(n, _)| words.contains(n)).unwrap_or(4);
        Some(Self::spec(kind, color, dir, resolution, frames))
    }
}

impl DataSource for MovingShapes {
    fn sample(&mut self, resolution: usize, frames: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let kind = if rng.random_bool(0.5) { ShapeKind::Square } else { ShapeKind::Circle };
        let (spec, caption) = Self::spec(
            kind,
            rng.random_range(0..PALETTE.len()),
            rng.random_range(0..DIRECTIONS.len()),
            resolution,
            frames,
        );
        let (video, _) = gen_toy_clip(&spec, rng.random())?;
        Ok(Sample { video, caption })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DedupConfig {
    /// Cosine similarity at or above which two clips are duplicates.
    pub threshold: f64,
    pub num_buckets: usize,
    pub seed: u64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            threshold: 0.95,
            num_buckets: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DedupOutcome {
    /// Retained, evicting the listed ids.
    Kept { evicted: Vec<String> },
    /// Rejected in favour of an already retained clip.
    Dropped { by: String },
}

#[derive(Clone, Debug, Default)]
struct Bucket {
    members: Vec<usize>,
    /// Largest angle from the centroid of any clip ever assigned here.
    radius: f64,
}

/// Streaming deduplicator. Clips are bucketed by nearest random centroid; a
/// query visits every bucket the angular triangle inequality cannot rule
/// out, so the retained set is the same as a global all-pairs scan.
#[derive(Clone, Debug)]
pub struct OnlineDedup {
    cfg: DedupConfig,
    centroids: Vec<Vec<f64>>,
    buckets: Vec<Bucket>,
    slots: Vec<Option<(ClipRecord, usize)>>,
    comparisons: u64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn angle(cos: f64) -> f64 {
    cos.clamp(-1.0, 1.0).acos()
}

impl OnlineDedup {
    pub fn new(cfg: DedupConfig) -> Result<Self> {
        if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
            return Err(Error::invalid("dedup threshold must lie in (0, 1)"));
        }
        if cfg.num_buckets == 0 {
            return Err(Error::invalid("need at least one bucket"));
        }
        Ok(Self {
            cfg,
            centroids: Vec::new(),
            buckets: Vec::new(),
            slots: Vec::new(),
            comparisons: 0,
        })
    }

    fn init_centroids(&mut self, dim: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        self.centroids = (0..self.cfg.num_buckets)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = dot(&v, &v).sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        self.buckets = vec![Bucket::default(); self.cfg.num_buckets];
    }

    /// Pairwise similarity evaluations so far.
    pub fn comparisons(&self) -> u64 {
        self.comparisons
    }

    pub fn push(&mut self, rec: ClipRecord) -> Result<DedupOutcome> {
        rec.check_unit_norm()?;
        if self.centroids.is_empty() {
            self.init_centroids(rec.embedding.len());
        } else if rec.embedding.len() != self.centroids[0].len() {
            return Err(Error::shape(format!(
                "clip `{}` has a {}-dim embedding, stream uses {}",
                rec.id,
                rec.embedding.len(),
                self.centroids[0].len()
            )));
        }
        let cos_to: Vec<f64> = self.centroids.iter().map(|c| dot(c, &rec.embedding)).collect();
        let home = cos_to
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("at least one bucket");
        let limit = angle(self.cfg.threshold);

        let mut dups = Vec::new();
        for (b, bucket) in self.buckets.iter().enumerate() {
            if bucket.members.is_empty() || angle(cos_to[b]) - bucket.radius > limit + 1e-9 {
                continue;
            }
            for &slot in &bucket.members {
                let (other, _) = self.slots[slot].as_ref().expect("members are live");
                self.comparisons += 1;
                if dot(&other.embedding, &rec.embedding) >= self.cfg.threshold {
                    dups.push(slot);
                }
            }
        }
        dups.sort_unstable();

        if let Some(&winner) = dups.iter().find(|&&s| !rec.preferred_over(&self.slots[s].as_ref().expect("live").0)) {
            let by = self.slots[winner].as_ref().expect("live").0.id.clone();
            return Ok(DedupOutcome::Dropped { by });
        }
        let mut evicted = Vec::with_capacity(dups.len());
        for s in dups {
            let (old, b) = self.slots[s].take().expect("live");
            self.buckets[b].members.retain(|&m| m != s);
            evicted.push(old.id);
        }
        let radius = angle(cos_to[home]);
        let bucket = &mut self.buckets[home];
        bucket.radius = bucket.radius.max(radius);
        bucket.members.push(self.slots.len());
        self.slots.push(Some((rec, home)));
        Ok(DedupOutcome::Kept { evicted })
    }

    /// Retained clips in arrival order.
    pub fn kept(&self) -> Vec<&ClipRecord> {
        self.slots.iter().flatten().map(|(r, _)| r).collect()
    }

    pub fn into_kept(self) -> Vec<ClipRecord> {
        self.slots.into_iter().flatten().map(|(r, _)| r).collect()
    }
}

pub fn online_dedup(stream: impl IntoIterator<Item = ClipRecord>, cfg: DedupConfig) -> Result<Vec<ClipRecord>> {
    let mut d = OnlineDedup::new(cfg)?;
    for r in stream {
        d.push(r)?;
    }
    Ok(d.into_kept())
}

pub fn default_taxonomy() -> Vec<String> {
    [
        "nature", "wildlife", "urban", "driving", "aerial", "indoor", "sports", "cooking",
        "robotics", "manufacturing", "agriculture", "construction", "human-activity", "hand-manipulation",
        "traffic", "underwater", "weather", "space", "animation", "gaming", "medical", "retail",
        "warehouse", "household", "vehicles-offroad", "surveillance",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardConfig {
    pub taxonomy: Vec<String>,
    /// Short-side pixel edges.
    pub resolution_edges: Vec<f64>,
    /// Width / height edges.
    pub aspect_edges: Vec<f64>,
    /// Duration edges in seconds.
    pub length_edges: Vec<f64>,
}

impl Default for ShardConfig {
    fn default() -> Self {
        Self {
            taxonomy: default_taxonomy(),
            resolution_edges: vec![480.0, 720.0, 1080.0],
            aspect_edges: vec![1.0, 1.5, 2.0],
            length_edges: vec![10.0, 30.0, 60.0],
        }
    }
}

fn fmt_edge(x: f64) -> String {
    format!("{x}")
}

/// Half-open bucket `[lo, hi)` containing `value`, named `lo-hi`.
fn bucket_label(value: f64, edges: &[f64]) -> String {
    let i = edges.iter().take_while(|&&e| value >= e).count();
    let lo = if i == 0 { "0".to_string() } else { fmt_edge(edges[i - 1]) };
    let hi = if i == edges.len() { "inf".to_string() } else { fmt_edge(edges[i]) };
    format!("{lo}-{hi}")
}

fn all_labels(edges: &[f64]) -> Vec<String> {
    let mut probes = vec![edges.first().map_or(0.0, |e| e - 1.0)];
    probes.extend(edges.iter().copied());
    probes.into_iter().map(|v| bucket_label(v, edges)).collect()
}

/// `content_type/resolution/aspect/length` key.
pub fn shard_assign(rec: &ClipRecord, cfg: &ShardConfig) -> Result<String> {
    if !cfg.taxonomy.iter().any(|t| *t == rec.content_type) {
        return Err(Error::invalid(format!(
            "clip `{}` has unknown content type `{}`",
            rec.id, rec.content_type
        )));
    }
    let short = rec.resolution.0.min(rec.resolution.1) as f64;
    Ok(format!(
        "{}/{}/{}/{}",
        rec.content_type,
        bucket_label(short, &cfg.resolution_edges),
        bucket_label(rec.aspect_ratio, &cfg.aspect_edges),
        bucket_label(rec.duration_s, &cfg.length_edges)
    ))
}

/// Every key the configuration can produce.
pub fn shard_key_space(cfg: &ShardConfig) -> Vec<String> {
    let mut out = Vec::new();
    for t in &cfg.taxonomy {
        for r in all_labels(&cfg.resolution_edges) {
            for a in all_labels(&cfg.aspect_edges) {
                for l in all_labels(&cfg.length_edges) {
                    out.push(format!("{t}/{r}/{a}/{l}"));
                }
            }
        }
    }
    out
}

/// Plug-in clip filter.
pub trait ClipFilter {
    fn name(&self) -> &str;
    fn keep(&self, clip: &VideoTensor, record: &ClipRecord) -> Result<bool>;
}

/// Mean absolute difference between consecutive frames.
pub fn motion_magnitude(clip: &VideoTensor) -> f64 {
    let t = clip.len0();
    if t < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for f in 1..t {
        s += clip
            .frame(f)
            .iter()
            .zip(clip.frame(f - 1))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    s / ((t - 1) * clip.stride0()) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionMagnitudeFilter {
    pub min_motion: f64,
}

impl ClipFilter for MotionMagnitudeFilter {
    fn name(&self) -> &str {
        "motion-magnitude"
    }

    fn keep(&self, clip: &VideoTensor, _record: &ClipRecord) -> Result<bool> {
        Ok(motion_magnitude(clip) >= self.min_motion)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurateReport {
    pub input: usize,
    pub too_short: usize,
    pub filtered: usize,
    pub duplicates: usize,
    pub kept: usize,
}

/// Duration gate, optional filters on loaded clips, dedup, then sharding.
pub fn curate(
    records: Vec<ClipRecord>,
    clips: &dyn Fn(&ClipRecord) -> Result<Option<VideoTensor>>,
    filters: &[&dyn ClipFilter],
    dedup: DedupConfig,
    shards: &ShardConfig,
) -> Result<(Vec<ClipRecord>, CurateReport)> {
    let mut report = CurateReport {
        input: records.len(),
        ..Default::default()
    };
    let mut passing = Vec::new();
    for rec in records {
        if rec.duration_s < MIN_DURATION_S {
            report.too_short += 1;
            continue;
        }
        if !filters.is_empty() {
            if let Some(clip) = clips(&rec)? {
                let mut keep = true;
                for f in filters {
                    keep &= f.keep(&clip, &rec)?;
                }
                if !keep {
                    report.filtered += 1;
                    continue;
                }
            }
        }
        passing.push(rec);
    }
    let before = passing.len();
    let mut kept = online_dedup(passing, dedup)?;
    report.duplicates = before - kept.len();
    for r in &mut kept {
        r.shard_key = Some(shard_assign(r, shards)?);
    }
    report.kept = kept.len();
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn still_clip_frames_identical() {
        let spec = ToyClipSpec::new(ShapeKind::Circle, 5, (0, 0), 4, 16, 16);
        let (v, _) = gen_toy_clip(&spec, 3).unwrap();
        for f in 1..4 {
            assert_eq!(v.frame(f), v.frame(0));
        }
        assert!(gen_toy_clip(&ToyClipSpec::new(ShapeKind::Square, 2, (0, 0), 0, 4, 4), 0).is_err());
    }

    #[test]
    fn bucket_labels() {
        let e = [10.0, 30.0, 60.0];
        assert_eq!(bucket_label(5.0, &e), "0-10");
        assert_eq!(bucket_label(10.0, &e), "10-30");
        assert_eq!(bucket_label(75.0, &e), "60-inf");
        assert_eq!(all_labels(&e).len(), 4);
    }

    #[test]
    fn prompt_parsing() {
        let (spec, caption) = MovingShapes::spec_from_prompt("red square moving right", 32, 9).unwrap();
        assert_eq!(caption, "red square moving right");
        assert_eq!(spec.velocity, (2, 0));
        assert!(MovingShapes::spec_from_prompt("nothing here", 32, 9).is_none());
    }
}
