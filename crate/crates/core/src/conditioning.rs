//! Conditioning construction: generation modes, condition-frame masks,
//! frame replacement, action payloads, camera raymaps and chunked rollout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::{euler_sample, SamplerConfig, VelocityModel};
use crate::tensor::{LatentTensor, Tensor, VideoTensor};
use crate::worldmodel::text::TextEmbedding;
use crate::worldmodel::tokenizer::{latent_frames_covering, CausalTokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GenerationMode {
    Text2World,
    Image2World,
    Video2World,
}

impl GenerationMode {
    /// Mode implied by a pixel condition-frame count.
    pub fn from_cond_frames(n: usize) -> Self {
        match n {
            0 => GenerationMode::Text2World,
            1 => GenerationMode::Image2World,
            _ => GenerationMode::Video2World,
        }
    }
}

/// Which condition-frame distribution a training stage draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskStage {
    /// Joint image/video stages: 1 or 5 condition frames, uniformly.
    Joint,
    /// Final stage: 0, 1 or 2 condition frames with p = (0.5, 0.25, 0.25).
    Final,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSpec {
    pub mode: GenerationMode,
    /// Pixel-frame count of the conditioning prefix.
    pub num_cond_frames: usize,
    /// Clean latent frames for every masked position (prefix of the clip).
    pub cond_latents: Option<LatentTensor>,
    /// One flag per latent frame; `true` marks a conditioning frame.
    pub mask: Vec<bool>,
    pub actions: Option<Vec<ActionVector>>,
    /// Plücker raymaps per latent frame, `[T_l, 6, h, w]`.
    pub camera: Option<Tensor>,
    /// Control-modality latent aligned with the generated latent.
    pub control: Option<LatentTensor>,
}

impl ConditioningSpec {
    /// Build a spec for `num_cond_frames` pixel frames over `latent_frames`
    /// latent frames. Condition latents are attached separately.
    pub fn new(num_cond_frames: usize, latent_frames: usize) -> Result<Self> {
        Ok(Self {
            mode: GenerationMode::from_cond_frames(num_cond_frames),
            num_cond_frames,
            cond_latents: None,
            mask: cond_mask(num_cond_frames, latent_frames)?,
            actions: None,
            camera: None,
            control: None,
        })
    }

    pub fn text2world(latent_frames: usize) -> Self {
        Self::new(0, latent_frames).expect("zero condition frames always fit")
    }

    /// Attach condition latents taken from the prefix of a clean latent clip.
    pub fn with_clean_latent(mut self, clean: &LatentTensor) -> Result<Self> {
        let k = self.num_masked();
        if k > clean.len0() {
            return Err(Error::shape(format!(
                "{k} condition latent frames requested from a {}-frame latent",
                clean.len0()
            )));
        }
        self.cond_latents = if k == 0 { None } else { Some(clean.narrow0(0, k)?) };
        Ok(self)
    }

    pub fn num_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mask as 0/1 reals, one per latent frame.
    pub fn mask_values(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// Loss mask: denoising loss only on non-conditioning frames.
    pub fn loss_mask(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect()
    }
}

/// Latent-frame mask covering the first `num_cond_frames` pixel frames under
/// the causal tokenizer grouping (pixel 0 → latent 0, pixels 1-4 → latent 1, …).
pub fn cond_mask(num_cond_frames: usize, latent_frames: usize) -> Result<Vec<bool>> {
    let covered = latent_frames_covering(num_cond_frames);
    if covered > latent_frames {
        return Err(Error::invalid(format!(
            "{num_cond_frames} condition frames need {covered} latent frames, clip has {latent_frames}"
        )));
    }
    Ok((0..latent_frames).map(|i| i < covered).collect())
}

/// Draw a condition-frame count for a training stage.
pub fn sample_cond_frames(stage: MaskStage, rng: &mut impl Rng) -> usize {
    match stage {
        MaskStage::Joint => {
            if rng.random_bool(0.5) {
                1
            } else {
                5
            }
        }
        MaskStage::Final => {
            let u: f64 = rng.random();
            if u < 0.5 {
                0
            } else if u < 0.75 {
                1
            } else {
                2
            }
        }
    }
}

pub fn sample_condition_mask(
    stage: MaskStage,
    latent_frames: usize,
    rng: &mut impl Rng,
) -> Result<ConditioningSpec> {
    ConditioningSpec::new(sample_cond_frames(stage, rng), latent_frames)
}

/// Overwrite masked latent frames with the condition latents, bit-exactly.
pub fn apply_frame_replacement(
    generated: &LatentTensor,
    spec: &ConditioningSpec,
) -> Result<LatentTensor> {
    let mut out = generated.clone();
    replace_in_place(&mut out, spec)?;
    Ok(out)
}

pub(crate) fn replace_in_place(x: &mut LatentTensor, spec: &ConditioningSpec) -> Result<()> {
    if spec.mask.len() > x.len0() {
        return Err(Error::shape(format!(
            "mask of {} frames exceeds latent of {}",
            spec.mask.len(),
            x.len0()
        )));
    }
    let k = spec.num_masked();
    if k == 0 {
        return Ok(());
    }
    let cond = spec
        .cond_latents
        .as_ref()
        .ok_or_else(|| Error::invalid("mask selects frames but no condition latents given"))?;
    if cond.shape()[1..] != x.shape()[1..] {
        return Err(Error::shape(format!(
            "condition latents {:?} incompatible with {:?}",
            cond.shape(),
            x.shape()
        )));
    }
    for (i, &m) in spec.mask.iter().enumerate() {
        if m {
            if i >= cond.len0() {
                return Err(Error::shape(format!("no condition latent for frame {i}")));
            }
            x.frame_mut(i).copy_from_slice(cond.frame(i));
        }
    }
    Ok(())
}

/// Relative gripper-frame displacement `(dx, dy, dz, droll, dpitch, dyaw)` plus gripper width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionVector(pub [f64; 7]);

impl ActionVector {
    pub const DIM: usize = 7;

    pub fn new(values: [f64; 7]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("action entries must be finite"));
        }
        Ok(Self(values))
    }
}

/// Parse a JSON array of 7-element arrays.
pub fn parse_actions(json: &str) -> Result<Vec<ActionVector>> {
    let raw: Vec<[f64; 7]> = serde_json::from_str(json)?;
    raw.into_iter().map(ActionVector::new).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionVariant {
    /// Action MLP output added to the AdaLN timestep embedding.
    TimeEmbedding,
    /// Action tokens attended to from every block.
    CrossAttention,
    /// Action features broadcast spatially and appended to latent channels.
    ChannelConcat,
}

impl ActionVariant {
    pub const ALL: [ActionVariant; 3] = [
        ActionVariant::TimeEmbedding,
        ActionVariant::CrossAttention,
        ActionVariant::ChannelConcat,
    ];
}

impl std::str::FromStr for ActionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time-embedding" | "time" => Ok(ActionVariant::TimeEmbedding),
            "cross-attention" | "cross" => Ok(ActionVariant::CrossAttention),
            "channel-concat" | "concat" => Ok(ActionVariant::ChannelConcat),
            other => Err(Error::invalid(format!("unknown action variant `{other}`"))),
        }
    }
}

/// Pixel frames grouped into one latent frame (after the first).
pub const FRAMES_PER_LATENT: usize = 4;
/// Width of the per-latent-frame action feature: four stacked actions.
pub const ACTION_FEATURES: usize = FRAMES_PER_LATENT * ActionVector::DIM;

/// Stack one action per generated pixel frame into per-latent-frame rows.
///
/// Latent frame 0 holds the conditioning image and gets a zero row; latent
/// frame `k ≥ 1` receives actions `4(k-1) .. 4k`.
pub fn group_actions(actions: &[ActionVector], latent_frames: usize) -> Result<Tensor> {
    let needed = FRAMES_PER_LATENT * latent_frames.saturating_sub(1);
    if actions.len() != needed {
        return Err(Error::invalid(format!(
            "expected {needed} actions for {latent_frames} latent frames, got {}",
            actions.len()
        )));
    }
    let mut data = vec![0.0; latent_frames * ACTION_FEATURES];
    for (i, a) in actions.iter().enumerate() {
        let row = 1 + i / FRAMES_PER_LATENT;
        let off = row * ACTION_FEATURES + (i % FRAMES_PER_LATENT) * ActionVector::DIM;
        data[off..off + ActionVector::DIM].copy_from_slice(&a.0);
    }
    Tensor::new(vec![latent_frames, ACTION_FEATURES], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole camera with world-to-camera extrinsics `x_cam = R x_world + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub intrinsics: Intrinsics,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraPose {
    pub fn identity(intrinsics: Intrinsics) -> Self {
        Self {
            intrinsics,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::invalid("rotation is not orthonormal"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("rotation determinant must be +1"));
        }
        let k = &self.intrinsics;
        if !(k.fx.is_finite() && k.fy.is_finite() && k.cx.is_finite() && k.cy.is_finite())
            || k.fx == 0.0
            || k.fy == 0.0
        {
            return Err(Error::invalid("singular intrinsics"));
        }
        Ok(())
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        let (r, t) = (&self.rotation, &self.translation);
        let mut o = [0.0; 3];
        for (j, oj) in o.iter_mut().enumerate() {
            *oj = -(0..3).map(|i| r[i][j] * t[i]).sum::<f64>();
        }
        o
    }

    /// Same camera viewing an image downscaled by `factor`.
    pub fn downscaled(&self, factor: f64) -> Self {
        let k = self.intrinsics;
        Self {
            intrinsics: Intrinsics {
                fx: k.fx / factor,
                fy: k.fy / factor,
                cx: k.cx / factor,
                cy: k.cy / factor,
            },
            ..*self
        }
    }
}

/// JSON camera trajectory: array of `{intrinsics, rotation, translation}`.
pub fn parse_camera_trajectory(json: &str) -> Result<Vec<CameraPose>> {
    let poses: Vec<CameraPose> = serde_json::from_str(json)?;
    for p in &poses {
        p.validate()?;
    }
    Ok(poses)
}

/// Per-pixel Plücker coordinates `[6, H, W]`: unit direction, then moment `o × d`.
///
/// Pixel `(x, y)` back-projects through `((x - cx)/fx, (y - cy)/fy, 1)`.
pub fn plucker_raymap(pose: &CameraPose, resolution: (usize, usize)) -> Result<Tensor> {
    pose.validate()?;
    let (h, w) = resolution;
    let k = pose.intrinsics;
    let r = &pose.rotation;
    let o = pose.center();
    let plane = h * w;
    let mut data = vec![0.0; 6 * plane];
    for y in 0..h {
        for x in 0..w {
            let dc = [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0];
            // world direction = Rᵀ d_cam
            let mut d = [0.0; 3];
            for (j, dj) in d.iter_mut().enumerate() {
                *dj = (0..3).map(|i| r[i][j] * dc[i]).sum();
            }
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            for v in d.iter_mut() {
                *v /= n;
            }
            let m = [
                o[1] * d[2] - o[2] * d[1],
                o[2] * d[0] - o[0] * d[2],
                o[0] * d[1] - o[1] * d[0],
            ];
            let p = y * w + x;
            for c in 0..3 {
                data[c * plane + p] = d[c];
                data[(3 + c) * plane + p] = m[c];
            }
        }
    }
    Tensor::new(vec![6, h, w], data)
}

/// One raymap per latent frame from a per-pixel-frame camera trajectory,
/// sampling the pose every 4 pixel frames (frames 0, 4, 8, …). Raymaps are
/// computed on the latent grid (`pixel / spatial_factor`).
pub fn latent_raymaps(
    poses: &[CameraPose],
    latent_frames: usize,
    latent_hw: (usize, usize),
    spatial_factor: usize,
) -> Result<Tensor> {
    let mut frames = Vec::with_capacity(latent_frames);
    for k in 0..latent_frames {
        let idx = k * FRAMES_PER_LATENT;
        let pose = poses.get(idx).ok_or_else(|| {
            Error::invalid(format!(
                "camera trajectory has {} poses, latent frame {k} needs pose {idx}",
                poses.len()
            ))
        })?;
        let rm = plucker_raymap(&pose.downscaled(spatial_factor as f64), latent_hw)?;
        frames.push(rm.reshape(&[1, 6, latent_hw.0, latent_hw.1])?);
    }
    Tensor::cat0(&frames)
}

/// Inputs shared by every chunk of an autoregressive rollout.
pub struct RolloutRequest<'a> {
    pub init_frame: &'a VideoTensor,
    pub actions: Option<&'a [ActionVector]>,
    pub num_chunks: usize,
    /// Latent frames per chunk (the first one is the conditioning frame).
    pub chunk_latent_frames: usize,
    pub text: &'a TextEmbedding,
    pub sampler: SamplerConfig,
}

/// Pixel frames in one chunk of `latent_frames` latent frames.
pub fn chunk_pixel_frames(latent_frames: usize) -> usize {
    1 + FRAMES_PER_LATENT * latent_frames.saturating_sub(1)
}

/// Chunked generation where chunk `k+1` is conditioned on the last frame of chunk `k`.
pub fn autoregressive_rollout(
    model: &dyn VelocityModel,
    tokenizer: &CausalTokenizer,
    req: &RolloutRequest<'_>,
) -> Result<VideoTensor> {
    if req.num_chunks == 0 {
        return Err(Error::invalid("num_chunks must be at least 1"));
    }
    if req.init_frame.len0() != 1 {
        return Err(Error::shape("init frame must hold exactly one pixel frame"));
    }
    let chunk_len = chunk_pixel_frames(req.chunk_latent_frames);
    let per_chunk = chunk_len - 1;
    if let Some(actions) = req.actions {
        if actions.len() < per_chunk * req.num_chunks {
            return Err(Error::invalid(format!(
                "{} chunks need {} actions, got {}",
                req.num_chunks,
                per_chunk * req.num_chunks,
                actions.len()
            )));
        }
    }
    let (c, h, w) = (
        req.init_frame.shape()[1],
        req.init_frame.shape()[2],
        req.init_frame.shape()[3],
    );
    let latent_shape = tokenizer.latent_shape(&[chunk_len, c, h, w])?;

    let mut pieces: Vec<VideoTensor> = Vec::with_capacity(req.num_chunks);
    let mut cond_frame = req.init_frame.clone();
    for k in 0..req.num_chunks {
        let cond_latent = tokenizer.encode(&cond_frame)?;
        let mut spec = ConditioningSpec::new(1, req.chunk_latent_frames)?.with_clean_latent(&cond_latent)?;
        if let Some(actions) = req.actions {
            spec.actions = Some(actions[k * per_chunk..(k + 1) * per_chunk].to_vec());
        }
        let mut cfg = req.sampler.clone();
        cfg.seed = req.sampler.seed.wrapping_add(k as u64);
        let latent = euler_sample(model, &spec, req.text, &latent_shape, &cfg)?;
        let video = tokenizer.decode(&latent)?;
        cond_frame = video.narrow0(chunk_len - 1, chunk_len)?;
        pieces.push(if k == 0 { video } else { video.narrow0(1, chunk_len)? });
    }
    Tensor::cat0(&pieces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masks_follow_causal_grouping() {
        assert_eq!(cond_mask(1, 4).unwrap(), vec![true, false, false, false]);
        assert_eq!(cond_mask(5, 4).unwrap(), vec![true, true, false, false]);
        assert_eq!(cond_mask(2, 3).unwrap(), vec![true, true, false]);
        assert_eq!(cond_mask(6, 3).unwrap(), vec![true, true, true]);
        assert_eq!(cond_mask(0, 2).unwrap(), vec![false, false]);
        assert!(cond_mask(5, 1).is_err());
    }

    #[test]
    fn text2world_has_no_condition_frames() {
        let s = ConditioningSpec::text2world(3);
        assert_eq!(s.mode, GenerationMode::Text2World);
        assert_eq!(s.num_cond_frames, 0);
        assert!(s.mask.iter().all(|m| !m));
    }

    #[test]
    fn final_stage_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_cond_frames(MaskStage::Final, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip([0.5, 0.25, 0.25]) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn joint_stage_draws_one_or_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<usize> = (0..2000)
            .map(|_| sample_cond_frames(MaskStage::Joint, &mut rng))
            .collect();
        assert!(draws.iter().all(|&d| d == 1 || d == 5));
        let ones = draws.iter().filter(|&&d| d == 1).count() as f64 / 2000.0;
        assert!((ones - 0.5).abs() < 0.05);
    }

    fn latent(frames: usize, fill: impl Fn(usize) -> f64) -> Tensor {
        Tensor::from_fn(&[frames, 2, 1, 2], fill)
    }

    #[test]
    fn frame_replacement_selects_per_frame() {
        let clean = latent(2, |i| 100.0 + i as f64);
        let generated = latent(2, |i| -(i as f64));
        let spec = ConditioningSpec::new(1, 2).unwrap().with_clean_latent(&clean).unwrap();
        let out = apply_frame_replacement(&generated, &spec).unwrap();
        assert_eq!(out.frame(0), clean.frame(0));
        assert_eq!(out.frame(1), generated.frame(1));
        // idempotent
        assert_eq!(apply_frame_replacement(&out, &spec).unwrap(), out);
    }

    #[test]
    fn frame_replacement_all_or_nothing() {
        let clean = latent(2, |i| i as f64 * 0.5);
        let generated = latent(2, |i| i as f64 * -3.0);
        let none = ConditioningSpec::text2world(2);
        assert_eq!(apply_frame_replacement(&generated, &none).unwrap(), generated);
        let all = ConditioningSpec::new(5, 2).unwrap().with_clean_latent(&clean).unwrap();
        assert_eq!(apply_frame_replacement(&generated, &all).unwrap(), clean);
        let long = ConditioningSpec::text2world(3);
        assert!(apply_frame_replacement(&generated, &long).is_err());
    }

    #[test]
    fn actions_grouped_per_latent_frame() {
        let actions: Vec<ActionVector> = (0..8)
            .map(|i| ActionVector::new([i as f64; 7]).unwrap())
            .collect();
        let g = group_actions(&actions, 3).unwrap();
        assert_eq!(g.shape(), &[3, 28]);
        assert!(g.frame(0).iter().all(|&v| v == 0.0));
        assert_eq!(g.frame(1)[0], 0.0);
        assert_eq!(g.frame(1)[27], 3.0);
        assert_eq!(g.frame(2)[0], 4.0);
        assert!(group_actions(&actions[..7], 3).is_err());
    }

    #[test]
    fn action_json_and_variant_parsing() {
        let a = parse_actions("[[1,2,3,4,5,6,0.5]]").unwrap();
        assert_eq!(a[0].0[6], 0.5);
        assert!(parse_actions("[[1,2,3]]").is_err());
        assert!("time-embedding".parse::<ActionVariant>().is_ok());
        assert!("film".parse::<ActionVariant>().is_err());
    }

    fn unit_k() -> Intrinsics {
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    #[test]
    fn raymap_hand_examples() {
        let k = Intrinsics {
            fx: 10.0,
            fy: 10.0,
            cx: 2.0,
            cy: 1.0,
        };
        let rm = plucker_raymap(&CameraPose::identity(k), (3, 4)).unwrap();
        let at = |c: usize, y: usize, x: usize| rm.data()[c * 12 + y * 4 + x];
        assert_eq!((at(0, 1, 2), at(1, 1, 2), at(2, 1, 2)), (0.0, 0.0, 1.0));
        for c in 3..6 {
            assert_eq!(at(c, 1, 2), 0.0);
        }

        let rm = plucker_raymap(&CameraPose::identity(unit_k()), (1, 2)).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let at = |c: usize| rm.data()[c * 2 + 1];
        assert!((at(0) - s).abs() < 1e-12 && at(1).abs() < 1e-12 && (at(2) - s).abs() < 1e-12);
        assert!((3..6).all(|c| at(c) == 0.0));
    }

    #[test]
    fn raymap_rejects_bad_pose() {
        let mut k = unit_k();
        k.fx = 0.0;
        assert!(plucker_raymap(&CameraPose::identity(k), (2, 2)).is_err());
        let mut p = CameraPose::identity(unit_k());
        p.rotation[0][0] = 2.0;
        assert!(plucker_raymap(&p, (2, 2)).is_err());
    }

    #[test]
    fn camera_json_round_trip() {
        let poses = vec![CameraPose::identity(unit_k()); 2];
        let json = serde_json::to_string(&poses).unwrap();
        assert!(json.contains("intrinsics") && json.contains("rotation") && json.contains("translation"));
        assert_eq!(parse_camera_trajectory(&json).unwrap(), poses);
    }
}
