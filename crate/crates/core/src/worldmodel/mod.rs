//! Miniature diffusion-transformer velocity predictor.
//!
//! Latent clips are concatenated with a per-frame condition-mask channel,
//! patchified 1×2×2 and embedded. Each block runs self-attention with 3D
//! rotary phases, cross-attention over projected text embeddings and a GELU
//! MLP, all modulated by AdaLN shift/scale/gate computed from the timestep
//! embedding through a low-rank (LoRA) bottleneck. There is no absolute
//! positional embedding anywhere.
//!
//! The output head is zero-initialized, as is a time-gated skip that scales
//! the noisy input tokens straight into the velocity; the exact tokenizer
//! produces tokens far wider than a desk-scale trunk, and the skip keeps the
//! `x_t / t` part of the target reachable.

pub mod patch;
pub mod rope;
pub mod text;
pub mod tokenizer;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Rotation, Var};
use crate::conditioning::{group_actions, ActionVariant, ActionVector, ConditioningSpec, ACTION_FEATURES};
use crate::error::{Error, Result};
use crate::flowmatch::VelocityModel;
use crate::tensor::{LatentTensor, Tensor};

use self::patch::{patchify, token_frames, unpatchify, PATCH};
use self::rope::{grid_coords, rope_for_coords};
use self::text::{TextEmbedding, TEXT_DIM};
use self::tokenizer::four;

/// Named parameter tensors, iterated in name order.
pub type ParamSet = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub num_blocks: usize,
    pub interleave_every: usize,
    /// Channels of the control-modality latent.
    pub channels: usize,
}

impl ControlConfig {
    /// Spread `num_blocks` control blocks evenly over `num_layers` main blocks.
    pub fn evenly(num_layers: usize, num_blocks: usize, channels: usize) -> Result<Self> {
        if num_blocks == 0 || num_blocks > num_layers {
            return Err(Error::invalid(format!(
                "{num_blocks} control blocks cannot be spread over {num_layers} layers"
            )));
        }
        Ok(Self {
            num_blocks,
            interleave_every: num_layers / num_blocks,
            channels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiviewConfig {
    pub num_views: usize,
    pub view_emb_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionConfig {
    pub variant: ActionVariant,
    /// Appended channels for the channel-concat variant.
    pub concat_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub adaln_lora_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub patch: [usize; 3],
    /// Channels of the tokenizer latent the model denoises.
    pub latent_channels: usize,
    pub text_dim: usize,
    /// Sinusoidal timestep features; `None` uses `model_dim`.
    #[serde(default)]
    pub time_freq_dim: Option<usize>,
    #[serde(default)]
    pub control: Option<ControlConfig>,
    #[serde(default)]
    pub multiview: Option<MultiviewConfig>,
    #[serde(default)]
    pub action: Option<ActionConfig>,
    #[serde(default)]
    pub camera: bool,
}

impl ModelConfig {
    /// Default desk configuration for RGB clips through the 4×8×8 tokenizer.
    pub fn desk() -> Self {
        Self {
            num_layers: 8,
            model_dim: 128,
            ffn_dim: 512,
            adaln_lora_dim: 32,
            num_heads: 4,
            head_dim: 32,
            patch: [1, 2, 2],
            latent_channels: 768,
            text_dim: TEXT_DIM,
            time_freq_dim: None,
            control: None,
            multiview: None,
            action: None,
            camera: false,
        }
    }

    /// Two-layer, 64-wide variant used for quick CPU runs.
    pub fn small() -> Self {
        Self {
            num_layers: 2,
            model_dim: 64,
            ffn_dim: 256,
            adaln_lora_dim: 16,
            num_heads: 2,
            head_dim: 32,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim != self.num_heads * self.head_dim {
            return Err(Error::invalid(format!(
                "model_dim {} != num_heads {} x head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            )));
        }
        if self.patch != [1, PATCH, PATCH] {
            return Err(Error::invalid("only the 1x2x2 patch is supported"));
        }
        if self.freq_dim() % 2 != 0 || self.num_layers == 0 {
            return Err(Error::invalid("timestep features must be even and num_layers positive"));
        }
        rope::AxisSplit::for_head_dim(self.head_dim)?;
        if let Some(c) = &self.control {
            if c.interleave_every == 0 {
                return Err(Error::invalid("interleave_every must be at least 1"));
            }
            if c.num_blocks > self.num_layers || c.num_blocks * c.interleave_every > self.num_layers {
                return Err(Error::invalid(format!(
                    "{} control blocks every {} layers exceed {} main blocks",
                    c.num_blocks, c.interleave_every, self.num_layers
                )));
            }
        }
        if let Some(m) = &self.multiview {
            if m.num_views == 0 || m.view_emb_dim == 0 {
                return Err(Error::invalid("multiview needs views and an embedding size"));
            }
        }
        Ok(())
    }

    /// 1-based main-block indices after which control features are added.
    pub fn injection_points(&self) -> Vec<usize> {
        match &self.control {
            Some(c) => (1..=c.num_blocks).map(|j| j * c.interleave_every).collect(),
            None => Vec::new(),
        }
    }

    fn patch_in(&self) -> usize {
        (self.latent_channels + 1) * PATCH * PATCH
    }

    pub fn freq_dim(&self) -> usize {
        self.time_freq_dim.unwrap_or(self.model_dim)
    }

    fn patch_out(&self) -> usize {
        self.latent_channels * PATCH * PATCH
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
}

fn linear_specs(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize, bias: bool, zero: bool) {
    let init = if zero {
        Init::Zeros
    } else {
        Init::Normal(1.0 / (fan_in as f64).sqrt())
    };
    out.push((format!("{name}.weight"), vec![fan_in, fan_out], init));
    if bias {
        out.push((format!("{name}.bias"), vec![fan_out], Init::Zeros));
    }
}

fn block_specs(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, cfg: &ModelConfig) {
    let (d, r) = (cfg.model_dim, cfg.adaln_lora_dim);
    for sub in ["adaln_sa", "adaln_ca", "adaln_mlp"] {
        linear_specs(out, &format!("{prefix}.{sub}.down"), d, r, false, false);
        out.push((format!("{prefix}.{sub}.up.weight"), vec![r, 3 * d], Init::Normal(0.1 / (r as f64).sqrt())));
        out.push((format!("{prefix}.{sub}.up.bias"), vec![3 * d], Init::Zeros));
    }
    for attn in ["self_attn", "cross_attn"] {
        for p in ["q", "k", "v", "o"] {
            linear_specs(out, &format!("{prefix}.{attn}.{p}"), d, d, false, false);
        }
    }
    if let Some(ActionConfig {
        variant: ActionVariant::CrossAttention,
        ..
    }) = &cfg.action
    {
        for p in ["q", "k", "v", "o"] {
            linear_specs(out, &format!("{prefix}.action_attn.{p}"), d, d, false, false);
        }
    }
    linear_specs(out, &format!("{prefix}.mlp.fc1"), d, cfg.ffn_dim, true, false);
    linear_specs(out, &format!("{prefix}.mlp.fc2"), cfg.ffn_dim, d, true, false);
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.model_dim;
    let mut out = Vec::new();
    linear_specs(&mut out, "x_embed", cfg.patch_in(), d, true, false);
    linear_specs(&mut out, "t_embed.fc1", cfg.freq_dim(), d, true, false);
    linear_specs(&mut out, "t_embed.fc2", d, d, true, false);
    linear_specs(&mut out, "text_proj", cfg.text_dim, d, true, false);
    out.push(("null_text".into(), vec![1, cfg.text_dim], Init::Normal(0.1)));
    for i in 0..cfg.num_layers {
        block_specs(&mut out, &format!("blocks.{i}"), cfg);
    }
    linear_specs(&mut out, "final.adaln.down", d, cfg.adaln_lora_dim, false, false);
    out.push(("final.adaln.up.weight".into(), vec![cfg.adaln_lora_dim, 2 * d], Init::Normal(0.1 / (cfg.adaln_lora_dim as f64).sqrt())));
    out.push(("final.adaln.up.bias".into(), vec![2 * d], Init::Zeros));
    linear_specs(&mut out, "final.proj", d, cfg.patch_out(), true, true);
    linear_specs(&mut out, "skip", d, 1, true, true);
    if let Some(c) = &cfg.control {
        linear_specs(&mut out, "control.embed", c.channels * PATCH * PATCH, d, true, false);
        for j in 0..c.num_blocks {
            block_specs(&mut out, &format!("control.blocks.{j}"), cfg);
            linear_specs(&mut out, &format!("control.zero_proj.{j}"), d, d, true, true);
        }
    }
    if let Some(m) = &cfg.multiview {
        out.push(("view_emb".into(), vec![m.num_views, m.view_emb_dim], Init::Normal(1.0)));
        linear_specs(&mut out, "x_embed.view", m.view_emb_dim, d, false, false);
    }
    if let Some(a) = &cfg.action {
        let width = match a.variant {
            ActionVariant::ChannelConcat => a.concat_channels,
            _ => d,
        };
        linear_specs(&mut out, "action.fc1", ACTION_FEATURES, d, true, false);
        linear_specs(&mut out, "action.fc2", d, width, true, true);
        if a.variant == ActionVariant::ChannelConcat {
            linear_specs(&mut out, "x_embed.action", a.concat_channels, d, false, false);
        }
    }
    if cfg.camera {
        linear_specs(&mut out, "camera_proj", 6 * PATCH * PATCH, d, true, true);
    }
    out
}

/// Resolves parameter names to graph leaves, once per graph.
pub struct Binder<'p> {
    params: &'p ParamSet,
    vars: BTreeMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
}

impl<'p> Binder<'p> {
    /// Every parameter is a trainable leaf.
    pub fn trainable(params: &'p ParamSet) -> Self {
        Self::with_filter(params, |_| true)
    }

    /// Every parameter is a constant.
    pub fn frozen(params: &'p ParamSet) -> Self {
        Self::with_filter(params, |_| false)
    }

    pub fn with_filter(params: &'p ParamSet, f: impl Fn(&str) -> bool + 'p) -> Self {
        Self {
            params,
            vars: BTreeMap::new(),
            trainable: Box::new(f),
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))?
            .clone();
        let v = if (self.trainable)(name) {
            g.param(t)
        } else {
            g.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = self.get(g, &format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let b = if self.params.contains_key(&bias_name) {
            Some(self.get(g, &bias_name)?)
        } else {
            None
        };
        g.linear(x, w, b)
    }

    /// Gradients of every trainable parameter touched by the graph.
    pub fn gradients(&self, grads: &Gradients) -> ParamSet {
        self.vars
            .iter()
            .filter(|(name, _)| (self.trainable)(name))
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.params[name].shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Everything one forward pass consumes.
#[derive(Clone, Copy)]
pub struct ModelInput<'a> {
    pub x_t: &'a LatentTensor,
    /// Condition flag per latent frame.
    pub mask: &'a [f64],
    pub t: f64,
    /// `None` selects the learned null embedding.
    pub text: Option<&'a TextEmbedding>,
    pub actions: Option<&'a [ActionVector]>,
    /// Raymaps `[T_l, 6, h, w]` on the latent grid.
    pub camera: Option<&'a Tensor>,
    pub control: Option<&'a LatentTensor>,
}

impl<'a> ModelInput<'a> {
    pub fn new(x_t: &'a LatentTensor, mask: &'a [f64], t: f64, text: Option<&'a TextEmbedding>) -> Self {
        Self {
            x_t,
            mask,
            t,
            text,
            actions: None,
            camera: None,
            control: None,
        }
    }

    pub fn with_conditioning(mut self, cond: &'a ConditioningSpec) -> Self {
        self.actions = cond.actions.as_deref();
        self.camera = cond.camera.as_ref();
        self.control = cond.control.as_ref();
        self
    }
}

struct Ctx {
    frame_idx: Rc<Vec<usize>>,
    temb_act: Var,
    text: Var,
    rot: Rc<Rotation>,
    camera: Option<Var>,
    actions: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t * 1000.0 * f;
        out[i] = a.cos();
        out[half + i] = a.sin();
    }
    Tensor::new(vec![1, dim], out).expect("sized above")
}

impl WorldModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in param_specs(&config) {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                    Tensor::from_fn(&shape, |_| n.sample(&mut rng))
                }
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in param_specs(&config) {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::shape(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::NotFound(format!("parameter `{name}`"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Add Gaussian noise to every parameter, zero-initialized ones included.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, std).expect("positive std");
        for t in self.params.values_mut() {
            for x in t.data_mut() {
                *x += n.sample(&mut rng);
            }
        }
    }

    fn modulation(&self, g: &mut Graph, b: &mut Binder, name: &str, ctx: &Ctx, chunks: usize) -> Result<Vec<Var>> {
        let d = self.config.model_dim;
        let low = b.linear(g, ctx.temb_act, &format!("{name}.down"))?;
        let per_frame = b.linear(g, low, &format!("{name}.up"))?;
        let per_token = g.gather_rows(per_frame, ctx.frame_idx.clone())?;
        (0..chunks).map(|k| g.slice_cols(per_token, k * d, d)).collect()
    }

    fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = g.layer_norm(x, 1e-6);
        let s1 = g.add_const(scale, 1.0);
        let y = g.mul(n, s1)?;
        g.add(y, shift)
    }

    fn attention(&self, g: &mut Graph, b: &mut Binder, name: &str, x: Var, ctx: Var, rot: Option<&Rc<Rotation>>) -> Result<Var> {
        let hd = self.config.head_dim;
        let q = b.linear(g, x, &format!("{name}.q"))?;
        let k = b.linear(g, ctx, &format!("{name}.k"))?;
        let v = b.linear(g, ctx, &format!("{name}.v"))?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let mut qh = g.slice_cols(q, h * hd, hd)?;
            let mut kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            if let Some(r) = rot {
                qh = g.rotate_pairs(qh, r.clone())?;
                kh = g.rotate_pairs(kh, r.clone())?;
            }
            let logits = g.matmul_bt(qh, kh)?;
            let logits = g.scale(logits, scale);
            let p = g.softmax(logits);
            heads.push(g.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        b.linear(g, cat, &format!("{name}.o"))
    }

    fn block(&self, g: &mut Graph, b: &mut Binder, prefix: &str, mut h: Var, ctx: &Ctx) -> Result<Var> {
        let m = self.modulation(g, b, &format!("{prefix}.adaln_sa"), ctx, 3)?;
        let mut x = Self::modulate(g, h, m[0], m[1])?;
        if let Some(cam) = ctx.camera {
            x = g.add(x, cam)?;
        }
        let a = self.attention(g, b, &format!("{prefix}.self_attn"), x, x, Some(&ctx.rot))?;
        let a = g.mul(a, m[2])?;
        h = g.add(h, a)?;

        let m = self.modulation(g, b, &format!("{prefix}.adaln_ca"), ctx, 3)?;
        let x = Self::modulate(g, h, m[0], m[1])?;
        let a = self.attention(g, b, &format!("{prefix}.cross_attn"), x, ctx.text, None)?;
        let a = g.mul(a, m[2])?;
        h = g.add(h, a)?;

        if let (Some(act), Some(ActionConfig { variant: ActionVariant::CrossAttention, .. })) = (ctx.actions, &self.config.action) {
            let x = g.layer_norm(h, 1e-6);
            let a = self.attention(g, b, &format!("{prefix}.action_attn"), x, act, None)?;
            h = g.add(h, a)?;
        }

        let m = self.modulation(g, b, &format!("{prefix}.adaln_mlp"), ctx, 3)?;
        let x = Self::modulate(g, h, m[0], m[1])?;
        let y = b.linear(g, x, &format!("{prefix}.mlp.fc1"))?;
        let y = g.gelu(y);
        let y = b.linear(g, y, &format!("{prefix}.mlp.fc2"))?;
        let y = g.mul(y, m[2])?;
        g.add(h, y)
    }

    /// Velocity tokens `[T·(h/2)·(w/2), C_l·4]` for one clip.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, input: &ModelInput) -> Result<Var> {
        let cfg = &self.config;
        let [tl, c, h, w] = four(input.x_t.shape())?;
        if c != cfg.latent_channels {
            return Err(Error::shape(format!(
                "latent has {c} channels, model expects {}",
                cfg.latent_channels
            )));
        }
        if input.mask.len() != tl {
            return Err(Error::shape(format!(
                "mask has {} entries for {tl} latent frames",
                input.mask.len()
            )));
        }
        let (ph, pw) = (h / PATCH, w / PATCH);

        // latent ⊕ mask channel, patchified
        let plane = h * w;
        let mut with_mask = Vec::with_capacity(tl * (c + 1) * plane);
        for (f, &m) in input.mask.iter().enumerate() {
            with_mask.extend_from_slice(input.x_t.frame(f));
            with_mask.extend(std::iter::repeat_n(m, plane));
        }
        let xin = patchify(&Tensor::new(vec![tl, c + 1, h, w], with_mask)?)?;
        let xin = g.constant(xin);
        let mut hid = b.linear(g, xin, "x_embed")?;
        let frame_idx = Rc::new(token_frames(tl, h, w));

        let mut frames_per_view = None;
        if let Some(mv) = &cfg.multiview {
            if tl % mv.num_views != 0 {
                return Err(Error::shape(format!(
                    "{tl} packed frames do not split into {} views",
                    mv.num_views
                )));
            }
            let per = tl / mv.num_views;
            frames_per_view = Some(per);
            let view_idx = Rc::new(frame_idx.iter().map(|f| f / per).collect::<Vec<_>>());
            let table = b.get(g, "view_emb")?;
            let e = g.gather_rows(table, view_idx)?;
            let e = b.linear(g, e, "x_embed.view")?;
            hid = g.add(hid, e)?;
        }

        let mut action_time = None;
        let mut action_ctx = None;
        if let Some(acfg) = &cfg.action {
            let actions = input
                .actions
                .ok_or_else(|| Error::invalid("action-conditioned model needs an action sequence"))?;
            let feats = g.constant(group_actions(actions, tl)?);
            let a = b.linear(g, feats, "action.fc1")?;
            let a = g.silu(a);
            let a = b.linear(g, a, "action.fc2")?;
            match acfg.variant {
                ActionVariant::TimeEmbedding => action_time = Some(a),
                ActionVariant::CrossAttention => action_ctx = Some(a),
                ActionVariant::ChannelConcat => {
                    let per_tok = g.gather_rows(a, frame_idx.clone())?;
                    let e = b.linear(g, per_tok, "x_embed.action")?;
                    hid = g.add(hid, e)?;
                }
            }
        }

        let sin = g.constant(sinusoidal_embedding(input.t, cfg.freq_dim()));
        let te = b.linear(g, sin, "t_embed.fc1")?;
        let te = g.silu(te);
        let te = b.linear(g, te, "t_embed.fc2")?;
        let mut temb = g.gather_rows(te, Rc::new(vec![0; tl]))?;
        if let Some(a) = action_time {
            temb = g.add(temb, a)?;
        }
        let temb_act = g.silu(temb);

        let text_raw = match input.text {
            Some(t) => {
                if t.width() != cfg.text_dim {
                    return Err(Error::shape(format!(
                        "text embedding width {} != {}",
                        t.width(),
                        cfg.text_dim
                    )));
                }
                g.constant(t.tensor().clone())
            }
            None => b.get(g, "null_text")?,
        };
        let text = b.linear(g, text_raw, "text_proj")?;

        let camera = match (cfg.camera, input.camera) {
            (true, Some(rm)) => {
                if rm.shape() != [tl, 6, h, w] {
                    return Err(Error::shape(format!(
                        "raymap {:?} does not match latent grid [{tl}, 6, {h}, {w}]",
                        rm.shape()
                    )));
                }
                let toks = g.constant(patchify(rm)?);
                Some(b.linear(g, toks, "camera_proj")?)
            }
            _ => None,
        };

        let rot = Rc::new(rope_for_coords(
            &grid_coords((tl, ph, pw), frames_per_view),
            cfg.head_dim,
        )?);
        let ctx = Ctx {
            frame_idx: frame_idx.clone(),
            temb_act,
            text,
            rot,
            camera,
            actions: action_ctx,
        };

        let mut control = match (&cfg.control, input.control) {
            (Some(cc), Some(ci)) => {
                if ci.shape() != [tl, cc.channels, h, w] {
                    return Err(Error::shape(format!(
                        "control input {:?} not aligned with latent [{tl}, {}, {h}, {w}]",
                        ci.shape(),
                        cc.channels
                    )));
                }
                let toks = g.constant(patchify(ci)?);
                let e = b.linear(g, toks, "control.embed")?;
                Some(g.add(hid, e)?)
            }
            _ => None,
        };
        let points = cfg.injection_points();

        for i in 0..cfg.num_layers {
            hid = self.block(g, b, &format!("blocks.{i}"), hid, &ctx)?;
            if let Some(j) = points.iter().position(|&p| p == i + 1) {
                if let Some(cstate) = control {
                    let next = self.block(g, b, &format!("control.blocks.{j}"), cstate, &ctx)?;
                    let inj = b.linear(g, next, &format!("control.zero_proj.{j}"))?;
                    hid = g.add(hid, inj)?;
                    control = Some(next);
                }
            }
        }

        let m = self.modulation(g, b, "final.adaln", &ctx, 2)?;
        let x = Self::modulate(g, hid, m[0], m[1])?;
        let out = b.linear(g, x, "final.proj")?;

        let s = b.linear(g, temb_act, "skip")?;
        let s = g.gather_rows(s, frame_idx)?;
        let xt = g.constant(patchify(input.x_t)?);
        let skip = g.mul_col(xt, s)?;
        g.add(out, skip)
    }

    /// Velocity for one clip, without gradient bookkeeping.
    pub fn predict(&self, input: &ModelInput) -> Result<LatentTensor> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let out = self.forward(&mut g, &mut b, input)?;
        unpatchify(g.value(out), four(input.x_t.shape())?)
    }

    pub fn null_text(&self) -> Result<TextEmbedding> {
        TextEmbedding::new(self.params["null_text"].clone())
    }
}

impl VelocityModel for WorldModel {
    fn velocity(&self, x_t: &LatentTensor, cond: &ConditioningSpec, t: f64, text: Option<&TextEmbedding>) -> Result<LatentTensor> {
        let mask = cond.mask_values();
        let input = ModelInput::new(x_t, &mask, t, text).with_conditioning(cond);
        self.predict(&input)
    }
}

/// Add a control branch whose blocks start as copies of the main blocks
/// feeding each injection point and whose output projections are zero.
pub fn attach_control_branch(base: &WorldModel, control: ControlConfig) -> Result<WorldModel> {
    if control.num_blocks > base.config.num_layers {
        return Err(Error::invalid(format!(
            "{} control blocks exceed {} main blocks",
            control.num_blocks, base.config.num_layers
        )));
    }
    let mut config = base.config.clone();
    config.control = Some(control.clone());
    config.validate()?;
    let fresh = WorldModel::new(config.clone(), 0x5eed_c0de)?;
    let mut params = base.params.clone();
    for (name, t) in fresh.params {
        params.entry(name).or_insert(t);
    }
    for j in 0..control.num_blocks {
        let src = format!("blocks.{}.", (j + 1) * control.interleave_every - 1);
        let dst = format!("control.blocks.{j}.");
        let copies: Vec<(String, Tensor)> = base
            .params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&src).map(|rest| (format!("{dst}{rest}"), v.clone())))
            .collect();
        params.extend(copies);
    }
    WorldModel::from_params(config, params)
}

pub fn is_control_param(name: &str) -> bool {
    name.starts_with("control.")
}

/// Trainable set for camera fine-tuning: self-attention projections and the camera projection.
pub fn is_camera_trainable(name: &str) -> bool {
    name.contains(".self_attn.") || name.starts_with("camera_proj.")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            model_dim: 16,
            ffn_dim: 32,
            adaln_lora_dim: 4,
            num_heads: 2,
            head_dim: 8,
            patch: [1, 2, 2],
            latent_channels: 3,
            text_dim: 8,
            time_freq_dim: None,
            control: None,
            multiview: None,
            action: None,
            camera: false,
        }
    }

    fn latent(t: usize, c: usize, seed: f64) -> Tensor {
        Tensor::from_fn(&[t, c, 4, 4], |i| ((i as f64 + 1.0) * seed).sin())
    }

    fn text(n: usize, width: usize) -> TextEmbedding {
        TextEmbedding::new(Tensor::from_fn(&[n, width], |i| (i as f64 * 0.7).cos())).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::small().validate().is_ok());
        let mut c = tiny_config();
        c.model_dim = 20;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.head_dim = 4;
        c.num_heads = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_init_gives_zero_velocity_with_input_shape() {
        let m = WorldModel::new(tiny_config(), 1).unwrap();
        let x = latent(2, 3, 0.3);
        let tx = text(3, 8);
        let v = m.predict(&ModelInput::new(&x, &[1.0, 0.0], 0.4, Some(&tx))).unwrap();
        assert_eq!(v.shape(), x.shape());
        assert!(v.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn shape_errors() {
        let m = WorldModel::new(tiny_config(), 1).unwrap();
        let x = latent(2, 3, 0.3);
        assert!(m.predict(&ModelInput::new(&x, &[1.0], 0.4, None)).is_err());
        let bad_text = text(2, 5);
        assert!(m.predict(&ModelInput::new(&x, &[1.0, 0.0], 0.4, Some(&bad_text))).is_err());
        let bad_c = latent(2, 4, 0.3);
        assert!(m.predict(&ModelInput::new(&bad_c, &[1.0, 0.0], 0.4, None)).is_err());
    }

    #[test]
    fn injection_points_for_eight_and_four() {
        let mut c = ModelConfig::desk();
        c.control = Some(ControlConfig::evenly(8, 4, 3).unwrap());
        assert_eq!(c.injection_points(), vec![2, 4, 6, 8]);
        assert!(ControlConfig::evenly(8, 9, 3).is_err());
    }

    #[test]
    fn control_branch_preserves_output_at_attach() {
        let mut base = WorldModel::new(tiny_config(), 5).unwrap();
        base.perturb(6, 0.05);
        let ctrl = attach_control_branch(&base, ControlConfig::evenly(2, 2, 2).unwrap()).unwrap();
        let x = latent(2, 3, 0.9);
        let control = latent(2, 2, 1.7);
        let tx = text(2, 8);
        let mask = [1.0, 0.0];
        let before = base.predict(&ModelInput::new(&x, &mask, 0.6, Some(&tx))).unwrap();
        let mut input = ModelInput::new(&x, &mask, 0.6, Some(&tx));
        input.control = Some(&control);
        let after = ctrl.predict(&input).unwrap();
        assert_eq!(before, after);
        assert_eq!(
            ctrl.params["control.blocks.0.mlp.fc1.weight"],
            base.params["blocks.0.mlp.fc1.weight"]
        );
        assert!(attach_control_branch(&base, ControlConfig { num_blocks: 3, interleave_every: 1, channels: 2 }).is_err());
    }
}
