//! Group-relative policy optimization of the flow model.
//!
//! Rollouts use a stochastic Euler sampler, `x_{k+1} = x_k + Δ_k·u_θ(x_k, t_k)
//! + σ_k·z` with `σ_k = noise_std·√|Δ_k|`, so every transition has a Gaussian
//! density. Rewards are normalized within each group into advantages, and the
//! loss combines the advantage-weighted trajectory log-likelihood with a
//! per-step KL penalty against a frozen reference model and a per-step
//! Huber-clipped deviation penalty. Gradients are accumulated over chunks of
//! `grad_chunk` steps before a single optimizer update.

use std::io::Write;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::conditioning::{replace_in_place, ConditioningSpec};
use crate::error::{Error, Result};
use crate::flowmatch::{gaussian, time_grid};
use crate::rewardsvc::{Item, RewardBreakdown, RewardClient};
use crate::tensor::{LatentTensor, Tensor};
use crate::trainer::{AdamW, Ema};
use crate::worldmodel::patch::{patchify, token_frames};
use crate::worldmodel::text::TextEmbedding;
use crate::worldmodel::tokenizer::four;
use crate::worldmodel::{Binder, ModelInput, ParamSet, WorldModel};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RLConfig {
    pub group_size: usize,
    pub num_steps: usize,
    /// Sampler steps per gradient chunk.
    pub grad_chunk: usize,
    pub updates: usize,
    pub batch_conditions: usize,
    pub kl_coeff: f64,
    pub reg_coeff: f64,
    /// Huber threshold of the per-step deviation penalty, in units of σ_k.
    pub clip: f64,
    /// Sampler noise scale; 0 gives deterministic rollouts.
    pub noise_std: f64,
    pub ema_decay: f64,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub reward_types: Vec<String>,
    pub reward_timeout_s: f64,
    pub seed: u64,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            num_steps: 20,
            grad_chunk: 2,
            updates: 256,
            batch_conditions: 32,
            kl_coeff: 0.01,
            reg_coeff: 0.01,
            clip: 1.0,
            noise_std: 0.3,
            ema_decay: 0.99,
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            reward_types: vec!["brightness".into()],
            reward_timeout_s: 600.0,
            seed: 0,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::invalid("group_size must be at least 2"));
        }
        if self.num_steps == 0 || self.grad_chunk == 0 || self.num_steps % self.grad_chunk != 0 {
            return Err(Error::invalid(format!(
                "num_steps {} must be a positive multiple of grad_chunk {}",
                self.num_steps, self.grad_chunk
            )));
        }
        if self.batch_conditions == 0 {
            return Err(Error::invalid("batch_conditions must be at least 1"));
        }
        if self.noise_std < 0.0 || self.clip <= 0.0 || self.lr < 0.0 {
            return Err(Error::invalid("noise_std and lr must be non-negative, clip positive"));
        }
        if self.reward_types.is_empty() {
            return Err(Error::invalid("no reward types configured"));
        }
        Ok(())
    }

    pub fn num_chunks(&self) -> usize {
        self.num_steps / self.grad_chunk
    }

    /// Rollouts generated over the whole run.
    pub fn total_rollouts(&self) -> usize {
        self.updates * self.batch_conditions * self.group_size
    }

    fn sigma(&self, dt: f64) -> f64 {
        self.noise_std * dt.abs().sqrt()
    }
}

/// What a group of rollouts is conditioned on.
#[derive(Clone, Debug)]
pub struct RlCondition {
    pub prompt: String,
    pub text: TextEmbedding,
    pub cond: ConditioningSpec,
    pub latent_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub x: LatentTensor,
    pub x_next: LatentTensor,
    pub t: f64,
    pub t_next: f64,
    /// Standard-normal draw scaled by `sigma` into the step.
    pub noise: LatentTensor,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub final_latent: LatentTensor,
    pub reward: Option<RewardBreakdown>,
    pub advantage: f64,
}

#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub condition: RlCondition,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Option<Vec<f64>> {
        self.trajectories.iter().map(|t| t.reward.map(|r| r.sum)).collect()
    }
}

/// `A_i = (r_i − mean) / (std_pop + 1e-8)`.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid("a group needs at least two rewards"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

fn model_input<'a>(x: &'a LatentTensor, mask: &'a [f64], t: f64, c: &'a RlCondition) -> ModelInput<'a> {
    ModelInput::new(x, mask, t, Some(&c.text)).with_conditioning(&c.cond)
}

/// G stochastic trajectories from pure noise, retaining every transition.
pub fn rollout_group(model: &WorldModel, condition: &RlCondition, cfg: &RLConfig, rng: &mut ChaCha8Rng) -> Result<RolloutGroup> {
    cfg.validate()?;
    let mask = condition.cond.mask_values();
    let grid = time_grid(cfg.num_steps);
    let mut trajectories = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let mut x = gaussian(&condition.latent_shape, rng);
        replace_in_place(&mut x, &condition.cond)?;
        let mut transitions = Vec::with_capacity(cfg.num_steps);
        for w in grid.windows(2) {
            let (t, t_next) = (w[0], w[1]);
            let dt = t_next - t;
            let sigma = cfg.sigma(dt);
            let u = model.predict(&model_input(&x, &mask, t, condition))?;
            let z = gaussian(x.shape(), rng);
            let mut next = x.clone();
            for ((v, du), dz) in next.data_mut().iter_mut().zip(u.data()).zip(z.data()) {
                *v += dt * du + sigma * dz;
            }
            replace_in_place(&mut next, &condition.cond)?;
            transitions.push(Transition {
                x: x.clone(),
                x_next: next.clone(),
                t,
                t_next,
                noise: z,
                sigma,
            });
            x = next;
        }
        trajectories.push(Trajectory {
            transitions,
            final_latent: x,
            reward: None,
            advantage: 0.0,
        });
    }
    Ok(RolloutGroup {
        condition: condition.clone(),
        trajectories,
    })
}

/// Per-element weights selecting the generated (non-condition) frames, and
/// how many elements they cover.
fn generated_weights(cond: &ConditioningSpec, shape: &[usize]) -> Result<(Tensor, f64)> {
    let [tl, c, h, w] = four(shape)?;
    let frames = token_frames(tl, h, w);
    let lm = cond.loss_mask();
    let col: Vec<f64> = frames.iter().map(|&f| lm[f]).collect();
    let count = col.iter().sum::<f64>() * (c * 4) as f64;
    Ok((Tensor::new(vec![col.len(), 1], col)?, count))
}

/// Gaussian log-density of `x_next` under the model's step mean, over the
/// generated frames.
pub fn step_log_prob(model: &WorldModel, condition: &RlCondition, tr: &Transition) -> Result<f64> {
    if !(tr.sigma > 0.0) {
        return Err(Error::invalid("transition density undefined for zero noise scale"));
    }
    let mask = condition.cond.mask_values();
    let u = model.predict(&model_input(&tr.x, &mask, tr.t, condition))?;
    let dt = tr.t_next - tr.t;
    let (wcol, count) = generated_weights(&condition.cond, tr.x.shape())?;
    let resid = Tensor::new(
        tr.x.shape().to_vec(),
        tr.x_next
            .data()
            .iter()
            .zip(tr.x.data())
            .zip(u.data())
            .map(|((n, x), u)| n - x - dt * u)
            .collect(),
    )?;
    let toks = patchify(&resid)?;
    let mut sq = 0.0;
    for (row, wv) in toks.data().chunks(toks.cols()).zip(wcol.data()) {
        sq += wv * row.iter().map(|e| e * e).sum::<f64>();
    }
    Ok(-0.5 * sq / (tr.sigma * tr.sigma) - count * (tr.sigma.ln() + 0.5 * LN_2PI))
}

/// Loss terms of a set of steps of one trajectory, built on `g`.
struct StepTerms {
    loss: Var,
    policy: f64,
    kl: f64,
}

#[allow(clippy::too_many_arguments)]
fn steps_loss(
    g: &mut Graph,
    b: &mut Binder,
    policy: &WorldModel,
    reference: &WorldModel,
    condition: &RlCondition,
    traj: &Trajectory,
    steps: std::ops::Range<usize>,
    cfg: &RLConfig,
    norm: f64,
) -> Result<StepTerms> {
    let mask = condition.cond.mask_values();
    let mut total: Option<Var> = None;
    let (mut policy_sum, mut kl_sum) = (0.0, 0.0);
    for k in steps {
        let tr = &traj.transitions[k];
        if !(tr.sigma > 0.0) {
            return Err(Error::invalid("transition density undefined for zero noise scale"));
        }
        let dt = tr.t_next - tr.t;
        let inv_var = 1.0 / (tr.sigma * tr.sigma);
        let (wcol, count) = generated_weights(&condition.cond, tr.x.shape())?;
        let input = model_input(&tr.x, &mask, tr.t, condition);
        let u = policy.forward(g, b, &input)?;
        let u_ref = patchify(&reference.predict(&input)?)?;

        // log p = −½σ⁻²‖x_{k+1} − x_k − Δ·u‖² − n(ln σ + ½ ln 2π)
        let step = patchify(&tr.x_next.zip_map(&tr.x, |n, x| n - x))?;
        let step = g.constant(step);
        let du = g.scale(u, dt);
        let e = g.sub(step, du)?;
        let e2 = g.mul(e, e)?;
        let w = g.constant(wcol);
        let e2 = g.mul_col(e2, w)?;
        let sq = g.sum(e2);
        let logp = g.scale(sq, -0.5 * inv_var);
        let logp = g.add_const(logp, -count * (tr.sigma.ln() + 0.5 * LN_2PI));
        let pg = g.scale(logp, -traj.advantage);

        // (μ_θ − μ_ref)/σ = Δ·(u_θ − u_ref)/σ
        let uref = g.constant(u_ref);
        let d = g.sub(u, uref)?;
        let d = g.scale(d, dt / tr.sigma);
        let d2 = g.mul(d, d)?;
        let d2 = g.mul_col(d2, w)?;
        let kl = g.sum(d2);
        let kl = g.scale(kl, 0.5);
        let hub = g.huber(d, cfg.clip);
        let hub = g.mul_col(hub, w)?;
        let reg = g.sum(hub);

        policy_sum += g.value(pg).item() / norm;
        kl_sum += g.value(kl).item() / norm;
        let kl = g.scale(kl, cfg.kl_coeff);
        let reg = g.scale(reg, cfg.reg_coeff);
        let s = g.add(pg, kl)?;
        let s = g.add(s, reg)?;
        let s = g.scale(s, 1.0 / norm);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(StepTerms {
        loss: total.ok_or_else(|| Error::invalid("empty step range"))?,
        policy: policy_sum,
        kl: kl_sum,
    })
}

fn accumulate(acc: &mut ParamSet, grads: ParamSet) {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(t) => t.add_assign(&g),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: usize,
    pub loss: f64,
    pub policy_loss: f64,
    pub kl: f64,
    pub mean_reward: f64,
    pub grad_norm: f64,
}

/// Gradient of the GRPO objective, accumulated over `chunk`-step pieces of
/// every trajectory (`chunk = num_steps` gives the one-pass gradient).
pub fn grpo_gradient(policy: &WorldModel, reference: &WorldModel, groups: &[RolloutGroup], cfg: &RLConfig, chunk: usize) -> Result<(ParamSet, UpdateStats)> {
    if groups.is_empty() {
        return Err(Error::invalid("no rollout groups"));
    }
    if chunk == 0 || cfg.num_steps % chunk != 0 {
        return Err(Error::invalid(format!("chunk {chunk} does not divide {} steps", cfg.num_steps)));
    }
    let norm = groups.iter().map(|g| g.trajectories.len()).sum::<usize>() as f64;
    let mut acc = ParamSet::new();
    let mut stats = UpdateStats::default();
    for group in groups {
        for traj in &group.trajectories {
            if traj.transitions.len() != cfg.num_steps {
                return Err(Error::invalid("trajectory length differs from num_steps"));
            }
            for (ci, start) in (0..cfg.num_steps).step_by(chunk).enumerate() {
                let mut g = Graph::new();
                let mut b = Binder::trainable(&policy.params);
                let terms = steps_loss(&mut g, &mut b, policy, reference, &group.condition, traj, start..start + chunk, cfg, norm)?;
                stats.loss += g.value(terms.loss).item();
                stats.policy_loss += terms.policy;
                stats.kl += terms.kl;
                let grads = b.gradients(&g.backward(terms.loss)?);
                if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
                    return Err(Error::NonFinite {
                        step: ci,
                        what: format!("gradient of `{name}` in chunk {ci}"),
                    });
                }
                accumulate(&mut acc, grads);
            }
        }
    }
    stats.grad_norm = acc.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    let rewards: Vec<f64> = groups.iter().filter_map(|g| g.rewards()).flatten().collect();
    if !rewards.is_empty() {
        stats.mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    }
    Ok((acc, stats))
}

/// Policy, frozen reference, optimizer state and the EMA release weights.
pub struct GrpoTrainer {
    pub policy: WorldModel,
    reference: WorldModel,
    pub ema: Ema,
    pub cfg: RLConfig,
    opt: AdamW,
}

impl GrpoTrainer {
    pub fn new(model: WorldModel, cfg: RLConfig) -> Result<Self> {
        cfg.validate()?;
        let ema = Ema::new(&model.params, cfg.ema_decay);
        Ok(Self {
            reference: model.clone(),
            policy: model,
            ema,
            cfg,
            opt: AdamW::new(),
        })
    }

    pub fn reference(&self) -> &WorldModel {
        &self.reference
    }

    pub fn ema_model(&self) -> WorldModel {
        WorldModel {
            config: self.policy.config.clone(),
            params: self.ema.shadow.clone(),
        }
    }

    /// Roll out one group per condition, concurrently, each from its own
    /// seed-derived stream.
    pub fn rollouts(&self, conditions: &[RlCondition], update: usize) -> Result<Vec<RolloutGroup>> {
        std::thread::scope(|s| {
            let handles: Vec<_> = conditions
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let seed = self
                        .cfg
                        .seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(((update as u64) << 20) | i as u64);
                    s.spawn(move || rollout_group(&self.policy, c, &self.cfg, &mut ChaCha8Rng::seed_from_u64(seed)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("rollout worker panicked"))))
                .collect()
        })
    }

    /// Enqueue every group's final latents, then collect rewards and advantages.
    pub fn score(&self, groups: &mut [RolloutGroup], client: &dyn RewardClient) -> Result<()> {
        let mut ids = Vec::with_capacity(groups.len());
        for g in groups.iter() {
            let items = g.trajectories.iter().map(|t| Item::Latent(t.final_latent.clone())).collect();
            ids.push(client.enqueue(items, &self.cfg.reward_types)?);
        }
        let timeout = Duration::from_secs_f64(self.cfg.reward_timeout_s);
        for (g, id) in groups.iter_mut().zip(ids) {
            let rec = client.wait(id, timeout)?;
            let results = match (rec.status, rec.results) {
                (crate::rewardsvc::TaskStatus::Done, Some(r)) if r.len() == g.trajectories.len() => r,
                _ => {
                    return Err(Error::Reward {
                        task: id,
                        reason: rec.error.unwrap_or_else(|| "reward task failed".into()),
                    })
                }
            };
            let adv = compute_advantages(&results.iter().map(|r| r.sum).collect::<Vec<_>>())?;
            for ((t, r), a) in g.trajectories.iter_mut().zip(results).zip(adv) {
                t.reward = Some(r);
                t.advantage = a;
            }
        }
        Ok(())
    }

    /// One optimizer step from chunk-accumulated gradients, then EMA.
    pub fn update(&mut self, groups: &[RolloutGroup], update: usize) -> Result<UpdateStats> {
        let (grads, mut stats) = grpo_gradient(&self.policy, &self.reference, groups, &self.cfg, self.cfg.grad_chunk)?;
        self.opt.step(&mut self.policy.params, &grads, self.cfg.lr, self.cfg.betas, self.cfg.eps, self.cfg.weight_decay)?;
        self.ema.update(&self.policy.params);
        stats.update = update;
        Ok(stats)
    }

    /// `cfg.updates` rounds of rollout → reward → update. Conditions are
    /// cycled `batch_conditions` at a time.
    pub fn run(&mut self, conditions: &[RlCondition], client: &dyn RewardClient, mut log: Option<&mut dyn Write>) -> Result<Vec<UpdateStats>> {
        if conditions.is_empty() {
            return Err(Error::invalid("no RL conditions"));
        }
        let mut out = Vec::with_capacity(self.cfg.updates);
        for u in 0..self.cfg.updates {
            let batch: Vec<RlCondition> = (0..self.cfg.batch_conditions)
                .map(|j| conditions[(u * self.cfg.batch_conditions + j) % conditions.len()].clone())
                .collect();
            let mut groups = self.rollouts(&batch, u)?;
            self.score(&mut groups, client)?;
            let stats = self.update(&groups, u)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &stats)?;
                w.write_all(b"\n")?;
            }
            out.push(stats);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_hand_example() {
        let a = compute_advantages(&[1.0, 2.0, 3.0]).unwrap();
        let s = 1.5f64.sqrt();
        for (x, y) in a.iter().zip([-s, 0.0, s]) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(compute_advantages(&[4.0, 4.0]).unwrap(), vec![0.0, 0.0]);
        assert!(compute_advantages(&[1.0]).is_err());
    }

    #[test]
    fn config_rules() {
        let mut c = RLConfig::default();
        assert_eq!(c.num_chunks(), 10);
        assert_eq!(c.total_rollouts(), 65_536);
        c.grad_chunk = 3;
        assert!(c.validate().is_err());
    }
}
