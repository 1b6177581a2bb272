//! Flow-matching mathematics on the linear path `x_t = (1 - t) x + t ε`.
//!
//! `t = 0` is clean data and `t = 1` is pure noise; the regression target is
//! the velocity `ε - x`, and generation integrates `dx/dt = u` from 1 down to 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{replace_in_place, ConditioningSpec};
use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Tensor};
use crate::worldmodel::text::TextEmbedding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepSamplerConfig {
    /// Logit-normal location.
    pub mu: f64,
    /// Logit-normal scale.
    pub sigma: f64,
    /// Shift parameter; 1 disables the shift.
    pub beta: f64,
    /// Share of draws taken from the top noise band.
    pub high_noise_fraction: f64,
    /// Width of that band, counted down from `t = 1`.
    pub high_noise_quantile: f64,
}

impl Default for TimestepSamplerConfig {
    fn default() -> Self {
        Self {
            mu: 0.0,
            sigma: 1.0,
            beta: 1.0,
            high_noise_fraction: 0.05,
            high_noise_quantile: 0.02,
        }
    }
}

impl TimestepSamplerConfig {
    pub fn with_beta(beta: f64) -> Self {
        Self {
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("sigma must be positive"));
        }
        if !(self.beta >= 1.0) {
            return Err(Error::invalid("beta must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.high_noise_fraction) {
            return Err(Error::invalid("high_noise_fraction must lie in [0, 1]"));
        }
        if !(self.high_noise_quantile > 0.0 && self.high_noise_quantile < 1.0) {
            return Err(Error::invalid("high_noise_quantile must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// `t_s = βt / (1 + (β - 1)t)`.
pub fn shift_timestep(t: f64, beta: f64) -> f64 {
    beta * t / (1.0 + (beta - 1.0) * t)
}

const T_EPS: f64 = 1e-7;

/// Shifted logit-normal draw; with probability `high_noise_fraction` the
/// draw comes from the high-noise band instead. [`TimestepSampler`] gives
/// an exact share.
pub fn sample_timestep(cfg: &TimestepSamplerConfig, rng: &mut impl Rng) -> f64 {
    if cfg.high_noise_fraction > 0.0 && rng.random_bool(cfg.high_noise_fraction) {
        return high_noise_draw(cfg, rng);
    }
    base_draw(cfg, rng)
}

fn base_draw(cfg: &TimestepSamplerConfig, rng: &mut impl Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    let t = 1.0 / (1.0 + (-(cfg.mu + cfg.sigma * z)).exp());
    shift_timestep(t, cfg.beta).clamp(T_EPS, 1.0 - T_EPS)
}

fn high_noise_draw(cfg: &TimestepSamplerConfig, rng: &mut impl Rng) -> f64 {
    let lo = 1.0 - cfg.high_noise_quantile;
    let u: f64 = rng.random();
    (lo + u * cfg.high_noise_quantile).min(1.0 - T_EPS)
}

/// Stateful sampler that routes an exact share of draws to the high-noise
/// band: after `n` draws, `floor(n · high_noise_fraction)` came from it.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepSampler {
    pub cfg: TimestepSamplerConfig,
    drawn: u64,
    high: u64,
}

impl TimestepSampler {
    pub fn new(cfg: TimestepSamplerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, drawn: 0, high: 0 })
    }

    pub fn draws(&self) -> u64 {
        self.drawn
    }

    pub fn sample(&mut self, rng: &mut impl Rng) -> f64 {
        self.drawn += 1;
        let quota = (self.drawn as f64 * self.cfg.high_noise_fraction).floor() as u64;
        if self.high < quota {
            self.high += 1;
            high_noise_draw(&self.cfg, rng)
        } else {
            base_draw(&self.cfg, rng)
        }
    }
}

pub fn interpolate(x: &LatentTensor, eps: &LatentTensor, t: f64) -> Result<LatentTensor> {
    x.ensure_same_shape(eps, "interpolate")?;
    if t == 0.0 {
        return Ok(x.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    Ok(x.zip_map(eps, |a, b| (1.0 - t) * a + t * b))
}

pub fn velocity_target(x: &LatentTensor, eps: &LatentTensor) -> Result<LatentTensor> {
    x.ensure_same_shape(eps, "velocity_target")?;
    Ok(eps.zip_map(x, |e, a| e - a))
}

/// Mean squared error over elements whose leading-axis (latent frame) mask is 1.
pub fn fm_loss(pred: &LatentTensor, target: &LatentTensor, loss_mask: &[f64]) -> Result<f64> {
    pred.ensure_same_shape(target, "fm_loss")?;
    if loss_mask.len() != pred.len0() {
        return Err(Error::shape(format!(
            "loss mask of {} entries for {} latent frames",
            loss_mask.len(),
            pred.len0()
        )));
    }
    let per = pred.stride0();
    let mut sum = 0.0;
    let mut count = 0.0;
    for (f, &m) in loss_mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let d: f64 = pred
            .frame(f)
            .iter()
            .zip(target.frame(f))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        sum += m * d;
        count += m * per as f64;
    }
    if count == 0.0 {
        return Err(Error::invalid("loss mask selects no elements"));
    }
    Ok(sum / count)
}

/// Standard-normal tensor of the given shape.
pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// A velocity predictor `u(x_t, t, c)`.
pub trait VelocityModel {
    /// `text = None` selects the unconditional (null-text) branch.
    fn velocity(
        &self,
        x_t: &LatentTensor,
        cond: &ConditioningSpec,
        t: f64,
        text: Option<&TextEmbedding>,
    ) -> Result<LatentTensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 20,
            guidance_scale: 3.0,
            seed: 0,
        }
    }
}

/// Uniform time grid `1 = t_0 > t_1 > … > t_N = 0`.
pub fn time_grid(num_steps: usize) -> Vec<f64> {
    (0..=num_steps)
        .map(|k| 1.0 - k as f64 / num_steps as f64)
        .collect()
}

/// `u_uncond + s (u_cond - u_uncond)`; the conditional branch is skipped at `s = 0`.
pub fn guided_velocity(
    model: &dyn VelocityModel,
    x: &LatentTensor,
    cond: &ConditioningSpec,
    t: f64,
    text: &TextEmbedding,
    scale: f64,
) -> Result<LatentTensor> {
    let uncond = model.velocity(x, cond, t, None)?;
    if scale == 0.0 {
        return Ok(uncond);
    }
    let c = model.velocity(x, cond, t, Some(text))?;
    Ok(uncond.zip_map(&c, |u, v| u + scale * (v - u)))
}

/// Deterministic Euler integration from Gaussian noise at `t = 1` to `t = 0`.
/// Condition frames are re-imposed before the first and after every step.
pub fn euler_sample(
    model: &dyn VelocityModel,
    cond: &ConditioningSpec,
    text: &TextEmbedding,
    latent_shape: &[usize],
    cfg: &SamplerConfig,
) -> Result<LatentTensor> {
    if cfg.num_steps == 0 {
        return Err(Error::invalid("num_steps must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = gaussian(latent_shape, &mut rng);
    replace_in_place(&mut x, cond)?;
    let grid = time_grid(cfg.num_steps);
    for w in grid.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let u = guided_velocity(model, &x, cond, t, text, cfg.guidance_scale)?;
        let dt = t_next - t;
        for (xv, uv) in x.data_mut().iter_mut().zip(u.data()) {
            *xv += dt * uv;
        }
        replace_in_place(&mut x, cond)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_examples() {
        for t in [0.0, 0.1, 0.5, 0.93, 1.0] {
            assert_eq!(shift_timestep(t, 1.0), t);
        }
        assert!((shift_timestep(0.5, 5.0) - 2.5 / 3.0).abs() < 1e-12);
        assert_eq!(shift_timestep(0.0, 5.0), 0.0);
        assert_eq!(shift_timestep(1.0, 5.0), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TimestepSamplerConfig::default().validate().is_ok());
        let mut c = TimestepSamplerConfig::default();
        c.sigma = 0.0;
        assert!(c.validate().is_err());
        let c = TimestepSamplerConfig::with_beta(0.5);
        assert!(c.validate().is_err());
        let mut c = TimestepSamplerConfig::default();
        c.high_noise_quantile = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let x = Tensor::from_fn(&[2, 1, 1, 3], |i| i as f64 * 0.3 - 1.0);
        let e = Tensor::from_fn(&[2, 1, 1, 3], |i| (i as f64).cos());
        assert_eq!(interpolate(&x, &e, 0.0).unwrap(), x);
        assert_eq!(interpolate(&x, &e, 1.0).unwrap(), e);
        let z = Tensor::zeros(&[1, 1, 1, 2]);
        let two = Tensor::full(&[1, 1, 1, 2], 2.0);
        assert_eq!(interpolate(&z, &two, 0.5).unwrap(), Tensor::full(&[1, 1, 1, 2], 1.0));
        assert!(interpolate(&z, &x, 0.5).is_err());
    }

    #[test]
    fn velocity_examples() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let e = Tensor::new(vec![2], vec![3.0, 1.0]).unwrap();
        assert_eq!(velocity_target(&x, &e).unwrap().data(), &[2.0, -1.0]);
        assert_eq!(velocity_target(&x, &x).unwrap().data(), &[0.0, 0.0]);
        let z = Tensor::zeros(&[2]);
        assert_eq!(velocity_target(&z, &e).unwrap(), e);
    }

    #[test]
    fn loss_examples() {
        let p = Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap();
        let t = Tensor::zeros(&[2, 1]);
        assert_eq!(fm_loss(&p, &t, &[1.0, 0.0]).unwrap(), 4.0);
        assert_eq!(fm_loss(&p, &p, &[1.0, 1.0]).unwrap(), 0.0);
        let c = Tensor::full(&[2, 3], 0.7);
        assert!((fm_loss(&c, &Tensor::zeros(&[2, 3]), &[1.0, 1.0]).unwrap() - 0.49).abs() < 1e-12);
        assert!(fm_loss(&p, &t, &[0.0, 0.0]).is_err());
        assert!(fm_loss(&p, &t, &[1.0]).is_err());
    }

    struct Constant(f64);

    impl VelocityModel for Constant {
        fn velocity(
            &self,
            x_t: &LatentTensor,
            _: &ConditioningSpec,
            _: f64,
            text: Option<&TextEmbedding>,
        ) -> Result<LatentTensor> {
            // conditional branch is offset so guidance is observable
            let v = if text.is_some() { self.0 + 1.0 } else { self.0 };
            Ok(Tensor::full(x_t.shape(), v))
        }
    }

    fn empty_text() -> TextEmbedding {
        TextEmbedding::new(Tensor::zeros(&[1, crate::worldmodel::text::TEXT_DIM])).unwrap()
    }

    #[test]
    fn single_euler_step_by_hand() {
        let cond = ConditioningSpec::text2world(1);
        let cfg = SamplerConfig {
            num_steps: 1,
            guidance_scale: 0.0,
            seed: 9,
        };
        let shape = [1, 2, 1, 2];
        let out = euler_sample(&Constant(0.25), &cond, &empty_text(), &shape, &cfg).unwrap();
        let noise = gaussian(&shape, &mut ChaCha8Rng::seed_from_u64(9));
        for (o, n) in out.data().iter().zip(noise.data()) {
            assert_eq!(*o, n - 0.25);
        }
    }

    #[test]
    fn guidance_and_determinism() {
        let cond = ConditioningSpec::text2world(1);
        let shape = [1, 1, 2, 2];
        let cfg = SamplerConfig {
            num_steps: 4,
            guidance_scale: 2.0,
            seed: 1,
        };
        let a = euler_sample(&Constant(0.0), &cond, &empty_text(), &shape, &cfg).unwrap();
        let b = euler_sample(&Constant(0.0), &cond, &empty_text(), &shape, &cfg).unwrap();
        assert_eq!(a, b);
        let noise = gaussian(&shape, &mut ChaCha8Rng::seed_from_u64(1));
        // guided velocity = 0 + 2 * (1 - 0) = 2 over unit time
        for (o, n) in a.data().iter().zip(noise.data()) {
            assert!((o - (n - 2.0)).abs() < 1e-12);
        }
        let zero = SamplerConfig {
            num_steps: 0,
            ..cfg
        };
        assert!(euler_sample(&Constant(0.0), &cond, &empty_text(), &shape, &zero).is_err());
    }
}
