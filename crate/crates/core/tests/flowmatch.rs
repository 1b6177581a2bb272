use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use worldflow_core::conditioning::ConditioningSpec;
use worldflow_core::flowmatch::{
    euler_sample, fm_loss, gaussian, interpolate, sample_timestep, shift_timestep, time_grid, velocity_target, SamplerConfig,
    TimestepSampler, TimestepSamplerConfig, VelocityModel,
};
use worldflow_core::worldmodel::text::TextEmbedding;
use worldflow_core::{LatentTensor, Result, Tensor};

/// `u = a·x + b` with a different `b` for the null branch.
struct Affine {
    a: f64,
    b_cond: f64,
    b_null: f64,
}

impl VelocityModel for Affine {
    fn velocity(&self, x: &LatentTensor, _c: &ConditioningSpec, _t: f64, text: Option<&TextEmbedding>) -> Result<LatentTensor> {
        let b = if text.is_some() { self.b_cond } else { self.b_null };
        Ok(x.map(|v| self.a * v + b))
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn text() -> TextEmbedding {
    TextEmbedding::new(Tensor::full(&[1, 4], 0.5)).unwrap()
}

proptest! {
    #[test]
    fn interpolation_hits_both_endpoints(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = gaussian(&[2, 3, 2, 2], &mut r);
        let e = gaussian(&[2, 3, 2, 2], &mut r);
        prop_assert_eq!(interpolate(&x, &e, 0.0).unwrap(), x.clone());
        prop_assert_eq!(interpolate(&x, &e, 1.0).unwrap(), e.clone());
    }

    #[test]
    fn path_derivative_is_the_target(seed in any::<u64>(), t in 0.01f64..0.99) {
        let mut r = rng(seed);
        let x = gaussian(&[1, 2, 2, 2], &mut r);
        let e = gaussian(&[1, 2, 2, 2], &mut r);
        let h = 1e-6;
        let hi = interpolate(&x, &e, t + h).unwrap();
        let lo = interpolate(&x, &e, t - h).unwrap();
        let v = velocity_target(&x, &e).unwrap();
        for ((a, b), want) in hi.data().iter().zip(lo.data()).zip(v.data()) {
            prop_assert!(((a - b) / (2.0 * h) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn shift_is_monotone_and_fixes_endpoints(beta in 1.0f64..20.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        prop_assert_eq!(shift_timestep(0.0, beta), 0.0);
        prop_assert_eq!(shift_timestep(1.0, beta), 1.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(shift_timestep(lo, beta) < shift_timestep(hi, beta));
        prop_assert!(shift_timestep(lo, beta) >= lo);
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), mask in proptest::collection::vec(0.0f64..=1.0, 3)) {
        prop_assume!(mask.iter().any(|&m| m > 0.0));
        let mut r = rng(seed);
        let p = gaussian(&[3, 2, 2, 2], &mut r);
        let q = gaussian(&[3, 2, 2, 2], &mut r);
        prop_assert!(fm_loss(&p, &q, &mask).unwrap() >= 0.0);
        prop_assert_eq!(fm_loss(&p, &p, &mask).unwrap(), 0.0);
    }

    #[test]
    fn sampler_is_deterministic(seed in any::<u64>(), steps in 1usize..12) {
        let m = Affine { a: -0.3, b_cond: 0.2, b_null: -0.1 };
        let cfg = SamplerConfig { num_steps: steps, guidance_scale: 2.5, seed };
        let cond = ConditioningSpec::text2world(2);
        let a = euler_sample(&m, &cond, &text(), &[2, 1, 2, 2], &cfg).unwrap();
        let b = euler_sample(&m, &cond, &text(), &[2, 1, 2, 2], &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn timesteps_stay_open(seed in any::<u64>(), beta in 1.0f64..10.0) {
        let cfg = TimestepSamplerConfig::with_beta(beta);
        let mut r = rng(seed);
        let mut s = TimestepSampler::new(cfg.clone()).unwrap();
        for _ in 0..200 {
            let a = sample_timestep(&cfg, &mut r);
            let b = s.sample(&mut r);
            prop_assert!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0);
        }
    }
}

#[test]
fn quota_holds_at_every_prefix() {
    let cfg = TimestepSamplerConfig::with_beta(3.0);
    let frac = cfg.high_noise_fraction;
    let lo = 1.0 - cfg.high_noise_quantile;
    let mut s = TimestepSampler::new(cfg).unwrap();
    let mut r = rng(3);
    let mut high = 0u64;
    for n in 1..=20_000u64 {
        if s.sample(&mut r) >= lo {
            high += 1;
        }
        // base draws can also land in the band, never fewer than the quota
        assert!(high >= (n as f64 * frac).floor() as u64, "prefix {n}: {high}");
    }
    assert_eq!(s.draws(), 20_000);
}

#[test]
fn euler_matches_closed_form() {
    // u = a·x with a constant: each step multiplies by (1 − a/N)
    let (a, n) = (0.4, 10);
    let m = Affine { a, b_cond: 0.0, b_null: 0.0 };
    let cfg = SamplerConfig { num_steps: n, guidance_scale: 0.0, seed: 5 };
    let out = euler_sample(&m, &ConditioningSpec::text2world(1), &text(), &[1, 1, 2, 2], &cfg).unwrap();
    let x0 = gaussian(&[1, 1, 2, 2], &mut rng(5));
    let factor = (1.0 - a / n as f64).powi(n as i32);
    for (o, x) in out.data().iter().zip(x0.data()) {
        assert!((o - x * factor).abs() < 1e-12);
    }
}

#[test]
fn guidance_extrapolates_from_null_branch() {
    // constant velocities: x_0 = x_1 − (b_null + s (b_cond − b_null))
    let m = Affine { a: 0.0, b_cond: 1.0, b_null: 0.25 };
    let cfg = SamplerConfig { num_steps: 4, guidance_scale: 3.0, seed: 8 };
    let out = euler_sample(&m, &ConditioningSpec::text2world(1), &text(), &[1, 1, 1, 2], &cfg).unwrap();
    let x1 = gaussian(&[1, 1, 1, 2], &mut rng(8));
    for (o, x) in out.data().iter().zip(x1.data()) {
        assert!((o - (x - 2.5)).abs() < 1e-12);
    }
}

#[test]
fn grid_runs_from_one_to_zero() {
    let g = time_grid(4);
    assert_eq!(g, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
}

#[test]
fn zero_steps_is_an_error() {
    let m = Affine { a: 0.0, b_cond: 0.0, b_null: 0.0 };
    let cfg = SamplerConfig { num_steps: 0, ..SamplerConfig::default() };
    assert!(euler_sample(&m, &ConditioningSpec::text2world(1), &text(), &[1, 1, 1, 1], &cfg).is_err());
}
