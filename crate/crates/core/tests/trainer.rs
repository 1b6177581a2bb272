use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use worldflow_core::checkpoint::Checkpoint;
use worldflow_core::conditioning::{apply_frame_replacement, cond_mask, ConditioningSpec};
use worldflow_core::flowmatch::gaussian;
use worldflow_core::trainer::{lr_at, progressive_stage, AdamW, Ema, TrainConfig};
use worldflow_core::worldmodel::{ModelConfig, ParamSet, WorldModel};
use worldflow_core::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn single(name: &str, values: Vec<f64>) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(name.into(), Tensor::new(vec![values.len()], values).unwrap());
    p
}

#[test]
fn adamw_matches_hand_computation() {
    let mut params = single("w", vec![1.0, -2.0, 0.5]);
    let g1 = single("w", vec![0.1, -0.3, 0.0]);
    let g2 = single("w", vec![0.2, 0.1, -0.4]);
    let (lr, b1, b2, eps, wd) = (0.01, 0.9, 0.999, 1e-8, 0.1);
    let mut opt = AdamW::new();
    opt.step(&mut params, &g1, lr, (b1, b2), eps, wd).unwrap();
    opt.step(&mut params, &g2, lr, (b1, b2), eps, wd).unwrap();

    let start = [1.0, -2.0, 0.5];
    let grads = [[0.1, -0.3, 0.0], [0.2, 0.1, -0.4]];
    for i in 0..3 {
        let (mut x, mut m, mut v) = (start[i], 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let g = g[i];
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - f64::powi(b1, t as i32 + 1));
            let vhat = v / (1.0 - f64::powi(b2, t as i32 + 1));
            x -= lr * (mhat / (vhat.sqrt() + eps) + wd * x);
        }
        assert!((params["w"].data()[i] - x).abs() < 1e-10, "coordinate {i}");
    }
    assert_eq!(opt.steps_taken(), 2);
}

#[test]
fn adamw_rejects_unknown_parameters() {
    let mut params = single("w", vec![1.0]);
    let g = single("v", vec![1.0]);
    assert!(AdamW::new().step(&mut params, &g, 0.1, (0.9, 0.999), 1e-8, 0.0).is_err());
}

#[test]
fn ema_extremes() {
    let start = single("w", vec![1.0, 2.0]);
    let next = single("w", vec![5.0, -1.0]);
    let mut frozen = Ema::new(&start, 1.0);
    frozen.update(&next);
    assert_eq!(frozen.shadow, start);
    let mut follow = Ema::new(&start, 0.0);
    follow.update(&next);
    assert_eq!(follow.shadow, next);
    let mut half = Ema::new(&start, 0.5);
    half.update(&next);
    assert_eq!(half.shadow["w"].data(), &[3.0, 0.5]);
}

#[test]
fn checkpoint_resave_is_byte_identical() {
    let cfg = ModelConfig {
        num_layers: 1,
        model_dim: 16,
        ffn_dim: 8,
        adaln_lora_dim: 2,
        num_heads: 1,
        head_dim: 16,
        latent_channels: 2,
        text_dim: 4,
        ..ModelConfig::desk()
    };
    let mut m = WorldModel::new(cfg, 3).unwrap();
    m.perturb(4, 0.1);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    Checkpoint::from_model(&m, 17).save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded.step, 17);
    loaded.save(&b).unwrap();
    for f in std::fs::read_dir(&a).unwrap() {
        let name = f.unwrap().file_name();
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    // stored at f32
    for (k, t) in &loaded.params {
        for (x, y) in t.data().iter().zip(m.params[k].data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    assert!(loaded.into_model().is_ok());
}

#[test]
fn learning_rate_warms_up_then_decays() {
    let cfg = TrainConfig::desk(1000);
    let w = cfg.warmup_steps;
    assert!(w > 0);
    assert!(lr_at(0, &cfg).unwrap() < lr_at(w / 2, &cfg).unwrap());
    assert!((lr_at(w, &cfg).unwrap() - cfg.lr_peak).abs() < 1e-15);
    assert!(lr_at(w + 10, &cfg).unwrap() < cfg.lr_peak);
    assert_eq!(lr_at(1000, &cfg).unwrap(), 0.0);
    assert!(lr_at(1001, &cfg).is_err());
}

#[test]
fn rescaled_schedule_keeps_its_shape() {
    let cfg = TrainConfig::desk(2000).with_max_steps(300);
    assert_eq!(cfg.stage_schedule.iter().map(|s| s.steps).sum::<usize>(), 300);
    assert!(cfg.warmup_steps < 300);
    cfg.validate().unwrap();
    let res: Vec<usize> = cfg.stage_schedule.iter().map(|s| s.resolution).collect();
    assert!(res.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(progressive_stage(299, &cfg).unwrap().resolution, *res.last().unwrap());
}

proptest! {
    #[test]
    fn frame_replacement_is_idempotent(seed in any::<u64>(), cond_frames in prop_oneof![Just(0usize), Just(1), Just(5), Just(9)]) {
        let mut r = rng(seed);
        let clean = gaussian(&[4, 2, 2, 2], &mut r);
        let generated = gaussian(&[4, 2, 2, 2], &mut r);
        let spec = ConditioningSpec::new(cond_frames, 4).unwrap().with_clean_latent(&clean).unwrap();
        let once = apply_frame_replacement(&generated, &spec).unwrap();
        prop_assert_eq!(&apply_frame_replacement(&once, &spec).unwrap(), &once);
        for (f, &m) in spec.mask.iter().enumerate() {
            let src = if m { &clean } else { &generated };
            prop_assert_eq!(once.frame(f), src.frame(f));
        }
    }

    #[test]
    fn condition_mask_is_a_prefix(cond in 0usize..20, frames in 1usize..8) {
        if let Ok(mask) = cond_mask(cond, frames) {
            prop_assert_eq!(mask.len(), frames);
            let k = mask.iter().filter(|&&m| m).count();
            prop_assert!(mask[..k].iter().all(|&m| m));
            prop_assert_eq!(k, if cond == 0 { 0 } else { 1 + (cond - 1).div_ceil(4) });
        }
    }
}
