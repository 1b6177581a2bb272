use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use worldflow_core::autodiff::Graph;
use worldflow_core::flowmatch::gaussian;
use worldflow_core::worldmodel::patch::{pack_multiview, patchify, unpack_multiview, unpatchify};
use worldflow_core::worldmodel::rope::rope_for_coords;
use worldflow_core::worldmodel::text::{HashedTextEncoder, TextEmbedding};
use worldflow_core::worldmodel::tokenizer::CausalTokenizer;
use worldflow_core::worldmodel::{attach_control_branch, ControlConfig, ModelConfig, ModelInput, WorldModel};
use worldflow_core::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 16,
        ffn_dim: 16,
        adaln_lora_dim: 4,
        num_heads: 2,
        head_dim: 8,
        latent_channels: 3,
        text_dim: 8,
        ..ModelConfig::desk()
    }
}

fn rotate(v: &[f64], coord: [f64; 3]) -> Vec<f64> {
    let rot = Rc::new(rope_for_coords(&[coord], v.len()).unwrap());
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap());
    let y = g.rotate_pairs(x, rot).unwrap();
    g.value(y).data().to_vec()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_round_trips(seed in any::<u64>(), t in 1usize..4, c in 1usize..5, h2 in 1usize..4, w2 in 1usize..4) {
        let x = gaussian(&[t, c, 2 * h2, 2 * w2], &mut rng(seed));
        let tokens = patchify(&x).unwrap();
        prop_assert_eq!(tokens.shape(), &[t * h2 * w2, 4 * c][..]);
        prop_assert_eq!(unpatchify(&tokens, [t, c, 2 * h2, 2 * w2]).unwrap(), x);
    }

    #[test]
    fn rope_scores_depend_on_offset_only(
        seed in any::<u64>(),
        p in proptest::array::uniform3(-20.0f64..20.0),
        q in proptest::array::uniform3(-20.0f64..20.0),
        shift in proptest::array::uniform3(-50.0f64..50.0),
    ) {
        let mut r = rng(seed);
        let a: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
        let moved = |c: [f64; 3]| [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]];
        let s0 = dot(&rotate(&a, p), &rotate(&b, q));
        let s1 = dot(&rotate(&a, moved(p)), &rotate(&b, moved(q)));
        prop_assert!((s0 - s1).abs() < 1e-9, "{} vs {}", s0, s1);
    }

    #[test]
    fn rope_preserves_norm(seed in any::<u64>(), p in proptest::array::uniform3(-100.0f64..100.0)) {
        let mut r = rng(seed);
        let a: Vec<f64> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
        prop_assert!((dot(&a, &a) - dot(&rotate(&a, p), &rotate(&a, p))).abs() < 1e-12);
    }

    #[test]
    fn multiview_round_trips(seed in any::<u64>(), views in 1usize..5, frames in 1usize..4, e in 1usize..4) {
        let mut r = rng(seed);
        let vs: Vec<Tensor> = (0..views).map(|_| gaussian(&[frames, 2, 2, 2], &mut r)).collect();
        let emb = gaussian(&[views, e], &mut r);
        let packed = pack_multiview(&vs, &emb).unwrap();
        prop_assert_eq!(packed.shape(), &[views * frames, 2 + e, 2, 2][..]);
        prop_assert_eq!(unpack_multiview(&packed, views, e).unwrap(), vs);
    }

    #[test]
    fn tokenizer_round_trips(seed in any::<u64>(), chunks in 0usize..3) {
        let tok = CausalTokenizer::default();
        let frames = 1 + 4 * chunks;
        let mut r = rng(seed);
        let v = Tensor::from_fn(&[frames, 3, 16, 8], |_| r.random::<f64>());
        let lat = tok.encode(&v).unwrap();
        prop_assert_eq!(lat.shape(), &[1 + chunks, 768, 2, 1][..]);
        prop_assert_eq!(tok.decode(&lat).unwrap(), v);
    }
}

#[test]
fn control_branch_starts_neutral() {
    let mut base = WorldModel::new(tiny(), 1).unwrap();
    base.perturb(2, 0.05);
    let control = ControlConfig::evenly(2, 1, 3).unwrap();
    let with = attach_control_branch(&base, control).unwrap();
    let x = gaussian(&[2, 3, 4, 4], &mut rng(3));
    let hint = gaussian(&[2, 3, 4, 4], &mut rng(4));
    let text = HashedTextEncoder::with_dim(8).encode("a red square");
    let mask = [1.0, 0.0];
    let plain = base.predict(&ModelInput::new(&x, &mask, 0.3, Some(&text))).unwrap();
    let mut input = ModelInput::new(&x, &mask, 0.3, Some(&text));
    input.control = Some(&hint);
    assert_eq!(with.predict(&input).unwrap(), plain);
    for (k, v) in &base.params {
        assert_eq!(&with.params[k], v, "{k} changed");
    }
}

#[test]
fn predictions_are_deterministic_and_shaped() {
    let m = WorldModel::new(tiny(), 7).unwrap();
    let x = gaussian(&[3, 3, 4, 2], &mut rng(8));
    let t = TextEmbedding::new(gaussian(&[2, 8], &mut rng(9))).unwrap();
    let mask = [0.0; 3];
    let a = m.predict(&ModelInput::new(&x, &mask, 0.5, Some(&t))).unwrap();
    let b = m.predict(&ModelInput::new(&x, &mask, 0.5, Some(&t))).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), x.shape());
    assert!(a.is_finite());
}

#[test]
fn same_seed_same_weights() {
    assert_eq!(WorldModel::new(tiny(), 5).unwrap(), WorldModel::new(tiny(), 5).unwrap());
    assert_ne!(WorldModel::new(tiny(), 5).unwrap(), WorldModel::new(tiny(), 6).unwrap());
}

#[test]
fn bad_inputs_are_rejected() {
    let m = WorldModel::new(tiny(), 1).unwrap();
    let odd = gaussian(&[1, 3, 3, 4], &mut rng(1));
    assert!(m.predict(&ModelInput::new(&odd, &[0.0], 0.5, None)).is_err());
    let x = gaussian(&[1, 3, 4, 4], &mut rng(1));
    let wide = TextEmbedding::new(gaussian(&[1, 9], &mut rng(2))).unwrap();
    assert!(m.predict(&ModelInput::new(&x, &[0.0], 0.5, Some(&wide))).is_err());
    let mut cfg = tiny();
    cfg.head_dim = 12;
    assert!(WorldModel::new(cfg, 0).is_err());
}
