use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use worldflow_core::rewardsvc::{
    Axis, BrightnessReward, CheckerboardReward, Item, MotionSmoothnessReward, RewardClient, RewardScorer, RewardService,
    ServiceConfig, TaskStatus, TokenizerDecoder,
};
use worldflow_core::worldmodel::tokenizer::CausalTokenizer;
use worldflow_core::{Tensor, VideoTensor};

/// Counts how often each clip (keyed by its first value) is scored.
struct Counting {
    calls: Arc<Mutex<HashMap<u64, usize>>>,
    total: Arc<AtomicUsize>,
}

impl RewardScorer for Counting {
    fn name(&self) -> &str {
        "count"
    }
    fn axis(&self) -> Axis {
        Axis::MotionQuality
    }
    fn score(&self, v: &VideoTensor) -> worldflow_core::Result<f64> {
        *self.calls.lock().unwrap().entry(v.data()[0].to_bits()).or_default() += 1;
        self.total.fetch_add(1, Ordering::SeqCst);
        Ok(v.data()[0])
    }
}

fn clip(v: f64) -> Item {
    Item::Video(Tensor::full(&[2, 1, 2, 2], v))
}

#[test]
fn each_item_is_scored_at_most_once() {
    let calls = Arc::new(Mutex::new(HashMap::new()));
    let total = Arc::new(AtomicUsize::new(0));
    let svc = RewardService::start(
        ServiceConfig {
            decode_workers: 3,
            score_workers: 3,
            channel_capacity: 2,
            persist: None,
        },
        Arc::new(TokenizerDecoder::default()),
        vec![Arc::new(Counting { calls: calls.clone(), total: total.clone() })],
    )
    .unwrap();
    let types = vec!["count".to_string()];
    let ids: Vec<_> = (0..40).map(|i| svc.enqueue(vec![clip(i as f64), clip(100.0 + i as f64)], &types).unwrap()).collect();
    for (i, id) in ids.iter().enumerate() {
        let rec = svc.wait(*id, Duration::from_secs(20)).unwrap();
        assert_eq!(rec.status, TaskStatus::Done);
        let res = rec.results.unwrap();
        assert_eq!(res.len(), 2);
        assert_eq!(res[0].motion_quality, i as f64);
        assert_eq!(res[1].motion_quality, 100.0 + i as f64);
    }
    svc.shutdown();
    assert_eq!(total.load(Ordering::SeqCst), 80);
    assert!(calls.lock().unwrap().values().all(|&c| c == 1));
}

#[test]
fn finished_records_do_not_change() {
    let svc = RewardService::start(
        ServiceConfig::default(),
        Arc::new(TokenizerDecoder::default()),
        vec![Arc::new(BrightnessReward { target: 0.5 })],
    )
    .unwrap();
    let types = vec!["brightness".to_string()];
    let id = svc.enqueue(vec![clip(0.2)], &types).unwrap();
    let first = svc.wait(id, Duration::from_secs(10)).unwrap();
    for i in 0..10 {
        svc.enqueue(vec![clip(i as f64 / 10.0)], &types).unwrap();
    }
    std::thread::sleep(Duration::from_millis(20));
    assert_eq!(svc.poll(id).unwrap(), first);
    assert!((first.results.unwrap()[0].visual_quality + 0.3).abs() < 1e-12);
}

#[test]
fn invalid_requests_are_refused() {
    let svc = RewardService::start(
        ServiceConfig::default(),
        Arc::new(TokenizerDecoder::default()),
        vec![Arc::new(BrightnessReward { target: 0.5 })],
    )
    .unwrap();
    assert!(svc.enqueue(vec![clip(0.0)], &["nope".to_string()]).is_err());
    assert!(svc.enqueue(vec![], &["brightness".to_string()]).is_err());
    assert!(svc.enqueue(vec![clip(0.0)], &[]).is_err());
    assert!(svc.poll(uuid::Uuid::new_v4()).is_err());
}

#[test]
fn latents_and_files_are_decoded() {
    let dir = tempfile::tempdir().unwrap();
    let video = Tensor::from_fn(&[5, 3, 8, 8], |i| (i % 7) as f64 / 7.0);
    let path = dir.path().join("clip.f32");
    video.write_raw(&path).unwrap();
    let latent = CausalTokenizer::default().encode(&video).unwrap();
    let svc = RewardService::start(
        ServiceConfig::default(),
        Arc::new(TokenizerDecoder::default()),
        vec![Arc::new(BrightnessReward { target: 0.0 })],
    )
    .unwrap();
    let types = vec!["brightness".to_string()];
    let res = svc
        .evaluate(vec![Item::Video(video.clone()), Item::Latent(latent), Item::Path(path)], &types, Duration::from_secs(10))
        .unwrap();
    let want = -video.mean();
    for r in &res {
        assert!((r.visual_quality - want).abs() < 1e-6);
        assert_eq!(r.sum, r.text_alignment + r.motion_quality + r.visual_quality);
    }
}

#[test]
fn persisted_records_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("tasks.jsonl");
    let start = || {
        RewardService::start(
            ServiceConfig { persist: Some(log.clone()), ..ServiceConfig::default() },
            Arc::new(TokenizerDecoder::default()),
            vec![Arc::new(BrightnessReward { target: 0.5 })],
        )
        .unwrap()
    };
    let svc = start();
    let id = svc.enqueue(vec![clip(0.5)], &["brightness".to_string()]).unwrap();
    let before = svc.wait(id, Duration::from_secs(10)).unwrap();
    svc.shutdown();
    assert_eq!(start().poll(id).unwrap(), before);
}

#[test]
fn builtin_scorers_behave() {
    let still = Tensor::full(&[3, 1, 4, 4], 0.3);
    assert_eq!(MotionSmoothnessReward.score(&still).unwrap(), 0.0);
    let ramp = Tensor::from_fn(&[4, 1, 1, 1], |i| i as f64);
    assert_eq!(MotionSmoothnessReward.score(&ramp).unwrap(), 0.0);
    let jerky = Tensor::new(vec![3, 1, 1, 1], vec![0.0, 1.0, 0.0]).unwrap();
    assert!(MotionSmoothnessReward.score(&jerky).unwrap() < 0.0);
    let board = CheckerboardReward { cell: 1 };
    // cell (0, 0) is dark
    let perfect = Tensor::from_fn(&[1, 1, 2, 2], |i| [0.0, 1.0, 1.0, 0.0][i]);
    assert!(board.score(&perfect).unwrap() > board.score(&Tensor::full(&[1, 1, 2, 2], 0.5)).unwrap());
}
