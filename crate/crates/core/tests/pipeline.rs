use cotnav_core::cotforge::{LabelStyle, SyntheticCaptioner};
use cotnav_core::envworld::{generate_episode, generate_world, landmark_pool};
use cotnav_core::metrics::{evaluate, SUCCESS_RADIUS};
use cotnav_core::policy::{PolicyConfig, PolicyParams, Vocabulary};
use cotnav_core::trainer::{build_step_samples, run_inference, train_stage1, train_stage2, TrainConfig, TrainData};

#[test]
fn two_stages_then_rollout() {
    let world = generate_world(3, 12, 3.0, 16).unwrap();
    let vocab = Vocabulary::new(&landmark_pool(16));
    let captions = SyntheticCaptioner::new(1, 0.1, 0.1, landmark_pool(16)).unwrap();
    let episodes: Vec<_> = (0..6).map(|s| generate_episode(&world, s, 2, 3).unwrap()).collect();
    let samples: Vec<_> = episodes
        .iter()
        .flat_map(|e| build_step_samples(&world, e, &vocab, &captions, LabelStyle::Formalized, 2).unwrap())
        .collect();
    let data = TrainData { train: samples[4..].to_vec(), val: samples[..4].to_vec() };
    let cfg = TrainConfig { batch_size: 4, stage1_steps: 8, stage2_steps: 4, eval_every: 4, ..TrainConfig::default() };
    let policy = PolicyConfig { d_model: 16, d_ff: 32, n_layers: 2, max_len: 256 };

    let (p1, r1) = train_stage1(&cfg, policy, &vocab, &data, 7).unwrap();
    assert_eq!(r1.stage, 1);
    assert_eq!(r1.steps.len(), 8);
    let (p2, r2) = train_stage2(p1.clone(), &cfg, &vocab, &data, LabelStyle::Formalized, 7).unwrap();
    assert_eq!(r2.stage, 2);
    assert_eq!(r2.steps.len(), 4);
    assert_ne!(p1, p2);

    let mut bytes = Vec::new();
    p2.write_checkpoint(&mut bytes).unwrap();
    let restored = PolicyParams::read_checkpoint(bytes.as_slice()).unwrap();
    for e in &episodes {
        let a = run_inference(&p2, &vocab, &world, e, Some(16)).unwrap();
        let b = run_inference(&restored, &vocab, &world, e, Some(16)).unwrap();
        assert_eq!(a.reasoning.len(), a.visited.len() - 1 + usize::from(a.stopped));
        let m = evaluate(&a, &world, SUCCESS_RADIUS).unwrap();
        assert!(m.spl <= m.sr && m.osr >= m.sr);
        // Checkpoints store f32, so only the decisions are compared.
        assert_eq!(a.visited, b.visited);
    }
}
