//! Shared fixtures for the benchmarks.

use cotnav_core::cotforge::SyntheticCaptioner;
use cotnav_core::envworld::{generate_episode, generate_world, landmark_pool};
use cotnav_core::policy::{PolicyConfig, PolicyParams, Vocabulary};
use cotnav_core::rng::rng_from;
use cotnav_core::trainer::{build_step_samples, StepSample};
use cotnav_core::cotforge::LabelStyle;

/// A default-size policy and a handful of teacher-forced step samples.
pub fn fixture() -> (Vocabulary, PolicyParams, Vec<StepSample>) {
    let vocab = Vocabulary::new(&landmark_pool(48));
    let params = PolicyParams::init(PolicyConfig::default(), vocab.len(), &mut rng_from(1)).expect("valid config");
    let world = generate_world(3, 20, 3.0, 48).expect("valid world");
    let mut samples = Vec::new();
    for seed in 0..4 {
        let episode = generate_episode(&world, seed, 2, 4).expect("feasible window");
        samples.extend(
            build_step_samples(&world, &episode, &vocab, &SyntheticCaptioner::noiseless(), LabelStyle::Formalized, seed)
                .expect("valid episode"),
        );
    }
    (vocab, params, samples)
}
