//! Fixtures shared by the benchmark targets.

use inkvit_core::config::RunConfig;
use inkvit_core::recognizer::Charset;
use inkvit_core::synth::SMOKE_WORDS;
use inkvit_core::training::TrainState;
use inkvit_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Untrained state with the smoke preset's network sizes.
pub fn smoke_state() -> TrainState {
    let charset = Charset::from_texts(SMOKE_WORDS);
    TrainState::new(RunConfig::smoke(), charset, vec!["a".into(), "b".into()]).unwrap()
}
