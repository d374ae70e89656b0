//! Fixtures shared by the kernel benchmarks.

use foresight::aio_hmm::{AioHmmModel, Variant};
use foresight::fusion::{Arch, FusionRnnModel, ModelDims};
use foresight::numerics::Rng;
use foresight::sample::SequenceSample;
use foresight::synth::{generate, ScenarioConfig};

/// A randomly initialized model at the default sizes.
pub fn standard_model(arch: Arch, seed: u64) -> FusionRnnModel {
    FusionRnnModel::init(arch, ModelDims::standard(5), &mut Rng::new(seed)).expect("valid dims")
}

/// Synthetic sequences from the default generator.
pub fn corpus(n: usize, seed: u64) -> Vec<SequenceSample> {
    generate(&ScenarioConfig { seed, ..ScenarioConfig::default() }, n).expect("valid config")
}

/// A blank AIO-HMM nudged off its symmetric starting point.
pub fn hmm(states: usize, seed: u64) -> AioHmmModel {
    let mut m = AioHmmModel::blank(Variant::Aio, states, 6, 9).expect("valid sizes");
    let mut rng = Rng::new(seed);
    for mu in &mut m.mu {
        for v in mu.iter_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
    m
}
