//! Shared fixtures for the criterion benches.

use rand::Rng;

use sbdm_core::cohort::{generate_synthetic_cohort, Cohort, SyntheticConfig};
use sbdm_core::rng::stream;
use sbdm_core::trainer::{TrainConfig, Trainer};

/// Default desk cohort and an untrained trainer over its mask.
pub fn desk() -> (Cohort, Trainer) {
    let cohort = generate_synthetic_cohort(&SyntheticConfig::default()).expect("default cohort");
    let trainer = Trainer::new(TrainConfig::default(), &cohort.mask).expect("default trainer");
    (cohort, trainer)
}

/// Deterministic uniform values in `[-1, 1)`.
pub fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, "bench");
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}
