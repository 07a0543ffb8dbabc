//! Seeded fixtures shared by the benchmarks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deregime_core::data::Sample;
use deregime_core::gate::GateWeights;
use deregime_core::kernels::ReprBatch;
use deregime_core::likelihood::{LikelihoodKind, PredictiveState};
use deregime_core::svgp::ResidualPosterior;

/// `n` locations with simplex gates over `r` regimes and uniform features in `[-2, 2]`.
pub fn repr_batch(n: usize, r: usize, dg: usize, seed: u64) -> ReprBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ReprBatch::zeros(n, r, dg);
    for i in 0..n {
        let raw: Vec<f64> = (0..r).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for (k, v) in raw.iter().enumerate() {
            b.gates[(i, k)] = v / total;
        }
    }
    for f in b.features.iter_mut() {
        *f = DMatrix::from_fn(n, dg, |_, _| rng.random_range(-2.0..2.0));
    }
    b
}

pub fn student_t_state(r: usize, seed: u64) -> PredictiveState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..r).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    PredictiveState::new(
        0.1,
        GateWeights::new(raw.iter().map(|x| x / total).collect()).expect("simplex"),
        ResidualPosterior::new(0.05, 0.2).expect("positive variance"),
        (0..r).map(|_| rng.random_range(0.2..2.0)).collect(),
        (0..r).map(|_| rng.random_range(4.0..60.0)).collect(),
        LikelihoodKind::StudentTMixture,
    )
    .expect("valid state")
}

/// Noisy sinusoid windows of shape `lookback x channels` with `horizon`-step targets.
pub fn windows(n: usize, lookback: usize, horizon: usize, channels: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mut at = |t: usize| (phase + 0.3 * t as f64).sin() + 0.2 * rng.random_range(-1.0..1.0);
            let series: Vec<f64> = (0..(lookback + horizon) * channels).map(|k| at(k / channels)).collect();
            Sample {
                input: DMatrix::from_fn(lookback, channels, |t, d| series[t * channels + d]),
                target: DMatrix::from_fn(horizon, channels, |t, d| series[(lookback + t) * channels + d]),
                labels: Vec::new(),
                start: i,
            }
        })
        .collect()
}
