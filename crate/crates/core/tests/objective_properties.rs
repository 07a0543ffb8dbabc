use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deregime_core::data::{synth_generate, Dataset, Sample, SplitSpec, SynthSpec};
use deregime_core::encoder::Window;
use deregime_core::gate::GateWeights;
use deregime_core::kernels::{BaseKernel, KernelView, LocationRepr, MixGram, ReprBatch};
use deregime_core::likelihood::{LikelihoodKind, QuadratureRule};
use deregime_core::model::{Architecture, HeadKind, Model};
use deregime_core::training::{train, TrainConfig};

fn gp_arch(n: usize) -> Architecture {
    Architecture {
        head: HeadKind::DklRbf,
        lookback: 10,
        horizon: 1,
        channels: 1,
        width: 8,
        regimes: 1,
        feature_dim: 2,
        inducing: n,
        likelihood: LikelihoodKind::GaussianMixture,
        kernel: BaseKernel::Rbf,
        softmax_gate: false,
        deep_mean: false,
        residual_variance: false,
        shared_likelihood: false,
        sigma_floor_sq: 1e-4,
    }
}

/// Returns `(-objective, exact log marginal, jitter used)` for a random dataset and random `q`.
fn bound_case(n: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::init(gp_arch(n), &mut rng).unwrap();
    let samples: Vec<Sample> = (0..n)
        .map(|i| {
            let phase = std::f64::consts::TAU * (i as f64 + rng.random_range(0.0..0.5)) / n as f64;
            Sample {
                input: DMatrix::from_fn(10, 1, |t, _| (phase + 0.6 * t as f64).sin() + 0.1 * rng.random_range(-1.0..1.0)),
                target: DMatrix::from_fn(1, 1, |_, _| rng.random_range(-2.0..2.0)),
                labels: Vec::new(),
                start: i,
            }
        })
        .collect();
    let lay = model.layout.clone();
    model.params[lay.log_c.clone()].fill(rng.random_range(-1.5f64..0.5));
    model.params[lay.log_amp.clone()].fill(rng.random_range(-0.5f64..0.5));
    model.params[lay.offset.clone()].fill(rng.random_range(-0.5..0.5));
    let feats: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| model.head_outputs(&Window::new(s.input.clone(), 1).unwrap(), 1.0).unwrap().features)
        .collect();
    let spread = feats
        .iter()
        .flat_map(|a| feats.iter().map(move |b| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()))
        .fold(0.0f64, f64::max);
    model.params[lay.log_len.clone()].fill((0.1 * spread.max(1e-3)).ln());
    for (j, f) in feats.iter().enumerate() {
        for (d, v) in f.iter().enumerate() {
            model.params[lay.z_feat.start + d * n + j] = *v;
        }
    }
    for i in lay.q_mean.clone() {
        model.params[i] = rng.random_range(-1.0..1.0);
    }
    for i in lay.q_chol.clone() {
        model.params[i] = rng.random_range(-0.5..0.5);
    }

    let fc = model.forecast(&samples.iter().map(|s| &s.input).collect::<Vec<_>>(), 1.0).unwrap();
    let y = DVector::from_fn(n, |i, _| (samples[i].target[(0, 0)] - fc[i].revin_loc) / fc[i].revin_scale);
    let x = ReprBatch::from_locations(
        &feats
            .iter()
            .map(|f| LocationRepr::new(GateWeights::one_hot(1, 0), vec![f.clone()]).unwrap())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let view = KernelView {
        kind: BaseKernel::Rbf,
        log_amp: &model.params[lay.log_amp.clone()],
        log_len: &model.params[lay.log_len.clone()],
        log_alpha: &[],
    };
    let c = model.channel_scales()[0];
    let cov = MixGram::new(&x, &x, view).k + DMatrix::identity(n, n) * (c * c + 1e-4);
    let chol = cov.cholesky().unwrap();
    let resid = y.map(|v| v - model.offsets()[0]);
    let exact = -0.5 * resid.dot(&chol.solve(&resid))
        - chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    let rule = QuadratureRule::gauss_hermite(20).unwrap();
    let mut s = TrainConfig::default().settings_at(0, &rule);
    s.simplex.weight = 0.0;
    s.lambda_batch = 0.0;
    let batch: Vec<&Sample> = samples.iter().collect();
    let parts = model.objective(&batch, &s, None).unwrap();
    (-parts.objective, exact, parts.jitter)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elbo_never_exceeds_exact_marginal(n in 4usize..16, seed in any::<u64>()) {
        let (elbo, exact, jitter) = bound_case(n, seed);
        prop_assume!(jitter == 0.0);
        prop_assert!(elbo <= exact + 1e-9 * exact.abs().max(1.0), "elbo {} exact {}", elbo, exact);
    }
}

#[test]
fn smoothed_training_objective_is_non_increasing() {
    let series = synth_generate(&SynthSpec::two_regime_abrupt(3000, 42)).unwrap();
    let split = SplitSpec {
        lookback: 48,
        horizon: 12,
        ..SplitSpec::default()
    };
    let ds = Dataset::prepare(&series.values, Some(&series.labels), &split).unwrap();
    let config: TrainConfig = serde_json::from_value(serde_json::json!({
        "r_max": 4, "inducing": 32, "batch_size": 32, "width": 16, "learning_rate": 3e-3,
        "min_epochs": 30, "patience": 30, "max_epochs": 30, "max_steps_per_epoch": 10, "max_val_windows": 50,
        "temperature": { "start_value": 1.0, "end_value": 0.2, "anneal_epochs": 10 },
        "simplex_alpha": { "start_value": 2.0, "end_value": 0.9, "anneal_epochs": 10 },
        "lambda_batch": { "start_value": 3e-4, "end_value": 1e-6, "anneal_epochs": 10 },
        "seed": 42
    }))
    .unwrap();
    let out = train(&config, &ds.splits.train, &ds.splits.val).unwrap();
    assert!(out.failure.is_none());
    let obj: Vec<f64> = out.history.iter().map(|r| r.objective).collect();
    assert_eq!(obj.len(), 30);
    let smooth: Vec<f64> = obj.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for t in 0..smooth.len() - 10 {
        assert!(
            smooth[t + 10] <= smooth[t],
            "smoothed objective rose from {} at {t} to {} at {}",
            smooth[t],
            smooth[t + 10],
            t + 10
        );
    }
}
