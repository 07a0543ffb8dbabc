//! Regime scale model, Student-t mixture likelihood, Gauss-Hermite quadrature,
//! predictive densities, sampling and tail diagnostics.

mod mixture;
mod quadrature;
mod student_t;
mod tail;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::gate::sigmoid;
use crate::svgp::RegimeOffsets;

pub use mixture::{
    elbo_data_term, gaussian_mixture_logdensity, hetero_gaussian_logdensity, mixture_conditional_logpdf,
    predictive_logdensity, predictive_mean, signal_noise_ratio, LikelihoodKind, PredictiveState, MAX_COMPONENTS,
};
pub(crate) use mixture::{elbo_term_grad, log_predictive, LocGrads, LocInputs};
pub use quadrature::{gh_expectation, QuadratureRule, DEFAULT_QUADRATURE_NODES};
pub use student_t::{gaussian_logpdf, student_t_logpdf};
pub(crate) use student_t::TConst;
pub use tail::{estimate_tail_index, geometric_grid, TailFit};

pub const NU_MIN: f64 = 4.0;
pub const NU_MAX: f64 = 100.0;
pub const DEFAULT_SIGMA_FLOOR_SQ: f64 = 1e-4;
pub const DEFAULT_CHANNEL_SCALE: f64 = 0.5;
/// Initial tail logit, placing `nu` at 10 before jitter.
pub const DEFAULT_NU_LOGIT_INIT: f64 = -2.70805020110221; // logit(6 / 96)
pub const TAU_JITTER_SD: f64 = 0.5;
pub const NU_JITTER_SD: f64 = 0.3;

/// `tau_r = exp(w_r)` for `r < R`, `tau_R = exp(-sum w)`, so the product is one.
pub fn taus_from_weights(tau_weights: &[f64]) -> Vec<f64> {
    let total: f64 = tau_weights.iter().sum();
    tau_weights
        .iter()
        .map(|w| w.exp())
        .chain(std::iter::once((-total).exp()))
        .collect()
}

/// `nu = 4 + 96 sigmoid(eta)`.
pub fn nu_from_logit(eta: f64) -> f64 {
    NU_MIN + (NU_MAX - NU_MIN) * sigmoid(eta)
}

pub fn logit_from_nu(nu: f64) -> Result<f64> {
    if !(nu > NU_MIN && nu < NU_MAX) {
        return Err(Error::invalid(format!("nu {nu} outside the open range ({NU_MIN}, {NU_MAX})")));
    }
    let p = (nu - NU_MIN) / (NU_MAX - NU_MIN);
    Ok((p / (1.0 - p)).ln())
}

/// Per-regime observation parameters in unconstrained form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeLikelihoodParams {
    pub tau_weights: Vec<f64>,
    pub nu_logits: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl RegimeLikelihoodParams {
    pub fn new(tau_weights: Vec<f64>, nu_logits: Vec<f64>, offsets: RegimeOffsets) -> Result<Self> {
        let r = nu_logits.len();
        if tau_weights.len() + 1 != r || offsets.b.len() != r {
            return Err(Error::shape("expected R-1 tau weights and R tail logits and offsets"));
        }
        if tau_weights.iter().chain(&nu_logits).any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite likelihood parameter"));
        }
        Ok(Self {
            tau_weights,
            nu_logits,
            offsets: offsets.b,
        })
    }

    /// Jittered initialisation: `log tau ~ N(0, 0.5^2)` and `eta ~ eta_init + N(0, 0.3^2)`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, regimes: usize, eta_init: f64) -> Self {
        let normal = |rng: &mut R, sd: f64| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        let tau_weights = (0..regimes.saturating_sub(1)).map(|_| normal(rng, TAU_JITTER_SD)).collect();
        let nu_logits = (0..regimes).map(|_| eta_init + normal(rng, NU_JITTER_SD)).collect();
        Self {
            tau_weights,
            nu_logits,
            offsets: vec![0.0; regimes],
        }
    }

    pub fn taus(&self) -> Vec<f64> {
        taus_from_weights(&self.tau_weights)
    }

    pub fn nus(&self) -> Vec<f64> {
        self.nu_logits.iter().map(|e| nu_from_logit(*e)).collect()
    }
}

/// One positive calibration scale per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelCalibration {
    pub c: Vec<f64>,
}

impl ChannelCalibration {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::invalid("channel calibration must be positive"));
        }
        Ok(Self { c })
    }

    pub fn initial(channels: usize) -> Self {
        Self {
            c: vec![DEFAULT_CHANNEL_SCALE; channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleState {
    pub v_res: f64,
    pub sigma_floor_sq: f64,
}

impl ScaleState {
    pub fn new(v_res: f64, sigma_floor_sq: f64) -> Result<Self> {
        if !(v_res >= 0.0) || !(sigma_floor_sq > 0.0) {
            return Err(Error::invalid("v_res must be non-negative and the floor positive"));
        }
        Ok(Self { v_res, sigma_floor_sq })
    }
}

/// `sigma_r = sqrt((c_d tau_r)^2 + v_res + floor)`.
pub fn regime_scale(c_d: f64, tau_r: f64, state: &ScaleState) -> f64 {
    ((c_d * tau_r).powi(2) + state.v_res + state.sigma_floor_sq).sqrt()
}

fn draw_component(rng: &mut ChaCha8Rng, pi: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding can leave the cumulative sum a hair below one
    pi.iter().rposition(|p| *p > 0.0).unwrap_or(pi.len() - 1)
}

/// Draws from the predictive into `out`, advancing `rng`.
pub(crate) fn sample_into(state: &PredictiveState, rng: &mut ChaCha8Rng, out: &mut [f64]) -> Result<()> {
    let t_dists = match state.kind {
        LikelihoodKind::StudentTMixture => state
            .nus
            .iter()
            .map(|nu| {
                if nu.is_infinite() {
                    Ok(None)
                } else {
                    StudentT::new(*nu).map(Some).map_err(|e| Error::invalid(e.to_string()))
                }
            })
            .collect::<Result<Vec<_>>>()?,
        _ => vec![None; state.components()],
    };
    let pi = state.gate.as_slice();
    let sd = state.posterior.variance.sqrt();
    let hetero_scale = if state.kind == LikelihoodKind::HeteroGaussian {
        pi.iter().zip(&state.scales).map(|(p, s)| p * s * s).sum::<f64>().sqrt()
    } else {
        0.0
    };
    let hetero_shift: f64 = pi.iter().zip(&state.offsets).map(|(p, o)| p * o).sum();
    for slot in out.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        let delta = state.posterior.mean + sd * e;
        let (loc, scale, noise_dist) = if state.kind == LikelihoodKind::HeteroGaussian {
            (hetero_shift, hetero_scale, None)
        } else {
            let r = draw_component(rng, pi);
            (state.offsets[r], state.scales[r], t_dists[r])
        };
        let noise: f64 = match noise_dist {
            Some(t) => t.sample(rng),
            None => rng.sample(StandardNormal),
        };
        *slot = state.mu + delta + loc + scale * noise;
    }
    Ok(())
}

/// `n` predictive draws: `delta ~ q`, `r ~ Categorical(pi)`, `y ~ p_r(. | mu + delta)`.
pub fn sample_predictive(state: &PredictiveState, n: usize, rng_seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    state.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = vec![0.0; n];
    sample_into(state, &mut rng, &mut out)?;
    Ok(out)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Predictive CDF, used for tail mass corrections and calibration checks.
pub fn predictive_cdf(y: f64, state: &PredictiveState, rule: &QuadratureRule) -> Result<f64> {
    state.validate()?;
    let pi = state.gate.as_slice();
    let s2 = state.posterior.variance;
    let center = state.mu + state.posterior.mean;
    match state.kind {
        LikelihoodKind::HeteroGaussian => {
            let var: f64 = pi.iter().zip(&state.scales).map(|(p, s)| p * s * s).sum();
            let shift: f64 = pi.iter().zip(&state.offsets).map(|(p, o)| p * o).sum();
            Ok(normal_cdf((y - center - shift) / (var + s2).sqrt()))
        }
        LikelihoodKind::GaussianMixture => Ok(pi
            .iter()
            .enumerate()
            .map(|(r, p)| p * normal_cdf((y - center - state.offsets[r]) / (state.scales[r].powi(2) + s2).sqrt()))
            .sum()),
        LikelihoodKind::StudentTMixture => {
            let dists = state
                .nus
                .iter()
                .map(|nu| {
                    if nu.is_infinite() {
                        Ok(None)
                    } else {
                        StudentsT::new(0.0, 1.0, *nu).map(Some).map_err(|e| Error::invalid(e.to_string()))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let spread = (2.0 * s2).sqrt();
            let mut total = 0.0;
            for (x, w) in rule.nodes.iter().zip(rule.normalized_weights()) {
                let delta = center + spread * x;
                for (r, p) in pi.iter().enumerate() {
                    let z = (y - delta - state.offsets[r]) / state.scales[r];
                    let f = match &dists[r] {
                        Some(d) => d.cdf(z),
                        None => normal_cdf(z),
                    };
                    total += w * p * f;
                }
            }
            Ok(total)
        }
    }
}
