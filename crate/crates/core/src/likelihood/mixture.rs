use serde::{Deserialize, Serialize};

use super::quadrature::QuadratureRule;
use super::student_t::{gaussian_logpdf, TConst};
use crate::error::{Error, Result};
use crate::gate::{GateWeights, LOG_CLAMP};
use crate::svgp::ResidualPosterior;

/// Upper bound on mixture components handled by the per-location kernels.
pub const MAX_COMPONENTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    #[default]
    StudentTMixture,
    /// One Gaussian whose variance is the gate-weighted average of the regime variances.
    HeteroGaussian,
    GaussianMixture,
}

/// Everything needed to score or sample one forecast location.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveState {
    /// Deterministic mean path `mu`.
    pub mu: f64,
    pub gate: GateWeights,
    pub posterior: ResidualPosterior,
    /// Per-component location shifts on top of `mu + delta`; zero for GP heads.
    pub offsets: Vec<f64>,
    pub scales: Vec<f64>,
    /// Ignored by the Gaussian kinds.
    pub nus: Vec<f64>,
    pub kind: LikelihoodKind,
}

impl PredictiveState {
    pub fn new(
        mu: f64,
        gate: GateWeights,
        posterior: ResidualPosterior,
        scales: Vec<f64>,
        nus: Vec<f64>,
        kind: LikelihoodKind,
    ) -> Result<Self> {
        let r = gate.len();
        let state = Self {
            mu,
            gate,
            posterior,
            offsets: vec![0.0; r],
            scales,
            nus,
            kind,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn with_offsets(mut self, offsets: Vec<f64>) -> Result<Self> {
        self.offsets = offsets;
        self.validate()?;
        Ok(self)
    }

    pub fn components(&self) -> usize {
        self.gate.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.gate.len();
        if r > MAX_COMPONENTS {
            return Err(Error::invalid(format!("at most {MAX_COMPONENTS} components are supported")));
        }
        if self.scales.len() != r || self.offsets.len() != r {
            return Err(Error::shape("per-component vectors must match the gate length"));
        }
        if self.kind == LikelihoodKind::StudentTMixture && self.nus.len() != r {
            return Err(Error::shape("one degree of freedom per component is required"));
        }
        if self.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("component scales must be positive and finite"));
        }
        if self.kind == LikelihoodKind::StudentTMixture && self.nus.iter().any(|n| !(*n > 0.0)) {
            return Err(Error::invalid("degrees of freedom must be positive"));
        }
        if !self.mu.is_finite() || self.offsets.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("non-finite location"));
        }
        Ok(())
    }

    pub(crate) fn tconsts(&self) -> Vec<TConst> {
        match self.kind {
            LikelihoodKind::StudentTMixture => self
                .nus
                .iter()
                .map(|&nu| if nu.is_infinite() { TConst::gaussian() } else { TConst::new(nu) })
                .collect(),
            _ => vec![TConst::gaussian(); self.components()],
        }
    }

    pub(crate) fn inputs<'a>(&'a self, y: f64, tc: &'a [TConst]) -> LocInputs<'a> {
        LocInputs {
            y,
            center: self.mu + self.posterior.mean,
            s2: self.posterior.variance,
            pi: self.gate.as_slice(),
            offsets: &self.offsets,
            scales: &self.scales,
            tc,
        }
    }
}

/// Per-location inputs of the fused density kernels.
#[derive(Clone, Copy)]
pub(crate) struct LocInputs<'a> {
    pub y: f64,
    /// `mu + m_delta`.
    pub center: f64,
    pub s2: f64,
    pub pi: &'a [f64],
    pub offsets: &'a [f64],
    pub scales: &'a [f64],
    pub tc: &'a [TConst],
}

/// Gradient sinks for [`elbo_term_grad`]; values are accumulated.
pub(crate) struct LocGrads<'a> {
    pub center: &'a mut f64,
    pub s2: &'a mut f64,
    pub pi: &'a mut [f64],
    pub offsets: &'a mut [f64],
    pub scales: &'a mut [f64],
    pub nus: &'a mut [f64],
}

#[inline]
fn log_sum_exp(a: &[f64]) -> f64 {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + a.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[inline]
fn ln_weight(p: f64) -> f64 {
    if p > 0.0 {
        p.max(LOG_CLAMP).ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `log sum_r pi_r p_r(y | delta)` with component locations `locs_r + delta`.
///
/// An infinite entry in `nus` selects a Gaussian component.
pub fn mixture_conditional_logpdf(
    y: f64,
    delta: f64,
    gate: &GateWeights,
    locs: &[f64],
    scales: &[f64],
    nus: &[f64],
) -> Result<f64> {
    let r = gate.len();
    if locs.len() != r || scales.len() != r || nus.len() != r {
        return Err(Error::shape("per-regime vectors must match the gate length"));
    }
    let total: f64 = gate.as_slice().iter().sum();
    if (total - 1.0).abs() > 1e-9 || gate.as_slice().iter().any(|p| *p < 0.0) {
        return Err(Error::invalid("gate is not on the simplex"));
    }
    let mut terms = Vec::with_capacity(r);
    for i in 0..r {
        let lp = super::student_t::student_t_logpdf(y, locs[i] + delta, scales[i], nus[i])?;
        terms.push(ln_weight(gate.as_slice()[i]) + lp);
    }
    Ok(log_sum_exp(&terms))
}

fn gaussian_mixture_inner(inp: &LocInputs<'_>) -> f64 {
    let r = inp.pi.len();
    let mut terms = [0.0; MAX_COMPONENTS];
    for i in 0..r {
        let var = inp.scales[i] * inp.scales[i] + inp.s2;
        terms[i] = ln_weight(inp.pi[i]) + gaussian_logpdf(inp.y, inp.center + inp.offsets[i], var);
    }
    log_sum_exp(&terms[..r])
}

fn hetero_moments(inp: &LocInputs<'_>) -> (f64, f64) {
    let mut var = 0.0;
    let mut shift = 0.0;
    for i in 0..inp.pi.len() {
        var += inp.pi[i] * inp.scales[i] * inp.scales[i];
        shift += inp.pi[i] * inp.offsets[i];
    }
    (var, shift)
}

fn hetero_inner(inp: &LocInputs<'_>) -> f64 {
    let (var, shift) = hetero_moments(inp);
    gaussian_logpdf(inp.y, inp.center + shift, var + inp.s2)
}

fn t_mixture_predictive(inp: &LocInputs<'_>, rule: &QuadratureRule) -> f64 {
    let r = inp.pi.len();
    let spread = (2.0 * inp.s2).sqrt();
    let mut comp = [0.0; MAX_COMPONENTS];
    let mut nodes = Vec::with_capacity(rule.len());
    for (x, w) in rule.nodes.iter().zip(rule.normalized_weights()) {
        let delta = inp.center + spread * x;
        for i in 0..r {
            comp[i] = ln_weight(inp.pi[i]) + inp.tc[i].logpdf(inp.y, delta + inp.offsets[i], inp.scales[i]);
        }
        nodes.push(w.ln() + log_sum_exp(&comp[..r]));
    }
    log_sum_exp(&nodes)
}

/// Log predictive density of the fused inputs, `log E_q[sum_r pi_r p_r]`.
pub(crate) fn log_predictive(inp: &LocInputs<'_>, kind: LikelihoodKind, rule: &QuadratureRule) -> f64 {
    match kind {
        LikelihoodKind::HeteroGaussian => hetero_inner(inp),
        LikelihoodKind::GaussianMixture => gaussian_mixture_inner(inp),
        LikelihoodKind::StudentTMixture => {
            if inp.s2 == 0.0 {
                let mut comp = [0.0; MAX_COMPONENTS];
                for i in 0..inp.pi.len() {
                    comp[i] = ln_weight(inp.pi[i]) + inp.tc[i].logpdf(inp.y, inp.center + inp.offsets[i], inp.scales[i]);
                }
                log_sum_exp(&comp[..inp.pi.len()])
            } else {
                t_mixture_predictive(inp, rule)
            }
        }
    }
}

/// `E_q[log sum_r pi_r p_r(y | delta)]` with optional gradients.
pub(crate) fn elbo_term_grad(
    inp: &LocInputs<'_>,
    kind: LikelihoodKind,
    rule: &QuadratureRule,
    grads: Option<LocGrads<'_>>,
) -> f64 {
    let r = inp.pi.len();
    match kind {
        LikelihoodKind::HeteroGaussian => {
            let (var, shift) = hetero_moments(inp);
            let resid = inp.y - inp.center - shift;
            let e = resid * resid + inp.s2;
            let value = -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + e / var);
            if let Some(g) = grads {
                let dvar = -0.5 / var + 0.5 * e / (var * var);
                let dloc = resid / var;
                *g.center += dloc;
                *g.s2 += -0.5 / var;
                for i in 0..r {
                    let s = inp.scales[i];
                    g.pi[i] += dvar * s * s + dloc * inp.offsets[i];
                    g.scales[i] += dvar * inp.pi[i] * 2.0 * s;
                    g.offsets[i] += dloc * inp.pi[i];
                }
            }
            value
        }
        _ if r == 1 && inp.tc[0].is_gaussian() || (r == 1 && kind == LikelihoodKind::GaussianMixture) => {
            let s = inp.scales[0];
            let var = s * s;
            let resid = inp.y - inp.center - inp.offsets[0];
            let e = resid * resid + inp.s2;
            let value = -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + e / var) + ln_weight(inp.pi[0]);
            if let Some(g) = grads {
                *g.center += resid / var;
                *g.s2 += -0.5 / var;
                g.offsets[0] += resid / var;
                g.scales[0] += -1.0 / s + e / (var * s);
                g.pi[0] += 1.0 / inp.pi[0];
            }
            value
        }
        _ => {
            let gaussian = kind == LikelihoodKind::GaussianMixture;
            let spread = (2.0 * inp.s2).sqrt();
            let mut lw = [0.0; MAX_COMPONENTS];
            for i in 0..r {
                lw[i] = ln_weight(inp.pi[i]);
            }
            let mut lt = [0.0; MAX_COMPONENTS];
            let mut dl = [0.0; MAX_COMPONENTS];
            let mut ds = [0.0; MAX_COMPONENTS];
            let mut dn = [0.0; MAX_COMPONENTS];
            let mut a = [0.0; MAX_COMPONENTS];
            let mut value = 0.0;
            let mut grads = grads;
            for (x, w) in rule.nodes.iter().zip(rule.normalized_weights()) {
                let delta = inp.center + spread * x;
                for i in 0..r {
                    let tc = if gaussian { TConst::gaussian() } else { inp.tc[i] };
                    if grads.is_some() {
                        let (l, gl, gs, gn) = tc.logpdf_grad(inp.y, delta + inp.offsets[i], inp.scales[i]);
                        lt[i] = l;
                        dl[i] = gl;
                        ds[i] = gs;
                        dn[i] = gn;
                    } else {
                        lt[i] = tc.logpdf(inp.y, delta + inp.offsets[i], inp.scales[i]);
                    }
                    a[i] = lw[i] + lt[i];
                }
                let lse = log_sum_exp(&a[..r]);
                value += w * lse;
                if let Some(g) = grads.as_mut() {
                    let mut d_delta = 0.0;
                    for i in 0..r {
                        let resp = (a[i] - lse).exp();
                        g.pi[i] += w * (lt[i] - lse).exp();
                        d_delta += resp * dl[i];
                        g.offsets[i] += w * resp * dl[i];
                        g.scales[i] += w * resp * ds[i];
                        g.nus[i] += w * resp * dn[i];
                    }
                    *g.center += w * d_delta;
                    if spread > 0.0 {
                        *g.s2 += w * d_delta * x / spread;
                    }
                }
            }
            value
        }
    }
}

/// Log predictive density `log E_q[sum_r pi_r p_r(y | delta)]`.
pub fn predictive_logdensity(y: f64, state: &PredictiveState, rule: &QuadratureRule) -> Result<f64> {
    state.validate()?;
    let tc = state.tconsts();
    let value = log_predictive(&state.inputs(y, &tc), state.kind, rule);
    if value.is_nan() {
        return Err(Error::numerical("NaN predictive density"));
    }
    Ok(value)
}

/// Expected log-likelihood `E_q[log sum_r pi_r p_r(y | delta)]`, the ELBO data term.
pub fn elbo_data_term(y: f64, state: &PredictiveState, rule: &QuadratureRule) -> Result<f64> {
    state.validate()?;
    let tc = state.tconsts();
    let value = elbo_term_grad(&state.inputs(y, &tc), state.kind, rule, None);
    if value.is_nan() {
        return Err(Error::numerical("NaN expected log-likelihood"));
    }
    Ok(value)
}

/// Single Gaussian with variance `sum_r pi_r sigma_r^2`, convolved with `q(delta)`.
pub fn hetero_gaussian_logdensity(y: f64, state: &PredictiveState) -> Result<f64> {
    state.validate()?;
    let tc = vec![TConst::gaussian(); state.components()];
    Ok(hetero_inner(&state.inputs(y, &tc)))
}

/// Gaussian mixture convolved analytically with `q(delta)`, component by component.
pub fn gaussian_mixture_logdensity(y: f64, state: &PredictiveState) -> Result<f64> {
    state.validate()?;
    let tc = vec![TConst::gaussian(); state.components()];
    Ok(gaussian_mixture_inner(&state.inputs(y, &tc)))
}

/// Predictive mean `mu + m_delta + sum_r pi_r offset_r`; every component mean exists since `nu >= 4`.
pub fn predictive_mean(state: &PredictiveState) -> f64 {
    let shift: f64 = state
        .gate
        .as_slice()
        .iter()
        .zip(&state.offsets)
        .map(|(p, o)| p * o)
        .sum();
    state.mu + state.posterior.mean + shift
}

/// `s_delta^2 / sigma_r^2`.
pub fn signal_noise_ratio(posterior: ResidualPosterior, sigma_r: f64) -> Result<f64> {
    if !(sigma_r > 0.0) {
        return Err(Error::invalid("sigma_r must be positive"));
    }
    Ok(posterior.variance / (sigma_r * sigma_r))
}
