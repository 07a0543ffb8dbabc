//! Regime gate: stick-breaking and softmax maps onto the simplex, gate-shaping
//! penalties, curriculum schedules and regime-usage diagnostics.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Entries are clamped here before any logarithm.
pub const LOG_CLAMP: f64 = 1e-30;

/// Default mass threshold for counting a regime as active.
pub const DEFAULT_ACTIVE_THRESHOLD: f64 = 1e-2;

/// Unconstrained gate logits, `R_max - 1` entries for stick-breaking.
#[derive(Clone, Debug, PartialEq)]
pub struct GateLogits(Vec<f64>);

impl GateLogits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite gate logit {bad}")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A point on the probability simplex over `R_max` regimes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateWeights(Vec<f64>);

impl GateWeights {
    /// Wraps weights after checking they are non-negative and sum to one.
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::invalid("empty gate vector"));
        }
        if pi.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("gate weights must be finite and non-negative"));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("gate weights sum to {total}, not 1")));
        }
        Ok(Self(pi))
    }

    pub(crate) fn from_raw(pi: Vec<f64>) -> Self {
        Self(pi)
    }

    pub fn uniform(r: usize) -> Self {
        Self(vec![1.0 / r as f64; r])
    }

    pub fn one_hot(r: usize, k: usize) -> Self {
        let mut pi = vec![0.0; r];
        pi[k] = 1.0;
        Self(pi)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest weight; ties go to the lower index.
    pub fn dominant(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Piecewise-linear anneal from `start_value` to `end_value`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSchedule {
    pub start_value: f64,
    pub end_value: f64,
    pub anneal_epochs: usize,
}

impl GateSchedule {
    pub fn new(start_value: f64, end_value: f64, anneal_epochs: usize) -> Result<Self> {
        if anneal_epochs == 0 {
            return Err(Error::invalid("anneal_epochs must be at least 1"));
        }
        Ok(Self {
            start_value,
            end_value,
            anneal_epochs,
        })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            start_value: value,
            end_value: value,
            anneal_epochs: 1,
        }
    }
}

/// Value of the schedule at `epoch`, clamped at `end_value` once the ramp is over.
pub fn schedule_value(schedule: &GateSchedule, epoch: usize) -> f64 {
    if epoch >= schedule.anneal_epochs {
        return schedule.end_value;
    }
    let frac = epoch as f64 / schedule.anneal_epochs as f64;
    schedule.start_value + (schedule.end_value - schedule.start_value) * frac
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexPenaltyParams {
    pub alpha: f64,
    pub weight: f64,
}

impl SimplexPenaltyParams {
    pub fn new(alpha: f64, weight: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid("simplex penalty alpha must be positive"));
        }
        if !(weight >= 0.0) {
            return Err(Error::invalid("simplex penalty weight must be non-negative"));
        }
        Ok(Self { alpha, weight })
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stick-breaking on raw slices. `logits.len() + 1 == out.len()`.
pub(crate) fn stick_break_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    debug_assert_eq!(logits.len() + 1, out.len());
    let mut remaining = 1.0;
    for (j, g) in logits.iter().enumerate() {
        let v = sigmoid(g / temperature);
        out[j] = v * remaining;
        // 1 - sigmoid(x) == sigmoid(-x) keeps the remainder accurate under saturation
        remaining *= sigmoid(-g / temperature);
    }
    out[logits.len()] = remaining;
}

/// Vector-Jacobian product of [`stick_break_into`]; accumulates into `grad_logits`.
pub(crate) fn stick_break_backward(
    logits: &[f64],
    temperature: f64,
    grad_pi: &[f64],
    grad_logits: &mut [f64],
) {
    let k = logits.len();
    let v: Vec<f64> = logits.iter().map(|g| sigmoid(g / temperature)).collect();
    let one_minus: Vec<f64> = logits.iter().map(|g| sigmoid(-g / temperature)).collect();
    let mut prefix = 1.0;
    for j in 0..k {
        // d pi_j / d v_j = prod_{i<j}(1 - v_i)
        let mut g = grad_pi[j] * prefix;
        // d pi_r / d v_j for r > j: -v_r * prod_{i<r, i != j}(1 - v_i)
        let mut run = prefix;
        for r in (j + 1)..=k {
            let coeff = if r < k { v[r] * run } else { run };
            g -= grad_pi[r] * coeff;
            if r < k {
                run *= one_minus[r];
            }
        }
        grad_logits[j] += g * v[j] * one_minus[j] / temperature;
        prefix *= one_minus[j];
    }
}

pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits
        .iter()
        .map(|g| g / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, g) in out.iter_mut().zip(logits) {
        *o = (g / temperature - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn softmax_backward(pi: &[f64], temperature: f64, grad_pi: &[f64], grad_logits: &mut [f64]) {
    let dot: f64 = pi.iter().zip(grad_pi).map(|(p, g)| p * g).sum();
    for ((gl, p), g) in grad_logits.iter_mut().zip(pi).zip(grad_pi) {
        *gl += p * (g - dot) / temperature;
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// Finite deterministic stick-breaking: `v_r = sigmoid(logit_r / T)`,
/// `pi_r = v_r prod_{j<r}(1 - v_j)`, the last regime takes the remainder.
pub fn stick_break(logits: &GateLogits, temperature: f64) -> Result<GateWeights> {
    check_temperature(temperature)?;
    let mut pi = vec![0.0; logits.0.len() + 1];
    stick_break_into(&logits.0, temperature, &mut pi);
    Ok(GateWeights(pi))
}

/// Inverse of [`stick_break`] at unit temperature: recovers logits from interior weights.
pub fn stick_logits_from_weights(pi: &GateWeights) -> Result<GateLogits> {
    let p = &pi.0;
    if p.iter().any(|x| *x <= 0.0) {
        return Err(Error::invalid("weights must lie in the open simplex"));
    }
    // tail sums from the end keep the remaining stick accurate
    let mut tail = vec![0.0; p.len() + 1];
    for j in (0..p.len()).rev() {
        tail[j] = tail[j + 1] + p[j];
    }
    // logit(p_j / tail_j) = ln p_j - ln tail_{j+1}
    let logits = (0..p.len() - 1).map(|j| p[j].ln() - tail[j + 1].ln()).collect();
    GateLogits::new(logits)
}

/// Two-regime changepoint gate: `pi_1 = sigmoid(-beta (t - tau))`.
pub fn changepoint_gate(t: f64, tau: f64, beta: f64) -> Result<GateWeights> {
    let x = -beta * (t - tau);
    if !x.is_finite() {
        return Err(Error::invalid("non-finite changepoint gate argument"));
    }
    let p1 = sigmoid(x);
    Ok(GateWeights(vec![p1, sigmoid(-x)]))
}

/// Temperature softmax over `R_max` logits.
pub fn softmax_gate(logits: &[f64], temperature: f64) -> Result<GateWeights> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::invalid("softmax gate needs at least one logit"));
    }
    if logits.iter().any(|g| !g.is_finite()) {
        return Err(Error::invalid("non-finite softmax logit"));
    }
    let mut pi = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut pi);
    Ok(GateWeights(pi))
}

fn check_batch(batch: &[GateWeights]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| Error::invalid("empty gate batch"))?;
    let r = first.len();
    if batch.iter().any(|w| w.len() != r) {
        return Err(Error::shape("gate vectors of differing length in batch"));
    }
    Ok(r)
}

fn flatten(batch: &[GateWeights]) -> Vec<f64> {
    batch.iter().flat_map(|w| w.0.iter().copied()).collect()
}

/// Symmetric Dirichlet-style penalty on realised gate weights, averaged over the batch.
pub fn simplex_penalty(batch: &[GateWeights], params: &SimplexPenaltyParams) -> Result<f64> {
    let r = check_batch(batch)?;
    if batch.iter().any(|w| w.0.iter().any(|p| *p <= 0.0)) {
        return Err(Error::invalid("simplex penalty needs strictly positive weights"));
    }
    Ok(simplex_penalty_flat(&flatten(batch), r, params))
}

pub(crate) fn simplex_penalty_flat(pi: &[f64], r: usize, params: &SimplexPenaltyParams) -> f64 {
    if params.weight == 0.0 {
        return 0.0;
    }
    let n = (pi.len() / r) as f64;
    let log_sum: f64 = pi.iter().map(|p| p.max(LOG_CLAMP).ln()).sum();
    let rf = r as f64;
    params.weight
        * (-(params.alpha - 1.0) * log_sum / n + rf * ln_gamma(params.alpha) - ln_gamma(rf * params.alpha))
}

pub(crate) fn simplex_penalty_grad(pi: &[f64], r: usize, params: &SimplexPenaltyParams, scale: f64, grad: &mut [f64]) {
    if params.weight == 0.0 || params.alpha == 1.0 {
        return;
    }
    let n = (pi.len() / r) as f64;
    let c = -scale * params.weight * (params.alpha - 1.0) / n;
    for (g, p) in grad.iter_mut().zip(pi) {
        if *p > LOG_CLAMP {
            *g += c / p;
        }
    }
}

fn mean_gate_flat(pi: &[f64], r: usize) -> Vec<f64> {
    let n = pi.len() / r;
    let mut mean = vec![0.0; r];
    for row in pi.chunks_exact(r) {
        for (m, p) in mean.iter_mut().zip(row) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    mean
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|x| x * x.max(LOG_CLAMP).ln()).sum::<f64>()
}

pub(crate) fn batch_entropy_flat(pi: &[f64], r: usize) -> f64 {
    entropy(&mean_gate_flat(pi, r))
}

pub(crate) fn point_entropy_flat(pi: &[f64], r: usize) -> f64 {
    let n = pi.len() / r;
    pi.chunks_exact(r).map(entropy).sum::<f64>() / n as f64
}

/// Gradient of `-lambda_batch H_batch + lambda_point H_point`, scaled and accumulated.
pub(crate) fn entropy_objective_grad(
    pi: &[f64],
    r: usize,
    lambda_batch: f64,
    lambda_point: f64,
    scale: f64,
    grad: &mut [f64],
) {
    let n = (pi.len() / r) as f64;
    if lambda_batch != 0.0 {
        let mean = mean_gate_flat(pi, r);
        let dh: Vec<f64> = mean.iter().map(|m| -(m.max(LOG_CLAMP).ln() + 1.0) / n).collect();
        for row in grad.chunks_exact_mut(r) {
            for (g, d) in row.iter_mut().zip(&dh) {
                *g -= scale * lambda_batch * d;
            }
        }
    }
    if lambda_point != 0.0 {
        for (g, p) in grad.iter_mut().zip(pi) {
            *g += scale * lambda_point * (-(p.max(LOG_CLAMP).ln() + 1.0) / n);
        }
    }
}

/// Entropy of the batch-mean gate.
pub fn batch_entropy(batch: &[GateWeights]) -> Result<f64> {
    let r = check_batch(batch)?;
    Ok(batch_entropy_flat(&flatten(batch), r))
}

/// Mean over locations of the per-location gate entropy.
pub fn point_entropy(batch: &[GateWeights]) -> Result<f64> {
    let r = check_batch(batch)?;
    Ok(point_entropy_flat(&flatten(batch), r))
}

/// `-lambda_batch H_batch + lambda_point H_point` (minimisation convention).
pub fn entropy_objective(batch: &[GateWeights], lambda_batch: f64, lambda_point: f64) -> Result<f64> {
    Ok(-lambda_batch * batch_entropy(batch)? + lambda_point * point_entropy(batch)?)
}

/// Average gate over a batch.
pub fn mean_weights(batch: &[GateWeights]) -> Result<GateWeights> {
    let r = check_batch(batch)?;
    Ok(GateWeights(mean_gate_flat(&flatten(batch), r)))
}

/// Number of regimes whose average mass exceeds `threshold`.
pub fn effective_regimes(mean_weights: &GateWeights, threshold: f64) -> usize {
    mean_weights.0.iter().filter(|p| **p > threshold).count()
}
