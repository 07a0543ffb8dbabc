//! Training configuration, head construction, the optimisation loop and
//! finite-difference gradient verification.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::mean_nlpd;
use crate::gate::{schedule_value, GateSchedule, SimplexPenaltyParams, DEFAULT_ACTIVE_THRESHOLD};
use crate::kernels::{BaseKernel, DEFAULT_FEATURE_DIM};
use crate::likelihood::{LikelihoodKind, QuadratureRule, DEFAULT_QUADRATURE_NODES, DEFAULT_SIGMA_FLOOR_SQ};
use crate::model::{Architecture, HeadKind, Model, ObjectiveParts, ObjectiveSettings};

pub const DEFAULT_R_MAX: usize = 16;
pub const DEFAULT_INDUCING: usize = 512;
pub const DEFAULT_BATCH: usize = 512;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_MIN_EPOCHS: usize = 50;
pub const DEFAULT_PATIENCE: usize = 50;
pub const DEFAULT_SIMPLEX_WEIGHT: f64 = 1e-3;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

fn d_r_max() -> Option<usize> {
    None
}
fn d_feature_dim() -> usize {
    DEFAULT_FEATURE_DIM
}
fn d_inducing() -> usize {
    DEFAULT_INDUCING
}
fn d_quadrature() -> usize {
    DEFAULT_QUADRATURE_NODES
}
fn d_batch() -> usize {
    DEFAULT_BATCH
}
fn d_micro() -> Option<usize> {
    None
}
fn d_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn d_min_epochs() -> usize {
    DEFAULT_MIN_EPOCHS
}
fn d_patience() -> usize {
    DEFAULT_PATIENCE
}
fn d_max_epochs() -> usize {
    200
}
fn d_width() -> usize {
    crate::encoder::DEFAULT_WIDTH
}
fn d_temperature() -> GateSchedule {
    GateSchedule {
        start_value: 1.0,
        end_value: 0.2,
        anneal_epochs: 50,
    }
}
fn d_alpha() -> GateSchedule {
    GateSchedule {
        start_value: 2.0,
        end_value: 0.9,
        anneal_epochs: 50,
    }
}
fn d_lambda_batch() -> GateSchedule {
    GateSchedule {
        start_value: 3e-4,
        end_value: 1e-6,
        anneal_epochs: 50,
    }
}
fn d_simplex_weight() -> f64 {
    DEFAULT_SIMPLEX_WEIGHT
}
fn d_floor() -> f64 {
    DEFAULT_SIGMA_FLOOR_SQ
}
fn d_seed() -> u64 {
    42
}
fn d_kernel() -> BaseKernel {
    BaseKernel::Rbf
}

/// Every knob of a training run. Missing JSON keys take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Regime budget; `None` resolves to 16, or 1 for single-kernel and DKL heads.
    #[serde(default = "d_r_max")]
    pub r_max: Option<usize>,
    #[serde(default = "d_feature_dim")]
    pub d_g: usize,
    #[serde(default = "d_inducing")]
    pub inducing: usize,
    #[serde(default = "d_quadrature")]
    pub quadrature_nodes: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Windows per gradient evaluation; gradients are accumulated up to `batch_size`.
    #[serde(default = "d_micro")]
    pub micro_batch: Option<usize>,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_min_epochs")]
    pub min_epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    /// Caps optimiser steps per epoch; `None` sweeps the whole training split.
    #[serde(default)]
    pub max_steps_per_epoch: Option<usize>,
    /// Caps validation windows (evenly spaced) scored each epoch.
    #[serde(default)]
    pub max_val_windows: Option<usize>,
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_temperature")]
    pub temperature: GateSchedule,
    #[serde(default = "d_alpha")]
    pub simplex_alpha: GateSchedule,
    #[serde(default = "d_simplex_weight")]
    pub simplex_weight: f64,
    #[serde(default = "d_lambda_batch")]
    pub lambda_batch: GateSchedule,
    #[serde(default)]
    pub lambda_point: f64,
    #[serde(default = "d_kernel")]
    pub kernel: BaseKernel,
    #[serde(default)]
    pub softmax_gate: bool,
    #[serde(default)]
    pub no_deep_mean: bool,
    #[serde(default)]
    pub no_residual_variance: bool,
    #[serde(default)]
    pub shared_likelihood: bool,
    #[serde(default)]
    pub single_kernel: bool,
    #[serde(default)]
    pub likelihood: LikelihoodKind,
    #[serde(default = "d_head")]
    pub head: HeadKind,
    #[serde(default = "d_floor")]
    pub sigma_floor_sq: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
}

fn d_head() -> HeadKind {
    HeadKind::Deregime
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialise")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.d_g == 0 || self.inducing == 0 || self.quadrature_nodes == 0 || self.batch_size == 0 || self.width == 0 {
            return bad("sizes must be positive");
        }
        if self.r_max == Some(0) {
            return bad("r_max must be positive");
        }
        if let Some(m) = self.micro_batch {
            if m == 0 || m > self.batch_size {
                return bad("micro_batch must lie in 1..=batch_size");
            }
        }
        if !(self.learning_rate > 0.0) || !(self.sigma_floor_sq > 0.0) {
            return bad("learning rate and noise floor must be positive");
        }
        if !(self.simplex_weight >= 0.0) || !(self.lambda_point >= 0.0) {
            return bad("penalty weights must be non-negative");
        }
        for s in [&self.temperature, &self.simplex_alpha, &self.lambda_batch] {
            if s.anneal_epochs == 0 {
                return bad("anneal_epochs must be at least 1");
            }
        }
        if self.temperature.start_value <= 0.0 || self.temperature.end_value <= 0.0 {
            return bad("temperature must stay positive");
        }
        if self.simplex_alpha.start_value <= 0.0 || self.simplex_alpha.end_value <= 0.0 {
            return bad("simplex alpha must stay positive");
        }
        Ok(())
    }

    /// Gate and penalty settings at `epoch`.
    pub fn settings_at<'a>(&self, epoch: usize, rule: &'a QuadratureRule) -> ObjectiveSettings<'a> {
        ObjectiveSettings {
            temperature: schedule_value(&self.temperature, epoch),
            simplex: SimplexPenaltyParams {
                alpha: schedule_value(&self.simplex_alpha, epoch),
                weight: self.simplex_weight,
            },
            lambda_batch: schedule_value(&self.lambda_batch, epoch),
            lambda_point: self.lambda_point,
            data_scale: 1.0,
            penalty_scale: 1.0,
            kl_scale: 1.0,
            rule,
        }
    }
}

/// Resolves a config into an architecture, rejecting contradictory flag combinations.
pub fn build_head(config: &TrainConfig, lookback: usize, horizon: usize, channels: usize) -> Result<Architecture> {
    config.validate()?;
    let bad = |m: String| Err(Error::InvalidConfig(m));
    let head = config.head;
    let gp = head.uses_gp();
    let dkl = matches!(head, HeadKind::DklRbf | HeadKind::DklRq);
    if !gp {
        let flags = [
            ("softmax_gate", config.softmax_gate),
            ("no_residual_variance", config.no_residual_variance),
            ("shared_likelihood", config.shared_likelihood),
            ("single_kernel", config.single_kernel),
            ("no_deep_mean", config.no_deep_mean),
        ];
        if let Some((name, _)) = flags.iter().find(|(_, on)| *on) {
            return bad(format!("{name} applies to GP heads only, not {head:?}"));
        }
    }
    let collapsed = dkl || config.single_kernel;
    if collapsed {
        if config.r_max.is_some_and(|r| r > 1) {
            return bad("single-kernel heads use one regime; r_max > 1 with gate penalties is contradictory".into());
        }
        if config.softmax_gate || config.shared_likelihood || config.lambda_point > 0.0 {
            return bad("gate and regime-tying flags have no meaning for a single kernel".into());
        }
    }
    if dkl && config.single_kernel {
        return bad("single_kernel is an ablation of the deregime head".into());
    }
    let kernel = match head {
        HeadKind::DklRbf => BaseKernel::Rbf,
        HeadKind::DklRq => BaseKernel::RationalQuadratic,
        _ if config.single_kernel => BaseKernel::Rbf,
        _ => config.kernel,
    };
    if gp && kernel == BaseKernel::Linear {
        return bad("the linear kernel is not a trainable choice".into());
    }
    let regimes = if collapsed { 1 } else { config.r_max.unwrap_or(DEFAULT_R_MAX) };
    let likelihood = match head {
        HeadKind::Gaussian | HeadKind::MdnGaussian => LikelihoodKind::GaussianMixture,
        HeadKind::StudentT | HeadKind::MdnT => LikelihoodKind::StudentTMixture,
        _ => config.likelihood,
    };
    let arch = Architecture {
        head,
        lookback,
        horizon,
        channels,
        width: config.width,
        regimes: if matches!(head, HeadKind::Gaussian | HeadKind::StudentT) { 1 } else { regimes },
        feature_dim: config.d_g,
        inducing: config.inducing,
        likelihood,
        kernel,
        softmax_gate: config.softmax_gate,
        deep_mean: !config.no_deep_mean,
        residual_variance: gp && !config.no_residual_variance,
        shared_likelihood: config.shared_likelihood,
        sigma_floor_sq: config.sigma_floor_sq,
    };
    arch.validate()?;
    Ok(arch)
}

/// Adaptive-moment optimiser state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descends along `grad`; when `only` is given, other coordinates are left untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], only: Option<&[Range<usize>]>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let all = [0..params.len()];
        for i in only.unwrap_or(&all).iter().flat_map(|r| r.clone()) {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Relative error per parameter group, `||g - g_fd|| / max(||g||, ||g_fd||)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<(String, f64)>,
    pub worst: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst < tolerance
    }
}

/// Central-difference check of `f`, which returns the value and its gradient.
pub fn finite_difference_check(
    params: &[f64],
    groups: &[(String, Range<usize>)],
    epsilon: f64,
    f: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<GradCheckReport> {
    let (_, grad) = f(params)?;
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(groups.len());
    let mut worst: f64 = 0.0;
    for (name, range) in groups {
        let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
        for i in range.clone() {
            let orig = p[i];
            p[i] = orig + epsilon;
            let fp = f(&p)?.0;
            p[i] = orig - epsilon;
            let fm = f(&p)?.0;
            p[i] = orig;
            let fd = (fp - fm) / (2.0 * epsilon);
            diff += (grad[i] - fd).powi(2);
            na += grad[i] * grad[i];
            nf += fd * fd;
        }
        let denom = na.sqrt().max(nf.sqrt());
        let rel = if denom < 1e-12 { diff.sqrt() } else { diff.sqrt() / denom };
        worst = worst.max(rel);
        out.push((name.clone(), rel));
    }
    Ok(GradCheckReport { groups: out, worst })
}

/// Checks the analytic gradient of the full objective against central differences.
/// `zero_group` deliberately zeroes one analytic group, for mutation testing.
pub fn grad_check(
    model: &Model,
    batch: &[&Sample],
    settings: &ObjectiveSettings<'_>,
    epsilon: f64,
    zero_group: Option<&str>,
) -> Result<GradCheckReport> {
    let groups: Vec<(String, Range<usize>)> = model.layout.groups().into_iter().map(|(n, r)| (n.to_string(), r)).collect();
    if let Some(z) = zero_group {
        if !groups.iter().any(|(n, _)| n == z) {
            return Err(Error::invalid(format!("unknown parameter group {z}")));
        }
    }
    let zero_range = zero_group.and_then(|z| groups.iter().find(|(n, _)| n == z).map(|(_, r)| r.clone()));
    finite_difference_check(&model.params, &groups, epsilon, |p| {
        let mut m = model.clone();
        m.params.copy_from_slice(p);
        let mut g = vec![0.0; p.len()];
        let parts = m.objective(batch, settings, Some(&mut g))?;
        if let Some(r) = &zero_range {
            g[r.clone()].fill(0.0);
        }
        Ok((parts.objective, g))
    })
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over steps of the minibatch objective divided by the training location count.
    pub objective: f64,
    pub elbo: f64,
    pub kl: f64,
    pub simplex: f64,
    pub entropy_penalty: f64,
    pub r_eff: usize,
    pub gate_entropy: f64,
    pub val_nlpd: f64,
    pub temperature: f64,
}

/// Early-stopping rule: stop once `patience` epochs pass without improvement, never before `min_epochs` are done.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub min_epochs: usize,
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl EarlyStopping {
    pub fn new(min_epochs: usize, patience: usize) -> Self {
        Self {
            min_epochs,
            patience,
            best: None,
            best_epoch: None,
        }
    }

    /// Records the validation value of `epoch` (0-based). Returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|b| value < b);
        if improved {
            self.best = Some(value);
            self.best_epoch = Some(epoch);
        }
        let done = epoch + 1;
        let since = epoch - self.best_epoch.unwrap_or(0);
        (improved, done >= self.min_epochs && since >= self.patience)
    }
}

/// Serialisable RNG position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    pub stopping: EarlyStopping,
    pub best_params: Vec<f64>,
    pub rng: RngState,
}

impl TrainState {
    /// Temperature to use when evaluating the best parameters.
    pub fn eval_temperature(&self, config: &TrainConfig) -> f64 {
        schedule_value(&config.temperature, self.stopping.best_epoch.unwrap_or(0))
    }

    pub fn best_model(&self) -> Model {
        Model {
            params: self.best_params.clone(),
            ..self.model.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Set when a numerical failure ended the run; `state` holds the last good parameters.
    pub failure: Option<String>,
}

/// Fresh model and optimiser for `config`.
pub fn init_state(config: &TrainConfig, train: &[Sample]) -> Result<TrainState> {
    let first = train.first().ok_or_else(|| Error::Data("empty training split".into()))?;
    let arch = build_head(config, first.input.nrows(), first.target.nrows(), first.input.ncols())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(arch, &mut rng)?;
    let refs: Vec<&Sample> = train.iter().collect();
    model.init_inducing(&refs, &mut rng, schedule_value(&config.temperature, 0))?;
    let n = model.layout.total;
    Ok(TrainState {
        best_params: model.params.clone(),
        model,
        optimizer: Adam::new(n, config.learning_rate),
        epoch: 0,
        stopping: EarlyStopping::new(config.min_epochs, config.patience),
        rng: RngState::capture(&rng),
    })
}

fn val_subset(val: &[Sample], cap: Option<usize>) -> Vec<Sample> {
    match cap {
        Some(c) if c < val.len() => (0..c).map(|i| val[i * val.len() / c].clone()).collect(),
        _ => val.to_vec(),
    }
}

/// Runs one epoch of minibatch steps. Returns the epoch record without validation fields.
fn run_epoch(config: &TrainConfig, state: &mut TrainState, train: &[Sample], rule: &QuadratureRule) -> Result<EpochRecord> {
    let epoch = state.epoch;
    let mut rng = state.rng.restore();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    state.rng = RngState::capture(&rng);

    let batch = config.batch_size.min(train.len());
    let micro = config.micro_batch.unwrap_or(batch).min(batch);
    let steps = train.len().div_ceil(batch).min(config.max_steps_per_epoch.unwrap_or(usize::MAX));
    let hd = state.model.arch.locations_per_window() as f64;
    let n_train = train.len() as f64;
    let base = config.settings_at(epoch, rule);
    let mut grad = vec![0.0; state.model.layout.total];
    let mut totals = ObjectiveParts::default();
    let mut objective_sum = 0.0;
    let mut elbo_sum = 0.0;
    let mut gate_mass: Vec<f64> = vec![0.0; state.model.arch.regimes];
    let mut gate_count = 0.0;
    for step in 0..steps {
        let idx = &order[step * batch..((step + 1) * batch).min(order.len())];
        grad.fill(0.0);
        let mut step_obj = 0.0;
        let mut step_elbo = 0.0;
        for (k, chunk) in idx.chunks(micro).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().map(|i| &train[*i]).collect();
            let settings = ObjectiveSettings {
                data_scale: n_train / idx.len() as f64,
                penalty_scale: n_train * hd * chunk.len() as f64 / idx.len() as f64,
                kl_scale: if k == 0 { 1.0 } else { 0.0 },
                ..base
            };
            let parts = state.model.objective(&refs, &settings, Some(&mut grad))?;
            step_obj += parts.objective;
            step_elbo += parts.elbo(&settings);
            totals.kl = parts.kl;
            totals.simplex += parts.simplex * chunk.len() as f64;
            totals.entropy += parts.entropy * chunk.len() as f64;
            if !parts.gate_mass.is_empty() {
                for (m, p) in gate_mass.iter_mut().zip(&parts.gate_mass) {
                    *m += p;
                }
                gate_count += parts.locations as f64;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical(format!("non-finite gradient at epoch {epoch} step {step}")));
        }
        state.optimizer.step(&mut state.model.params, &grad, None);
        objective_sum += step_obj;
        elbo_sum += step_elbo;
    }
    let denom = n_train * hd;
    let seen = (steps * batch).min(train.len()) as f64;
    let mean_gate: Vec<f64> = if gate_count > 0.0 {
        gate_mass.iter().map(|m| m / gate_count).collect()
    } else {
        vec![1.0; gate_mass.len().max(1)]
    };
    let gate_entropy = -mean_gate.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    Ok(EpochRecord {
        epoch,
        objective: objective_sum / steps as f64 / denom,
        elbo: elbo_sum / steps as f64 / denom,
        kl: totals.kl,
        simplex: totals.simplex / seen,
        entropy_penalty: totals.entropy / seen,
        r_eff: mean_gate.iter().filter(|p| **p > DEFAULT_ACTIVE_THRESHOLD).count(),
        gate_entropy,
        val_nlpd: f64::NAN,
        temperature: base.temperature,
    })
}

/// Trains from `state` until early stopping or `max_epochs`. Epoch numbering continues from `state.epoch`.
/// `on_epoch` sees each finished record and state, e.g. to write checkpoints.
pub fn train_from(
    config: &TrainConfig,
    mut state: TrainState,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation splits".into()));
    }
    let rule = QuadratureRule::gauss_hermite(config.quadrature_nodes)?;
    let val = val_subset(val, config.max_val_windows);
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut failure = None;
    while state.epoch < config.max_epochs {
        let snapshot = state.clone();
        let epoch = state.epoch;
        let result = run_epoch(config, &mut state, train, &rule).and_then(|mut rec| {
            let t = schedule_value(&config.temperature, epoch);
            rec.val_nlpd = mean_nlpd(&state.model, &val, t, &rule)?;
            Ok(rec)
        });
        let rec = match result {
            Ok(r) => r,
            Err(e) if e.is_numerical() => {
                log::error!("numerical failure at epoch {epoch}: {e}");
                state = snapshot;
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let (improved, stop) = state.stopping.update(epoch, rec.val_nlpd);
        if improved {
            state.best_params = state.model.params.clone();
        }
        state.epoch = epoch + 1;
        log::info!(
            "epoch {epoch}: objective {:.5} val_nlpd {:.5} r_eff {} T {:.3}",
            rec.objective,
            rec.val_nlpd,
            rec.r_eff,
            rec.temperature
        );
        on_epoch(&rec, &state)?;
        history.push(rec);
        if stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        state,
        history,
        stopped_early,
        failure,
    })
}

/// Fresh run: initialise from `config.seed` and train.
pub fn train(config: &TrainConfig, train_split: &[Sample], val: &[Sample]) -> Result<TrainOutcome> {
    let state = init_state(config, train_split)?;
    train_from(config, state, train_split, val, |_, _| Ok(()))
}

pub const HISTORY_HEADER: [&str; 10] = [
    "epoch",
    "objective",
    "elbo",
    "kl",
    "simplex",
    "entropy_penalty",
    "r_eff",
    "gate_entropy",
    "val_nlpd",
    "temperature",
];

/// Writes one CSV row per epoch.
pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_HEADER)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.objective.to_string(),
            r.elbo.to_string(),
            r.kl.to_string(),
            r.simplex.to_string(),
            r.entropy_penalty.to_string(),
            r.r_eff.to_string(),
            r.gate_entropy.to_string(),
            r.val_nlpd.to_string(),
            r.temperature.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Serialises a config with every default filled in.
pub fn resolved_config_json(config: &TrainConfig, mut out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, config)?;
    Ok(())
}
