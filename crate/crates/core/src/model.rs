//! Head architectures over a shared encoder, with a flat parameter vector and
//! analytic gradients of the training objective.
//!
//! Every forecast location `n = b * H * D + t * D + d` reads its head outputs
//! from column `b` of the encoder output, rows `(t * D + d) * k ..`, where `k`
//! is the number of fields per location for the head.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoder::{
    flatten_windows, init_mlp, mlp_backward, mlp_forward, revin_stats, softplus, softplus_inverse, HeadOutputs,
    MlpCache, MlpShape, RevinStats, Window,
};
use crate::error::{Error, Result};
use crate::gate::{
    batch_entropy_flat, entropy_objective_grad, point_entropy_flat, sigmoid, simplex_penalty_flat,
    simplex_penalty_grad, softmax_backward, softmax_into, stick_break_backward, stick_break_into, GateWeights,
    SimplexPenaltyParams,
};
use crate::kernels::{init_log_params, mix_diag, mix_diag_backward, BaseKernel, KernelGrads, KernelView, MixGram, ReprBatch};
use crate::likelihood::{
    elbo_term_grad, log_predictive, nu_from_logit, taus_from_weights, LikelihoodKind, LocGrads, LocInputs,
    PredictiveState, QuadratureRule, TConst, DEFAULT_CHANNEL_SCALE, DEFAULT_NU_LOGIT_INIT, MAX_COMPONENTS, NU_JITTER_SD,
    NU_MAX, NU_MIN, TAU_JITTER_SD,
};
use crate::svgp::{ResidualPosterior, SvgpForward};

/// Initial diagonal of the variational covariance factor.
pub const S_FACTOR_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Deregime,
    Gaussian,
    StudentT,
    MdnGaussian,
    MdnT,
    DklRbf,
    DklRq,
}

impl HeadKind {
    pub fn uses_gp(self) -> bool {
        matches!(self, HeadKind::Deregime | HeadKind::DklRbf | HeadKind::DklRq)
    }
}

/// Resolved model shape. Built from a training config by `training::build_head`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub head: HeadKind,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub width: usize,
    /// Regimes for GP heads, mixture components for MDN heads.
    pub regimes: usize,
    pub feature_dim: usize,
    pub inducing: usize,
    pub likelihood: LikelihoodKind,
    pub kernel: BaseKernel,
    pub softmax_gate: bool,
    pub deep_mean: bool,
    pub residual_variance: bool,
    pub shared_likelihood: bool,
    pub sigma_floor_sq: f64,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.channels == 0 || self.width == 0 || self.regimes == 0 {
            return Err(Error::InvalidConfig("sizes must be positive".into()));
        }
        if self.regimes > MAX_COMPONENTS {
            return Err(Error::InvalidConfig(format!("at most {MAX_COMPONENTS} regimes are supported")));
        }
        if !(self.sigma_floor_sq > 0.0) {
            return Err(Error::InvalidConfig("noise floor must be positive".into()));
        }
        if self.head.uses_gp() {
            if self.feature_dim == 0 || self.inducing == 0 {
                return Err(Error::InvalidConfig("GP heads need feature_dim and inducing points".into()));
            }
            if self.kernel == BaseKernel::Linear {
                return Err(Error::InvalidConfig("the linear kernel is reserved for feature-space checks".into()));
            }
        }
        Ok(())
    }

    pub fn locations_per_window(&self) -> usize {
        self.horizon * self.channels
    }

    /// Gate logits per location: none for one regime, `R` under softmax, `R - 1` for stick-breaking.
    pub fn gate_logits(&self) -> usize {
        if !self.head.uses_gp() || self.regimes == 1 {
            0
        } else if self.softmax_gate {
            self.regimes
        } else {
            self.regimes - 1
        }
    }

    pub fn has_tail(&self) -> bool {
        match self.head {
            HeadKind::StudentT | HeadKind::MdnT => true,
            HeadKind::Gaussian | HeadKind::MdnGaussian => false,
            _ => self.likelihood == LikelihoodKind::StudentTMixture,
        }
    }

    /// Head fields per location.
    pub fn fields(&self) -> usize {
        let k = self.regimes;
        match self.head {
            HeadKind::Gaussian => 2,
            HeadKind::StudentT => 3,
            HeadKind::MdnGaussian => 3 * k,
            HeadKind::MdnT => 4 * k,
            _ => usize::from(self.deep_mean) + self.gate_logits() + k * self.feature_dim,
        }
    }

    pub fn mlp_shape(&self) -> MlpShape {
        MlpShape {
            input: self.lookback * self.channels,
            width: self.width,
            output: self.locations_per_window() * self.fields(),
        }
    }

    fn likelihood_kind(&self) -> LikelihoodKind {
        match self.head {
            HeadKind::Gaussian | HeadKind::MdnGaussian => LikelihoodKind::GaussianMixture,
            HeadKind::StudentT | HeadKind::MdnT => LikelihoodKind::StudentTMixture,
            _ => self.likelihood,
        }
    }
}

/// Ranges of each parameter group inside the flat vector. Empty ranges are absent groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub encoder: Range<usize>,
    pub vres: Range<usize>,
    pub tau: Range<usize>,
    pub nu: Range<usize>,
    pub offset: Range<usize>,
    pub log_c: Range<usize>,
    pub log_amp: Range<usize>,
    pub log_len: Range<usize>,
    pub log_alpha: Range<usize>,
    pub z_gate: Range<usize>,
    pub z_feat: Range<usize>,
    pub q_mean: Range<usize>,
    pub q_chol: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut next = 0;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let gp = arch.head.uses_gp();
        let r = arch.regimes;
        let m = arch.inducing;
        let encoder = take(arch.mlp_shape().len());
        let vres = take(if gp && arch.residual_variance { r + r * arch.feature_dim + 1 } else { 0 });
        let tau = take(if gp && !arch.shared_likelihood { r - 1 } else { 0 });
        let nu = take(match (gp && arch.has_tail(), arch.shared_likelihood) {
            (false, _) => 0,
            (true, true) => 1,
            (true, false) => r,
        });
        let offset = take(if gp { r } else { 0 });
        let log_c = take(if gp { arch.channels } else { 0 });
        let log_amp = take(if gp { r } else { 0 });
        let log_len = take(if gp { r } else { 0 });
        let log_alpha = take(if gp && arch.kernel == BaseKernel::RationalQuadratic { r } else { 0 });
        let z_gate = take(if gp { m * arch.gate_logits() } else { 0 });
        let z_feat = take(if gp { m * r * arch.feature_dim } else { 0 });
        let q_mean = take(if gp { m } else { 0 });
        let q_chol = take(if gp { m * m } else { 0 });
        Self {
            encoder,
            vres,
            tau,
            nu,
            offset,
            log_c,
            log_amp,
            log_len,
            log_alpha,
            z_gate,
            z_feat,
            q_mean,
            q_chol,
            total: next,
        }
    }

    /// Named non-empty groups in storage order.
    pub fn groups(&self) -> Vec<(&'static str, Range<usize>)> {
        [
            ("encoder", &self.encoder),
            ("vres", &self.vres),
            ("tau", &self.tau),
            ("nu", &self.nu),
            ("offset", &self.offset),
            ("log_c", &self.log_c),
            ("log_amp", &self.log_amp),
            ("log_len", &self.log_len),
            ("log_alpha", &self.log_alpha),
            ("z_gate", &self.z_gate),
            ("z_feat", &self.z_feat),
            ("q_mean", &self.q_mean),
            ("q_chol", &self.q_chol),
        ]
        .into_iter()
        .filter(|(_, r)| !r.is_empty())
        .map(|(n, r)| (n, r.clone()))
        .collect()
    }
}

/// Architecture plus its flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Architecture,
    pub layout: Layout,
    pub params: Vec<f64>,
}

/// Weights of the training objective at one epoch.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveSettings<'a> {
    pub temperature: f64,
    pub simplex: SimplexPenaltyParams,
    pub lambda_batch: f64,
    pub lambda_point: f64,
    /// Multiplies the summed data term, typically `N_train / |batch|`.
    pub data_scale: f64,
    /// Multiplies the per-location gate penalties, typically `N_train`.
    pub penalty_scale: f64,
    /// Multiplies the KL term; zero on all but one micro-batch under accumulation.
    pub kl_scale: f64,
    pub rule: &'a QuadratureRule,
}

/// Components of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub objective: f64,
    /// Unscaled sum of the per-location expected log-likelihoods.
    pub data_sum: f64,
    pub kl: f64,
    pub simplex: f64,
    pub entropy: f64,
    pub batch_entropy: f64,
    pub point_entropy: f64,
    pub locations: usize,
    pub jitter: f64,
    /// Gate weights summed over locations, per regime; empty for heads without a gate.
    pub gate_mass: Vec<f64>,
}

impl ObjectiveParts {
    /// `data_scale * sum E[log p] - kl_scale * KL`.
    pub fn elbo(&self, s: &ObjectiveSettings<'_>) -> f64 {
        s.data_scale * self.data_sum - s.kl_scale * self.kl
    }
}

/// Predictive distribution at one location, in window-normalised coordinates.
#[derive(Clone, Debug)]
pub struct LocationForecast {
    pub window: usize,
    pub step: usize,
    pub channel: usize,
    pub state: PredictiveState,
    /// Per-window location and scale of the channel.
    pub revin_loc: f64,
    pub revin_scale: f64,
    pub v_res: f64,
}

impl LocationForecast {
    /// Log density of a value on the input scale.
    pub fn logdensity(&self, y: f64, rule: &QuadratureRule) -> f64 {
        let tc = self.state.tconsts();
        let z = (y - self.revin_loc) / self.revin_scale;
        log_predictive(&self.state.inputs(z, &tc), self.state.kind, rule) - self.revin_scale.ln()
    }

    pub fn mean(&self) -> f64 {
        crate::likelihood::predictive_mean(&self.state) * self.revin_scale + self.revin_loc
    }
}

/// Per-location tensors shared by the GP forward and backward passes.
struct GpTape {
    cache: MlpCache,
    stats: Vec<RevinStats>,
    mu: Vec<f64>,
    logits: Vec<f64>,
    pi: Vec<f64>,
    x: ReprBatch,
    z: ReprBatch,
    z_pi_logits: Vec<f64>,
    vres_pre: Vec<f64>,
    v: Vec<f64>,
    kzz: MixGram,
    kxz: MixGram,
    svgp: SvgpForward,
    ls: DMatrix<f64>,
    taus: Vec<f64>,
    nus: Vec<f64>,
    c: Vec<f64>,
}

fn gate_into(arch: &Architecture, logits: &[f64], temperature: f64, out: &mut [f64]) {
    if arch.regimes == 1 {
        out[0] = 1.0;
    } else if arch.softmax_gate {
        softmax_into(logits, temperature, out);
    } else {
        stick_break_into(logits, temperature, out);
    }
}

fn gate_backward(arch: &Architecture, logits: &[f64], pi: &[f64], temperature: f64, g_pi: &[f64], g_logits: &mut [f64]) {
    if arch.regimes == 1 {
        return;
    }
    if arch.softmax_gate {
        softmax_backward(pi, temperature, g_pi, g_logits);
    } else {
        stick_break_backward(logits, temperature, g_pi, g_logits);
    }
}

fn dnu_deta(eta: f64) -> f64 {
    let s = sigmoid(eta);
    (NU_MAX - NU_MIN) * s * (1.0 - s)
}

impl Model {
    /// Seeded initialisation. GP inducing features start at zero until
    /// [`Model::init_inducing`] copies encoder features from data.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        init_mlp(arch.mlp_shape(), rng, &mut params[layout.encoder.clone()]);
        let normal = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
        if arch.head.uses_gp() {
            let r = arch.regimes;
            if !layout.vres.is_empty() {
                let bound = 1.0 / ((r + r * arch.feature_dim) as f64).sqrt();
                let n = layout.vres.len();
                for v in &mut params[layout.vres.start..layout.vres.start + n - 1] {
                    *v = rng.random_range(-bound..bound);
                }
            }
            for v in &mut params[layout.tau.clone()] {
                *v = TAU_JITTER_SD * normal(rng);
            }
            for v in &mut params[layout.nu.clone()] {
                *v = DEFAULT_NU_LOGIT_INIT + NU_JITTER_SD * normal(rng);
            }
            params[layout.log_c.clone()].fill(DEFAULT_CHANNEL_SCALE.ln());
            let (amps, lens) = init_log_params(rng, r);
            params[layout.log_amp.clone()].copy_from_slice(&amps);
            params[layout.log_len.clone()].copy_from_slice(&lens);
            // alpha = 1 is a moderate rational quadratic shape
            params[layout.log_alpha.clone()].fill(0.0);
            for v in &mut params[layout.z_gate.clone()] {
                *v = normal(rng);
            }
            let m = arch.inducing;
            let diag = softplus_inverse(S_FACTOR_INIT);
            for i in 0..m {
                params[layout.q_chol.start + i * m + i] = diag;
            }
        }
        Ok(Self { arch, layout, params })
    }

    pub fn group(&self, range: &Range<usize>) -> &[f64] {
        &self.params[range.clone()]
    }

    /// `tau_r`; all ones when the likelihood is shared across regimes.
    pub fn taus(&self) -> Vec<f64> {
        if self.arch.shared_likelihood || !self.arch.head.uses_gp() {
            vec![1.0; self.arch.regimes]
        } else {
            taus_from_weights(self.group(&self.layout.tau))
        }
    }

    /// `nu_r`, infinite for Gaussian likelihoods.
    pub fn nus(&self) -> Vec<f64> {
        let r = self.arch.regimes;
        let eta = self.group(&self.layout.nu);
        match eta.len() {
            0 => vec![f64::INFINITY; r],
            1 => vec![nu_from_logit(eta[0]); r],
            _ => eta.iter().map(|e| nu_from_logit(*e)).collect(),
        }
    }

    pub fn channel_scales(&self) -> Vec<f64> {
        self.group(&self.layout.log_c).iter().map(|v| v.exp()).collect()
    }

    pub fn offsets(&self) -> &[f64] {
        self.group(&self.layout.offset)
    }

    fn kernel_view(&self) -> KernelView<'_> {
        KernelView {
            kind: self.arch.kernel,
            log_amp: self.group(&self.layout.log_amp),
            log_len: self.group(&self.layout.log_len),
            log_alpha: self.group(&self.layout.log_alpha),
        }
    }

    fn s_factor(&self) -> DMatrix<f64> {
        let m = self.arch.inducing;
        let raw = self.group(&self.layout.q_chol);
        DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => raw[j * m + i],
            std::cmp::Ordering::Equal => softplus(raw[j * m + i]),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    fn encode(&self, inputs: &[&DMatrix<f64>]) -> Result<(MlpCache, Vec<RevinStats>)> {
        let arch = &self.arch;
        for w in inputs {
            if w.shape() != (arch.lookback, arch.channels) {
                return Err(Error::shape(format!(
                    "window {:?} does not match lookback {} x channels {}",
                    w.shape(),
                    arch.lookback,
                    arch.channels
                )));
            }
        }
        let stats: Vec<RevinStats> = inputs.iter().map(|w| revin_stats(w)).collect();
        let normalized: Vec<DMatrix<f64>> = inputs
            .iter()
            .zip(&stats)
            .map(|(w, s)| DMatrix::from_fn(w.nrows(), w.ncols(), |t, d| (w[(t, d)] - s.loc[d]) / s.scale[d]))
            .collect();
        let x = flatten_windows(normalized.iter());
        let cache = mlp_forward(arch.mlp_shape(), self.group(&self.layout.encoder), x);
        Ok((cache, stats))
    }

    fn inducing_batch(&self, temperature: f64) -> (ReprBatch, Vec<f64>) {
        let arch = &self.arch;
        let (m, r, dg, g) = (arch.inducing, arch.regimes, arch.feature_dim, arch.gate_logits());
        let logits = self.group(&self.layout.z_gate).to_vec();
        let mut z = ReprBatch::zeros(m, r, dg);
        let mut pi = vec![0.0; r];
        for j in 0..m {
            gate_into(arch, &logits[j * g..(j + 1) * g], temperature, &mut pi);
            for rr in 0..r {
                z.gates[(j, rr)] = pi[rr];
            }
        }
        let feat = self.group(&self.layout.z_feat);
        for rr in 0..r {
            z.features[rr] = DMatrix::from_column_slice(m, dg, &feat[rr * m * dg..(rr + 1) * m * dg]);
        }
        (z, logits)
    }

    fn gp_forward(&self, inputs: &[&DMatrix<f64>], temperature: f64) -> Result<GpTape> {
        let arch = &self.arch;
        let (cache, stats) = self.encode(inputs)?;
        let (hd, r, dg, g, k) = (
            arch.locations_per_window(),
            arch.regimes,
            arch.feature_dim,
            arch.gate_logits(),
            arch.fields(),
        );
        let n = inputs.len() * hd;
        let mu_off = 0;
        let gate_off = usize::from(arch.deep_mean);
        let feat_off = gate_off + g;
        let out = &cache.output;
        let mut mu = vec![0.0; n];
        let mut logits = vec![0.0; n * g];
        let mut pi = vec![0.0; n * r];
        let mut x = ReprBatch::zeros(n, r, dg);
        for b in 0..inputs.len() {
            for l in 0..hd {
                let idx = b * hd + l;
                let base = l * k;
                if arch.deep_mean {
                    mu[idx] = out[(base + mu_off, b)];
                }
                for j in 0..g {
                    logits[idx * g + j] = out[(base + gate_off + j, b)];
                }
                gate_into(arch, &logits[idx * g..(idx + 1) * g], temperature, &mut pi[idx * r..(idx + 1) * r]);
                for rr in 0..r {
                    x.gates[(idx, rr)] = pi[idx * r + rr];
                    for f in 0..dg {
                        x.features[rr][(idx, f)] = out[(base + feat_off + rr * dg + f, b)];
                    }
                }
            }
        }

        let mut vres_pre = vec![0.0; n];
        let mut v = vec![0.0; n];
        if arch.residual_variance {
            let w = self.group(&self.layout.vres);
            let bias = w[w.len() - 1];
            for i in 0..n {
                let mut u = bias;
                for rr in 0..r {
                    u += w[rr] * pi[i * r + rr];
                    for f in 0..dg {
                        u += w[r + rr * dg + f] * x.features[rr][(i, f)];
                    }
                }
                vres_pre[i] = u;
                v[i] = softplus(u);
            }
        }

        let (z, z_pi_logits) = self.inducing_batch(temperature);
        let view = self.kernel_view();
        let kzz = MixGram::new(&z, &z, view);
        let kxz = MixGram::new(&x, &z, view);
        let kxx = mix_diag(&x, view);
        let b_off = self.offsets();
        let m0x = DVector::from_fn(n, |i, _| (0..r).map(|rr| pi[i * r + rr] * b_off[rr]).sum());
        let m0z = DVector::from_fn(arch.inducing, |j, _| (0..r).map(|rr| z.gates[(j, rr)] * b_off[rr]).sum());
        let ls = self.s_factor();
        let qm = DVector::from_column_slice(self.group(&self.layout.q_mean));
        let svgp = SvgpForward::new(&kzz.k, &kxz.k, &kxx, &m0x, &qm, &m0z, &ls)?;
        Ok(GpTape {
            cache,
            stats,
            mu,
            logits,
            pi,
            x,
            z,
            z_pi_logits,
            vres_pre,
            v,
            kzz,
            kxz,
            svgp,
            ls,
            taus: self.taus(),
            nus: self.nus(),
            c: self.channel_scales(),
        })
    }

    fn tconsts(nus: &[f64]) -> Vec<TConst> {
        nus.iter()
            .map(|nu| if nu.is_infinite() { TConst::gaussian() } else { TConst::new(*nu) })
            .collect()
    }

    fn scale_of(&self, tape: &GpTape, i: usize, rr: usize) -> f64 {
        let d = i % self.arch.channels;
        ((tape.c[d] * tape.taus[rr]).powi(2) + tape.v[i] + self.arch.sigma_floor_sq).sqrt()
    }

    /// Objective value and, when `grad` is given, its gradient (accumulated).
    pub fn objective(&self, batch: &[&Sample], s: &ObjectiveSettings<'_>, grad: Option<&mut [f64]>) -> Result<ObjectiveParts> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for smp in batch {
            if smp.target.shape() != (self.arch.horizon, self.arch.channels) {
                return Err(Error::shape("target does not match horizon x channels"));
            }
        }
        if self.arch.head.uses_gp() {
            self.gp_objective(batch, s, grad)
        } else {
            self.direct_objective(batch, s, grad)
        }
    }

    fn gp_objective(&self, batch: &[&Sample], s: &ObjectiveSettings<'_>, grad: Option<&mut [f64]>) -> Result<ObjectiveParts> {
        let arch = &self.arch;
        let inputs: Vec<&DMatrix<f64>> = batch.iter().map(|b| &b.input).collect();
        let tape = self.gp_forward(&inputs, s.temperature)?;
        let (hd, r, dch) = (arch.locations_per_window(), arch.regimes, arch.channels);
        let n = batch.len() * hd;
        let kind = arch.likelihood;
        let tc = Self::tconsts(&tape.nus);
        let zeros = vec![0.0; r];
        let want_grad = grad.is_some();

        let mut g_center = vec![0.0; n];
        let mut g_s2 = vec![0.0; n];
        let mut g_pi = vec![0.0; n * r];
        let mut g_scale = vec![0.0; n * r];
        let mut g_nu = vec![0.0; r];
        let mut g_off_unused = vec![0.0; r];
        let mut scales = vec![0.0; r];
        let mut data_sum = 0.0;
        for i in 0..n {
            let (b, l) = (i / hd, i % hd);
            let (t, d) = (l / dch, l % dch);
            let st = &tape.stats[b];
            let y = (batch[b].target[(t, d)] - st.loc[d]) / st.scale[d];
            for rr in 0..r {
                scales[rr] = self.scale_of(&tape, i, rr);
            }
            let inp = LocInputs {
                y,
                center: tape.mu[i] + tape.svgp.mean[i],
                s2: tape.svgp.var[i],
                pi: &tape.pi[i * r..(i + 1) * r],
                offsets: &zeros,
                scales: &scales,
                tc: &tc,
            };
            let grads = want_grad.then(|| LocGrads {
                center: &mut g_center[i],
                s2: &mut g_s2[i],
                pi: &mut g_pi[i * r..(i + 1) * r],
                offsets: &mut g_off_unused,
                scales: &mut g_scale[i * r..(i + 1) * r],
                nus: &mut g_nu,
            });
            let e = elbo_term_grad(&inp, kind, s.rule, grads);
            if !e.is_finite() {
                return Err(Error::numerical(format!("non-finite expected log-likelihood at location {i}")));
            }
            data_sum += e;
        }

        let mut parts = ObjectiveParts {
            data_sum,
            kl: tape.svgp.kl,
            locations: n,
            jitter: tape.svgp.jitter,
            ..Default::default()
        };
        parts.gate_mass = (0..r).map(|rr| (0..n).map(|i| tape.pi[i * r + rr]).sum()).collect();
        if r > 1 {
            parts.simplex = simplex_penalty_flat(&tape.pi, r, &s.simplex);
            parts.batch_entropy = batch_entropy_flat(&tape.pi, r);
            parts.point_entropy = point_entropy_flat(&tape.pi, r);
            parts.entropy = -s.lambda_batch * parts.batch_entropy + s.lambda_point * parts.point_entropy;
        }
        parts.objective = -s.data_scale * data_sum + s.kl_scale * parts.kl + s.penalty_scale * (parts.simplex + parts.entropy);
        if !parts.objective.is_finite() {
            return Err(Error::numerical("non-finite objective"));
        }
        let Some(grad) = grad else {
            return Ok(parts);
        };
        self.gp_backward(&tape, batch, s, &g_center, &g_s2, &mut g_pi, &g_scale, &g_nu, grad);
        Ok(parts)
    }

    #[allow(clippy::too_many_arguments)]
    fn gp_backward(
        &self,
        tape: &GpTape,
        batch: &[&Sample],
        s: &ObjectiveSettings<'_>,
        g_center: &[f64],
        g_s2: &[f64],
        g_pi: &mut [f64],
        g_scale: &[f64],
        g_nu: &[f64],
        grad: &mut [f64],
    ) {
        let arch = &self.arch;
        let lay = &self.layout;
        let (hd, r, dg, g, k, dch, m) = (
            arch.locations_per_window(),
            arch.regimes,
            arch.feature_dim,
            arch.gate_logits(),
            arch.fields(),
            arch.channels,
            arch.inducing,
        );
        let n = batch.len() * hd;
        let coef = -s.data_scale;
        for v in g_pi.iter_mut() {
            *v *= coef;
        }
        if r > 1 {
            simplex_penalty_grad(&tape.pi, r, &s.simplex, s.penalty_scale, g_pi);
            entropy_objective_grad(&tape.pi, r, s.lambda_batch, s.lambda_point, s.penalty_scale, g_pi);
        }

        // regime scales sigma^2 = (c_d tau_r)^2 + v + floor
        let mut g_v = vec![0.0; n];
        let mut g_tau = vec![0.0; r];
        let mut g_c = vec![0.0; dch];
        for i in 0..n {
            let d = i % dch;
            for rr in 0..r {
                let gs = coef * g_scale[i * r + rr];
                if gs == 0.0 {
                    continue;
                }
                let sigma = self.scale_of(tape, i, rr);
                let (c, tau) = (tape.c[d], tape.taus[rr]);
                g_c[d] += gs * c * tau * tau / sigma;
                g_tau[rr] += gs * c * c * tau / sigma;
                g_v[i] += gs / (2.0 * sigma);
            }
        }
        for d in 0..dch {
            grad[lay.log_c.start + d] += g_c[d] * tape.c[d];
        }
        if !lay.tau.is_empty() {
            let last = tape.taus[r - 1] * g_tau[r - 1];
            for j in 0..r - 1 {
                grad[lay.tau.start + j] += g_tau[j] * tape.taus[j] - last;
            }
        }
        if !lay.nu.is_empty() {
            let eta = self.group(&lay.nu);
            if eta.len() == 1 {
                grad[lay.nu.start] += coef * g_nu.iter().sum::<f64>() * dnu_deta(eta[0]);
            } else {
                for rr in 0..r {
                    grad[lay.nu.start + rr] += coef * g_nu[rr] * dnu_deta(eta[rr]);
                }
            }
        }

        // sparse GP marginals and KL
        let gm = DVector::from_fn(n, |i, _| coef * g_center[i]);
        let gs2 = DVector::from_fn(n, |i, _| coef * g_s2[i]);
        let sg = tape.svgp.backward(&tape.kxz.k, &gm, &gs2, s.kl_scale);
        for j in 0..m {
            grad[lay.q_mean.start + j] += sg.m[j];
        }
        let raw = self.group(&lay.q_chol);
        for j in 0..m {
            for i in j..m {
                let idx = j * m + i;
                let gl = sg.s_factor[(i, j)];
                grad[lay.q_chol.start + idx] += if i == j { gl * sigmoid(raw[idx]) } else { gl };
            }
        }
        let _ = &tape.ls;

        // prior means m0 = Pi b
        let b_off = self.offsets();
        let mut g_x = ReprBatch::zeros(n, r, dg);
        let mut g_z = ReprBatch::zeros(m, r, dg);
        for rr in 0..r {
            let mut gb = 0.0;
            for i in 0..n {
                gb += sg.m0x[i] * tape.pi[i * r + rr];
                g_x.gates[(i, rr)] += sg.m0x[i] * b_off[rr];
            }
            for j in 0..m {
                gb += sg.m0z[j] * tape.z.gates[(j, rr)];
                g_z.gates[(j, rr)] += sg.m0z[j] * b_off[rr];
            }
            grad[lay.offset.start + rr] += gb;
        }

        // kernel matrices
        let view = self.kernel_view();
        let mut gk = KernelGrads::zeros(r);
        let mut g_z2 = ReprBatch::zeros(m, r, dg);
        tape.kxz.backward(&tape.x, &tape.z, view, &sg.kxz, &mut g_x, &mut g_z, &mut gk);
        tape.kzz.backward(&tape.z, &tape.z, view, &sg.kzz, &mut g_z, &mut g_z2, &mut gk);
        g_z.add_assign(&g_z2);
        mix_diag_backward(&tape.x, view, &sg.kxx, &mut g_x, &mut gk);
        for rr in 0..r {
            grad[lay.log_amp.start + rr] += gk.log_amp[rr];
            grad[lay.log_len.start + rr] += gk.log_len[rr];
            if !lay.log_alpha.is_empty() {
                grad[lay.log_alpha.start + rr] += gk.log_alpha[rr];
            }
        }

        // inducing locations
        let mut zpi = vec![0.0; r];
        let mut gzpi = vec![0.0; r];
        for j in 0..m {
            for rr in 0..r {
                zpi[rr] = tape.z.gates[(j, rr)];
                gzpi[rr] = g_z.gates[(j, rr)];
            }
            let range = lay.z_gate.start + j * g..lay.z_gate.start + (j + 1) * g;
            gate_backward(arch, &tape.z_pi_logits[j * g..(j + 1) * g], &zpi, s.temperature, &gzpi, &mut grad[range]);
        }
        for rr in 0..r {
            let base = lay.z_feat.start + rr * m * dg;
            for (o, v) in grad[base..base + m * dg].iter_mut().zip(g_z.features[rr].iter()) {
                *o += v;
            }
        }

        // residual variance head
        for i in 0..n {
            for rr in 0..r {
                g_x.gates[(i, rr)] += g_pi[i * r + rr];
            }
        }
        if arch.residual_variance {
            let w = self.group(&lay.vres).to_vec();
            let nw = w.len();
            for i in 0..n {
                let gu = g_v[i] * sigmoid(tape.vres_pre[i]);
                if gu == 0.0 {
                    continue;
                }
                grad[lay.vres.start + nw - 1] += gu;
                for rr in 0..r {
                    grad[lay.vres.start + rr] += gu * tape.pi[i * r + rr];
                    g_x.gates[(i, rr)] += gu * w[rr];
                    for f in 0..dg {
                        let wi = r + rr * dg + f;
                        grad[lay.vres.start + wi] += gu * tape.x.features[rr][(i, f)];
                        g_x.features[rr][(i, f)] += gu * w[wi];
                    }
                }
            }
        }

        // head outputs
        let gate_off = usize::from(arch.deep_mean);
        let feat_off = gate_off + g;
        let mut g_out = DMatrix::zeros(k * hd, batch.len());
        let mut pi_row = vec![0.0; r];
        let mut gpi_row = vec![0.0; r];
        let mut glog = vec![0.0; g];
        for i in 0..n {
            let (b, l) = (i / hd, i % hd);
            let base = l * k;
            if arch.deep_mean {
                g_out[(base, b)] += gm[i];
            }
            if g > 0 {
                for rr in 0..r {
                    pi_row[rr] = tape.pi[i * r + rr];
                    gpi_row[rr] = g_x.gates[(i, rr)];
                }
                glog.fill(0.0);
                gate_backward(arch, &tape.logits[i * g..(i + 1) * g], &pi_row, s.temperature, &gpi_row, &mut glog);
                for j in 0..g {
                    g_out[(base + gate_off + j, b)] += glog[j];
                }
            }
            for rr in 0..r {
                for f in 0..dg {
                    g_out[(base + feat_off + rr * dg + f, b)] += g_x.features[rr][(i, f)];
                }
            }
        }
        mlp_backward(
            arch.mlp_shape(),
            self.group(&lay.encoder),
            &tape.cache,
            &g_out,
            &mut grad[lay.encoder.clone()],
        );
    }

    fn direct_objective(&self, batch: &[&Sample], s: &ObjectiveSettings<'_>, grad: Option<&mut [f64]>) -> Result<ObjectiveParts> {
        let arch = &self.arch;
        let inputs: Vec<&DMatrix<f64>> = batch.iter().map(|b| &b.input).collect();
        let (cache, stats) = self.encode(&inputs)?;
        let (hd, k, dch) = (arch.locations_per_window(), arch.fields(), arch.channels);
        let n = batch.len() * hd;
        let point = QuadratureRule::gauss_hermite(1)?;
        let want = grad.is_some();
        let mut g_out = DMatrix::zeros(k * hd, batch.len());
        let mut data_sum = 0.0;
        let mut comp = DirectComponents::new(arch.regimes);
        for i in 0..n {
            let (b, l) = (i / hd, i % hd);
            let (t, d) = (l / dch, l % dch);
            let st = &stats[b];
            let y = (batch[b].target[(t, d)] - st.loc[d]) / st.scale[d];
            let col = cache.output.column(b);
            let fields = &col.as_slice()[l * k..(l + 1) * k];
            comp.fill(arch, fields);
            let inp = comp.inputs(y);
            let mut gc = DirectGrads::new(arch.regimes);
            let grads = want.then(|| gc.sinks());
            let e = elbo_term_grad(&inp, arch.likelihood_kind(), &point, grads);
            if !e.is_finite() {
                return Err(Error::numerical(format!("non-finite log-likelihood at location {i}")));
            }
            data_sum += e;
            if want {
                let gf = comp.backward(arch, fields, &gc, -s.data_scale);
                for (j, v) in gf.iter().enumerate() {
                    g_out[(l * k + j, b)] += v;
                }
            }
        }
        let parts = ObjectiveParts {
            objective: -s.data_scale * data_sum,
            data_sum,
            locations: n,
            ..Default::default()
        };
        if !parts.objective.is_finite() {
            return Err(Error::numerical("non-finite objective"));
        }
        if let Some(grad) = grad {
            let lay = &self.layout;
            mlp_backward(arch.mlp_shape(), self.group(&lay.encoder), &cache, &g_out, &mut grad[lay.encoder.clone()]);
        }
        Ok(parts)
    }

    /// Head outputs for one window (GP heads only). Gate logits are reported as produced
    /// by the network; with a single regime the list is empty.
    pub fn head_outputs(&self, window: &Window, temperature: f64) -> Result<HeadOutputs> {
        if !self.arch.head.uses_gp() {
            return Err(Error::Unsupported("head outputs are defined for GP heads".into()));
        }
        let tape = self.gp_forward(&[&window.values], temperature)?;
        let arch = &self.arch;
        let (h, d, r, dg) = (arch.horizon, arch.channels, arch.regimes, arch.feature_dim);
        let mut features = Vec::with_capacity(h * d * r * dg);
        for i in 0..h * d {
            for rr in 0..r {
                features.extend(tape.x.features[rr].row(i).iter());
            }
        }
        Ok(HeadOutputs {
            horizon: h,
            channels: d,
            regimes: r,
            feature_dim: dg,
            mu: DMatrix::from_row_slice(h, d, &tape.mu),
            gate_logits: tape.logits.clone(),
            features,
            v_res: DMatrix::from_row_slice(h, d, &tape.v),
        })
    }

    /// Gate weights of every location in a batch of windows, location-major.
    pub fn gates(&self, inputs: &[&DMatrix<f64>], temperature: f64) -> Result<Vec<GateWeights>> {
        Ok(self
            .forecast(inputs, temperature)?
            .into_iter()
            .map(|f| f.state.gate)
            .collect())
    }

    /// Predictive distributions for every location of every window.
    pub fn forecast(&self, inputs: &[&DMatrix<f64>], temperature: f64) -> Result<Vec<LocationForecast>> {
        let arch = &self.arch;
        let (hd, dch, r) = (arch.locations_per_window(), arch.channels, arch.regimes);
        let mut out = Vec::with_capacity(inputs.len() * hd);
        let kind = arch.likelihood_kind();
        if arch.head.uses_gp() {
            let tape = self.gp_forward(inputs, temperature)?;
            for i in 0..inputs.len() * hd {
                let (b, l) = (i / hd, i % hd);
                let d = l % dch;
                let scales = (0..r).map(|rr| self.scale_of(&tape, i, rr)).collect();
                let nus = if kind == LikelihoodKind::StudentTMixture {
                    tape.nus.clone()
                } else {
                    vec![f64::INFINITY; r]
                };
                let state = PredictiveState::new(
                    tape.mu[i],
                    GateWeights::from_raw(tape.pi[i * r..(i + 1) * r].to_vec()),
                    ResidualPosterior::new(tape.svgp.mean[i], tape.svgp.var[i])?,
                    scales,
                    nus,
                    kind,
                )?;
                out.push(LocationForecast {
                    window: b,
                    step: l / dch,
                    channel: d,
                    state,
                    revin_loc: tape.stats[b].loc[d],
                    revin_scale: tape.stats[b].scale[d],
                    v_res: tape.v[i],
                });
            }
        } else {
            let (cache, stats) = self.encode(inputs)?;
            let k = arch.fields();
            let mut comp = DirectComponents::new(r);
            for i in 0..inputs.len() * hd {
                let (b, l) = (i / hd, i % hd);
                let d = l % dch;
                let col = cache.output.column(b);
                comp.fill(arch, &col.as_slice()[l * k..(l + 1) * k]);
                let kk = comp.k;
                let state = PredictiveState::new(
                    comp.center,
                    GateWeights::from_raw(comp.pi[..kk].to_vec()),
                    ResidualPosterior::new(0.0, 0.0)?,
                    comp.scales[..kk].to_vec(),
                    comp.nus[..kk].to_vec(),
                    kind,
                )?
                .with_offsets(comp.offsets[..kk].to_vec())?;
                out.push(LocationForecast {
                    window: b,
                    step: l / dch,
                    channel: d,
                    state,
                    revin_loc: stats[b].loc[d],
                    revin_scale: stats[b].scale[d],
                    v_res: 0.0,
                });
            }
        }
        Ok(out)
    }

    /// Copies encoder features of `M` randomly chosen training locations into the inducing set.
    pub fn init_inducing<R: Rng + ?Sized>(&mut self, samples: &[&Sample], rng: &mut R, temperature: f64) -> Result<()> {
        if !self.arch.head.uses_gp() {
            return Ok(());
        }
        if samples.is_empty() {
            return Err(Error::invalid("need training samples to place inducing points"));
        }
        let arch = self.arch.clone();
        let (m, r, dg, hd) = (arch.inducing, arch.regimes, arch.feature_dim, arch.locations_per_window());
        let total = samples.len() * hd;
        let picks: Vec<usize> = if total >= m {
            rand::seq::index::sample(rng, total, m).into_vec()
        } else {
            (0..m).map(|_| rng.random_range(0..total)).collect()
        };
        let mut feat = vec![0.0; m * r * dg];
        for (j, p) in picks.iter().enumerate() {
            let (b, l) = (p / hd, p % hd);
            let tape = self.gp_forward(&[&samples[b].input], temperature)?;
            for rr in 0..r {
                for f in 0..dg {
                    feat[rr * m * dg + f * m + j] = tape.x.features[rr][(l, f)];
                }
            }
        }
        let range = self.layout.z_feat.clone();
        self.params[range].copy_from_slice(&feat);
        Ok(())
    }
}

/// Per-location mixture parameters of the non-GP heads.
struct DirectComponents {
    k: usize,
    center: f64,
    pi: Vec<f64>,
    offsets: Vec<f64>,
    scales: Vec<f64>,
    nus: Vec<f64>,
    tc: Vec<TConst>,
}

struct DirectGrads {
    center: f64,
    s2: f64,
    pi: Vec<f64>,
    offsets: Vec<f64>,
    scales: Vec<f64>,
    nus: Vec<f64>,
}

impl DirectGrads {
    fn new(k: usize) -> Self {
        Self {
            center: 0.0,
            s2: 0.0,
            pi: vec![0.0; k],
            offsets: vec![0.0; k],
            scales: vec![0.0; k],
            nus: vec![0.0; k],
        }
    }

    fn sinks(&mut self) -> LocGrads<'_> {
        LocGrads {
            center: &mut self.center,
            s2: &mut self.s2,
            pi: &mut self.pi,
            offsets: &mut self.offsets,
            scales: &mut self.scales,
            nus: &mut self.nus,
        }
    }
}

impl DirectComponents {
    fn new(max_k: usize) -> Self {
        Self {
            k: 1,
            center: 0.0,
            pi: vec![0.0; max_k],
            offsets: vec![0.0; max_k],
            scales: vec![0.0; max_k],
            nus: vec![f64::INFINITY; max_k],
            tc: vec![TConst::gaussian(); max_k],
        }
    }

    fn fill(&mut self, arch: &Architecture, f: &[f64]) {
        let floor = arch.sigma_floor_sq;
        let scale = |raw: f64| (softplus(raw) + floor).sqrt();
        match arch.head {
            HeadKind::Gaussian | HeadKind::StudentT => {
                self.k = 1;
                self.center = f[0];
                self.pi[0] = 1.0;
                self.offsets[0] = 0.0;
                self.scales[0] = scale(f[1]);
                if arch.head == HeadKind::StudentT {
                    self.nus[0] = nu_from_logit(f[2]);
                    self.tc[0] = TConst::new(self.nus[0]);
                } else {
                    self.nus[0] = f64::INFINITY;
                    self.tc[0] = TConst::gaussian();
                }
            }
            _ => {
                let k = arch.regimes;
                self.k = k;
                self.center = 0.0;
                softmax_into(&f[..k], 1.0, &mut self.pi[..k]);
                for j in 0..k {
                    self.offsets[j] = f[k + j];
                    self.scales[j] = scale(f[2 * k + j]);
                    if arch.head == HeadKind::MdnT {
                        self.nus[j] = nu_from_logit(f[3 * k + j]);
                        self.tc[j] = TConst::new(self.nus[j]);
                    } else {
                        self.nus[j] = f64::INFINITY;
                        self.tc[j] = TConst::gaussian();
                    }
                }
            }
        }
    }

    fn inputs(&self, y: f64) -> LocInputs<'_> {
        LocInputs {
            y,
            center: self.center,
            s2: 0.0,
            pi: &self.pi[..self.k],
            offsets: &self.offsets[..self.k],
            scales: &self.scales[..self.k],
            tc: &self.tc[..self.k],
        }
    }

    /// Gradient with respect to the raw head fields, scaled by `coef`.
    fn backward(&self, arch: &Architecture, f: &[f64], g: &DirectGrads, coef: f64) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        let dscale = |raw: f64, sigma: f64| sigmoid(raw) / (2.0 * sigma);
        match arch.head {
            HeadKind::Gaussian | HeadKind::StudentT => {
                out[0] = coef * g.center;
                out[1] = coef * g.scales[0] * dscale(f[1], self.scales[0]);
                if arch.head == HeadKind::StudentT {
                    out[2] = coef * g.nus[0] * dnu_deta(f[2]);
                }
            }
            _ => {
                let k = self.k;
                let gp: Vec<f64> = g.pi[..k].iter().map(|v| coef * v).collect();
                softmax_backward(&self.pi[..k], 1.0, &gp, &mut out[..k]);
                for j in 0..k {
                    out[k + j] = coef * g.offsets[j];
                    out[2 * k + j] = coef * g.scales[j] * dscale(f[2 * k + j], self.scales[j]);
                    if arch.head == HeadKind::MdnT {
                        out[3 * k + j] = coef * g.nus[j] * dnu_deta(f[3 * k + j]);
                    }
                }
            }
        }
        out
    }
}
