//! Base kernels, the gate-weighted regime-mixing kernel and Gram assembly.
//!
//! Scalar entry points (`rbf`, `rq`, `mix_kernel`, `gram`) serve tests and
//! diagnostics. The model uses the batched [`MixGram`] path, which keeps the
//! per-regime blocks around for the backward pass.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateWeights;

/// Default dimension of each regime feature vector.
pub const DEFAULT_FEATURE_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKernel {
    Rbf,
    RationalQuadratic,
    /// Finite-dimensional kernel `a^2 <z, z'>`; only used to exercise the direct-sum identity.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeKernelParams {
    pub amplitude: f64,
    pub lengthscale: f64,
}

impl RegimeKernelParams {
    pub fn new(amplitude: f64, lengthscale: f64) -> Result<Self> {
        if !(amplitude > 0.0 && lengthscale > 0.0) {
            return Err(Error::invalid("kernel amplitude and lengthscale must be positive"));
        }
        Ok(Self {
            amplitude,
            lengthscale,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RQKernelParams {
    pub amplitude: f64,
    pub lengthscale: f64,
    pub alpha: f64,
}

impl RQKernelParams {
    pub fn new(amplitude: f64, lengthscale: f64, alpha: f64) -> Result<Self> {
        if !(amplitude > 0.0 && lengthscale > 0.0 && alpha > 0.0) {
            return Err(Error::invalid("rational quadratic parameters must be positive"));
        }
        Ok(Self {
            amplitude,
            lengthscale,
            alpha,
        })
    }
}

/// One regime's base kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RegimeKernel {
    Rbf(RegimeKernelParams),
    Rq(RQKernelParams),
    Linear { amplitude: f64 },
}

impl RegimeKernel {
    pub fn eval(&self, z: &[f64], z2: &[f64]) -> Result<f64> {
        match self {
            RegimeKernel::Rbf(p) => rbf(z, z2, p),
            RegimeKernel::Rq(p) => rq(z, z2, p),
            RegimeKernel::Linear { amplitude } => linear(z, z2, *amplitude),
        }
    }
}

/// A forecast location as seen by the kernel: its gate and one feature vector per regime.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationRepr {
    pub gate: GateWeights,
    pub features: Vec<Vec<f64>>,
}

impl LocationRepr {
    pub fn new(gate: GateWeights, features: Vec<Vec<f64>>) -> Result<Self> {
        if features.len() != gate.len() {
            return Err(Error::shape(format!(
                "{} feature vectors for a gate of length {}",
                features.len(),
                gate.len()
            )));
        }
        if features.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite regime feature"));
        }
        Ok(Self { gate, features })
    }
}

fn check_dims(z: &[f64], z2: &[f64]) -> Result<()> {
    if z.len() != z2.len() {
        return Err(Error::shape(format!("feature dims {} and {}", z.len(), z2.len())));
    }
    Ok(())
}

/// Squared distance via the expanded form, clamped at zero.
fn sq_dist(z: &[f64], z2: &[f64]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    (dot(z, z) + dot(z2, z2) - 2.0 * dot(z, z2)).max(0.0)
}

pub fn rbf(z: &[f64], z2: &[f64], params: &RegimeKernelParams) -> Result<f64> {
    check_dims(z, z2)?;
    let l2 = params.lengthscale * params.lengthscale;
    Ok(params.amplitude.powi(2) * (-sq_dist(z, z2) / (2.0 * l2)).exp())
}

pub fn rq(z: &[f64], z2: &[f64], params: &RQKernelParams) -> Result<f64> {
    check_dims(z, z2)?;
    let l2 = params.lengthscale * params.lengthscale;
    let u = 1.0 + sq_dist(z, z2) / (2.0 * params.alpha * l2);
    Ok(params.amplitude.powi(2) * u.powf(-params.alpha))
}

pub fn linear(z: &[f64], z2: &[f64], amplitude: f64) -> Result<f64> {
    check_dims(z, z2)?;
    Ok(amplitude * amplitude * z.iter().zip(z2).map(|(a, b)| a * b).sum::<f64>())
}

/// `sum_r pi_r(x) pi_r(x') K_r(z_r(x), z_r(x'))`.
pub fn mix_kernel(x1: &LocationRepr, x2: &LocationRepr, regimes: &[RegimeKernel]) -> Result<f64> {
    if x1.gate.len() != regimes.len() || x2.gate.len() != regimes.len() {
        return Err(Error::shape(format!(
            "gate lengths {} and {} against {} regime kernels",
            x1.gate.len(),
            x2.gate.len(),
            regimes.len()
        )));
    }
    let (p1, p2) = (x1.gate.as_slice(), x2.gate.as_slice());
    let mut total = 0.0;
    for (r, k) in regimes.iter().enumerate() {
        let w = p1[r] * p2[r];
        if w != 0.0 {
            total += w * k.eval(&x1.features[r], &x2.features[r])?;
        }
    }
    Ok(total)
}

/// Dense cross-Gram of the mixing kernel.
pub fn gram(locs: &[LocationRepr], locs2: &[LocationRepr], regimes: &[RegimeKernel]) -> Result<DMatrix<f64>> {
    if locs.is_empty() || locs2.is_empty() {
        return Err(Error::invalid("gram needs nonempty location lists"));
    }
    let mut k = DMatrix::zeros(locs.len(), locs2.len());
    for (i, a) in locs.iter().enumerate() {
        for (j, b) in locs2.iter().enumerate() {
            k[(i, j)] = mix_kernel(a, b, regimes)?;
        }
    }
    Ok(k)
}

/// Explicit feature map `concat_r pi_r a_r z_r` for linear base kernels.
pub fn direct_sum_embed(loc: &LocationRepr, regimes: &[RegimeKernel]) -> Result<Vec<f64>> {
    if loc.gate.len() != regimes.len() {
        return Err(Error::shape("gate length differs from regime count"));
    }
    let mut out = Vec::new();
    for (r, k) in regimes.iter().enumerate() {
        let RegimeKernel::Linear { amplitude } = k else {
            return Err(Error::Unsupported(
                "direct-sum embedding needs a finite-dimensional (linear) base kernel".into(),
            ));
        };
        let scale = loc.gate.as_slice()[r] * amplitude;
        out.extend(loc.features[r].iter().map(|x| scale * x));
    }
    Ok(out)
}

/// Smallest eigenvalue of a symmetric matrix divided by the largest absolute eigenvalue.
pub fn min_relative_eigenvalue(k: &DMatrix<f64>) -> f64 {
    let sym = (k + k.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let max_abs = eig.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    if max_abs == 0.0 {
        return 0.0;
    }
    eig.min() / max_abs
}

/// Draws log-uniform amplitudes in [0.5, 1.5] and lengthscales in [0.5, 5].
pub fn init_log_params<R: Rng + ?Sized>(rng: &mut R, regimes: usize) -> (Vec<f64>, Vec<f64>) {
    let log_uniform = |rng: &mut R, lo: f64, hi: f64| rng.random_range(lo.ln()..hi.ln());
    let amps = (0..regimes).map(|_| log_uniform(rng, 0.5, 1.5)).collect();
    let lens = (0..regimes).map(|_| log_uniform(rng, 0.5, 5.0)).collect();
    (amps, lens)
}

// ---------------------------------------------------------------------------
// Batched path
// ---------------------------------------------------------------------------

/// Locations stored column-wise: `gates` is `N x R`, `features[r]` is `N x d_g`.
///
/// Gates are arbitrary reals here, so PSD checks can go beyond the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprBatch {
    pub gates: DMatrix<f64>,
    pub features: Vec<DMatrix<f64>>,
}

impl ReprBatch {
    pub fn len(&self) -> usize {
        self.gates.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.nrows() == 0
    }

    pub fn regimes(&self) -> usize {
        self.gates.ncols()
    }

    pub fn zeros(n: usize, regimes: usize, dim: usize) -> Self {
        Self {
            gates: DMatrix::zeros(n, regimes),
            features: vec![DMatrix::zeros(n, dim); regimes],
        }
    }

    pub fn from_locations(locs: &[LocationRepr]) -> Result<Self> {
        let first = locs.first().ok_or_else(|| Error::invalid("empty location list"))?;
        let r = first.gate.len();
        let dim = first.features.first().map_or(0, Vec::len);
        let mut out = Self::zeros(locs.len(), r, dim);
        for (i, loc) in locs.iter().enumerate() {
            if loc.gate.len() != r || loc.features.iter().any(|f| f.len() != dim) {
                return Err(Error::shape("ragged location list"));
            }
            for rr in 0..r {
                out.gates[(i, rr)] = loc.gate.as_slice()[rr];
                for k in 0..dim {
                    out.features[rr][(i, k)] = loc.features[rr][k];
                }
            }
        }
        Ok(out)
    }

    pub fn location(&self, i: usize) -> LocationRepr {
        let gate = GateWeights::from_raw(self.gates.row(i).iter().copied().collect());
        let features = self
            .features
            .iter()
            .map(|f| f.row(i).iter().copied().collect())
            .collect();
        LocationRepr { gate, features }
    }

    pub(crate) fn add_assign(&mut self, other: &ReprBatch) {
        self.gates += &other.gates;
        for (a, b) in self.features.iter_mut().zip(&other.features) {
            *a += b;
        }
    }
}

/// Kernel hyperparameters in log space, one entry per regime.
#[derive(Clone, Copy, Debug)]
pub struct KernelView<'a> {
    pub kind: BaseKernel,
    pub log_amp: &'a [f64],
    pub log_len: &'a [f64],
    /// Only read for the rational quadratic kernel.
    pub log_alpha: &'a [f64],
}

impl<'a> KernelView<'a> {
    pub fn regime_kernels(&self) -> Vec<RegimeKernel> {
        (0..self.log_amp.len())
            .map(|r| {
                let amplitude = self.log_amp[r].exp();
                let lengthscale = self.log_len[r].exp();
                match self.kind {
                    BaseKernel::Rbf => RegimeKernel::Rbf(RegimeKernelParams {
                        amplitude,
                        lengthscale,
                    }),
                    BaseKernel::RationalQuadratic => RegimeKernel::Rq(RQKernelParams {
                        amplitude,
                        lengthscale,
                        alpha: self.log_alpha[r].exp(),
                    }),
                    BaseKernel::Linear => RegimeKernel::Linear { amplitude },
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct KernelGrads {
    pub log_amp: Vec<f64>,
    pub log_len: Vec<f64>,
    pub log_alpha: Vec<f64>,
}

impl KernelGrads {
    pub fn zeros(regimes: usize) -> Self {
        Self {
            log_amp: vec![0.0; regimes],
            log_len: vec![0.0; regimes],
            log_alpha: vec![0.0; regimes],
        }
    }
}

/// Cross-Gram between two batches with the per-regime blocks kept for backward.
pub struct MixGram {
    pub k: DMatrix<f64>,
    parts: Vec<DMatrix<f64>>,
    sq: Vec<DMatrix<f64>>,
}

fn pairwise_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let na: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
    let nb: Vec<f64> = b.row_iter().map(|r| r.norm_squared()).collect();
    let mut d = a * b.transpose();
    for j in 0..d.ncols() {
        for i in 0..d.nrows() {
            d[(i, j)] = (na[i] + nb[j] - 2.0 * d[(i, j)]).max(0.0);
        }
    }
    d
}

impl MixGram {
    pub fn new(a: &ReprBatch, b: &ReprBatch, view: KernelView<'_>) -> Self {
        let r = a.regimes();
        let mut k = DMatrix::zeros(a.len(), b.len());
        let mut parts = Vec::with_capacity(r);
        let mut sq = Vec::with_capacity(r);
        for rr in 0..r {
            let d2 = pairwise_sq(&a.features[rr], &b.features[rr]);
            let amp2 = (2.0 * view.log_amp[rr]).exp();
            let l2 = (2.0 * view.log_len[rr]).exp();
            let kr = match view.kind {
                BaseKernel::Rbf => d2.map(|d| amp2 * (-d / (2.0 * l2)).exp()),
                BaseKernel::RationalQuadratic => {
                    let alpha = view.log_alpha[rr].exp();
                    d2.map(|d| amp2 * (1.0 + d / (2.0 * alpha * l2)).powf(-alpha))
                }
                BaseKernel::Linear => &a.features[rr] * b.features[rr].transpose() * amp2,
            };
            let pa = a.gates.column(rr);
            let pb = b.gates.column(rr);
            for j in 0..k.ncols() {
                let pj = pb[j];
                if pj == 0.0 {
                    continue;
                }
                for i in 0..k.nrows() {
                    k[(i, j)] += pa[i] * pj * kr[(i, j)];
                }
            }
            parts.push(kr);
            sq.push(d2);
        }
        Self { k, parts, sq }
    }

    /// Pulls `g = dL/dK` back onto both location batches and the kernel hyperparameters.
    pub fn backward(
        &self,
        a: &ReprBatch,
        b: &ReprBatch,
        view: KernelView<'_>,
        g: &DMatrix<f64>,
        grad_a: &mut ReprBatch,
        grad_b: &mut ReprBatch,
        grad_k: &mut KernelGrads,
    ) {
        for rr in 0..a.regimes() {
            let kr = &self.parts[rr];
            let d2 = &self.sq[rr];
            let pa = a.gates.column(rr).clone_owned();
            let pb = b.gates.column(rr).clone_owned();
            let gk = g.component_mul(kr);
            grad_a.gates.column_mut(rr).gemv(1.0, &gk, &pb, 1.0);
            grad_b.gates.column_mut(rr).gemv_tr(1.0, &gk, &pa, 1.0);

            // C_ij K_ij with C = G o (pa pb^T)
            let mut ck = gk;
            for j in 0..ck.ncols() {
                for i in 0..ck.nrows() {
                    ck[(i, j)] *= pa[i] * pb[j];
                }
            }
            grad_k.log_amp[rr] += 2.0 * ck.sum();
            let l2 = (2.0 * view.log_len[rr]).exp();
            let e = match view.kind {
                BaseKernel::Rbf => {
                    let e = &ck / l2;
                    grad_k.log_len[rr] += e.component_mul(d2).sum();
                    e
                }
                BaseKernel::RationalQuadratic => {
                    let alpha = view.log_alpha[rr].exp();
                    let mut e = ck.clone();
                    let mut d_alpha = 0.0;
                    for idx in 0..e.len() {
                        let u = 1.0 + d2[idx] / (2.0 * alpha * l2);
                        e[idx] = ck[idx] / (l2 * u);
                        d_alpha += ck[idx] * alpha * (-u.ln() + (u - 1.0) / u);
                    }
                    grad_k.log_len[rr] += e.component_mul(d2).sum();
                    grad_k.log_alpha[rr] += d_alpha;
                    e
                }
                BaseKernel::Linear => {
                    // K = a^2 Za Zb^T: feature gradients are C K / K scaled back by a^2
                    let amp2 = (2.0 * view.log_amp[rr]).exp();
                    let mut c = g.clone();
                    for j in 0..c.ncols() {
                        for i in 0..c.nrows() {
                            c[(i, j)] *= pa[i] * pb[j] * amp2;
                        }
                    }
                    grad_a.features[rr].gemm(1.0, &c, &b.features[rr], 1.0);
                    grad_b.features[rr].gemm_tr(1.0, &c, &a.features[rr], 1.0);
                    continue;
                }
            };
            // dK/dz_i = -E_ij (z_i - z_j) for both stationary kernels
            let row_sum: DVector<f64> = e.column_sum();
            let col_sum: DVector<f64> = e.row_sum().transpose();
            let ga = &mut grad_a.features[rr];
            ga.gemm(1.0, &e, &b.features[rr], 1.0);
            for i in 0..ga.nrows() {
                let s = row_sum[i];
                for k in 0..ga.ncols() {
                    ga[(i, k)] -= s * a.features[rr][(i, k)];
                }
            }
            let gb = &mut grad_b.features[rr];
            gb.gemm_tr(1.0, &e, &a.features[rr], 1.0);
            for j in 0..gb.nrows() {
                let s = col_sum[j];
                for k in 0..gb.ncols() {
                    gb[(j, k)] -= s * b.features[rr][(j, k)];
                }
            }
        }
    }
}

/// Prior variance at each location: `sum_r pi_r^2 a_r^2` for stationary kernels.
pub fn mix_diag(a: &ReprBatch, view: KernelView<'_>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len());
    for rr in 0..a.regimes() {
        let amp2 = (2.0 * view.log_amp[rr]).exp();
        for i in 0..a.len() {
            let p = a.gates[(i, rr)];
            let self_k = match view.kind {
                BaseKernel::Linear => a.features[rr].row(i).norm_squared(),
                _ => 1.0,
            };
            out[i] += p * p * amp2 * self_k;
        }
    }
    out
}

pub fn mix_diag_backward(
    a: &ReprBatch,
    view: KernelView<'_>,
    g: &DVector<f64>,
    grad_a: &mut ReprBatch,
    grad_k: &mut KernelGrads,
) {
    debug_assert!(view.kind != BaseKernel::Linear);
    for rr in 0..a.regimes() {
        let amp2 = (2.0 * view.log_amp[rr]).exp();
        for i in 0..a.len() {
            let p = a.gates[(i, rr)];
            grad_a.gates[(i, rr)] += g[i] * 2.0 * p * amp2;
            grad_k.log_amp[rr] += g[i] * 2.0 * p * p * amp2;
        }
    }
}
