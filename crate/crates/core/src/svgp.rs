//! Sparse variational GP residual: inducing state, marginal posterior at
//! forecast locations, the gate-weighted prior mean and the Gaussian KL.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::gate::GateWeights;
use crate::kernels::{gram, mix_kernel, LocationRepr, RegimeKernel};

/// Diagonal jitters tried in order by [`chol_with_jitter`].
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// Per-regime constant offsets `b_r` of the residual prior mean.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeOffsets {
    pub b: Vec<f64>,
}

impl RegimeOffsets {
    pub fn new(b: Vec<f64>) -> Result<Self> {
        if b.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite regime offset"));
        }
        Ok(Self { b })
    }

    pub fn zeros(r: usize) -> Self {
        Self { b: vec![0.0; r] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualPosterior {
    pub mean: f64,
    pub variance: f64,
}

impl ResidualPosterior {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !mean.is_finite() || !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::invalid("residual posterior needs a finite mean and non-negative variance"));
        }
        Ok(Self { mean, variance })
    }
}

/// Inducing locations plus the variational Gaussian `q(u) = N(m, S)`, `S = L L^T`.
#[derive(Clone, Debug)]
pub struct InducingState {
    pub locations: Vec<LocationRepr>,
    pub m: DVector<f64>,
    pub s_factor: DMatrix<f64>,
}

impl InducingState {
    pub fn new(locations: Vec<LocationRepr>, m: DVector<f64>, s_factor: DMatrix<f64>) -> Result<Self> {
        let big_m = locations.len();
        if big_m == 0 {
            return Err(Error::invalid("at least one inducing point is required"));
        }
        if m.len() != big_m || s_factor.shape() != (big_m, big_m) {
            return Err(Error::shape(format!(
                "inducing mean {} and factor {:?} for {big_m} locations",
                m.len(),
                s_factor.shape()
            )));
        }
        if (0..big_m).any(|i| !(s_factor[(i, i)] > 0.0)) {
            return Err(Error::invalid("S factor needs a positive diagonal"));
        }
        let s_factor = s_factor.lower_triangle();
        Ok(Self {
            locations,
            m,
            s_factor,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.s_factor * self.s_factor.transpose()
    }
}

/// Cholesky factor of `A + jitter I` for the smallest working jitter.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

pub fn chol_with_jitter(matrix: &DMatrix<f64>) -> Result<JitteredCholesky> {
    if !matrix.is_square() {
        return Err(Error::shape("cholesky needs a square matrix"));
    }
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("non-finite entry in matrix to factorise"));
    }
    for &jitter in &JITTER_LADDER {
        let mut a = matrix.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(a) {
            if chol.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                return Ok(JitteredCholesky { chol, jitter });
            }
        }
    }
    Err(Error::Numerical {
        message: "cholesky failed at every jitter level".into(),
        last_jitter: JITTER_LADDER.last().copied(),
    })
}

/// `m_0(x) = sum_r pi_r b_r`.
pub fn residual_prior_mean(gate: &GateWeights, offsets: &RegimeOffsets) -> Result<f64> {
    if gate.len() != offsets.b.len() {
        return Err(Error::shape("gate and offsets differ in length"));
    }
    Ok(gate.as_slice().iter().zip(&offsets.b).map(|(p, b)| p * b).sum())
}

fn inducing_prior(ind: &InducingState, offsets: &RegimeOffsets, regimes: &[RegimeKernel]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let kzz = gram(&ind.locations, &ind.locations, regimes)?;
    let m0z = ind
        .locations
        .iter()
        .map(|z| residual_prior_mean(&z.gate, offsets))
        .collect::<Result<Vec<_>>>()?;
    Ok((kzz, DVector::from_vec(m0z)))
}

/// Variational marginal `q(delta(x))` at one location.
pub fn marginal_posterior(
    loc: &LocationRepr,
    ind: &InducingState,
    offsets: &RegimeOffsets,
    regimes: &[RegimeKernel],
) -> Result<ResidualPosterior> {
    let (kzz, m0z) = inducing_prior(ind, offsets, regimes)?;
    let kxz = gram(std::slice::from_ref(loc), &ind.locations, regimes)?;
    let kxx = DVector::from_element(1, mix_kernel(loc, loc, regimes)?);
    let m0x = DVector::from_element(1, residual_prior_mean(&loc.gate, offsets)?);
    let fwd = SvgpForward::new(&kzz, &kxz, &kxx, &m0x, &ind.m, &m0z, &ind.s_factor)?;
    Ok(ResidualPosterior {
        mean: fwd.mean[0],
        variance: fwd.var[0],
    })
}

/// `KL(q(u) || p(u))` for the inducing state.
pub fn kl_to_prior(ind: &InducingState, offsets: &RegimeOffsets, regimes: &[RegimeKernel]) -> Result<f64> {
    let (kzz, m0z) = inducing_prior(ind, offsets, regimes)?;
    gaussian_kl(&(&ind.m - m0z), &kzz, &ind.s_factor)
}

/// `KL(N(mu + v, L L^T) || N(mu, K))` from triangular factors.
pub fn gaussian_kl(v: &DVector<f64>, k: &DMatrix<f64>, s_factor: &DMatrix<f64>) -> Result<f64> {
    let chol = chol_with_jitter(k)?;
    let big_m = v.len() as f64;
    // tr(K^-1 S) = ||L_K^-1 L_S||_F^2
    let w = chol
        .chol
        .l_dirty()
        .solve_lower_triangular(&s_factor.lower_triangle())
        .ok_or_else(|| Error::numerical("triangular solve failed"))?;
    let alpha = chol.chol.solve(v);
    let log_det_s = 2.0 * s_factor.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>();
    Ok(0.5 * (w.norm_squared() + v.dot(&alpha) - big_m + chol.log_det() - log_det_s))
}

/// Forward pass of the SVGP marginals over a batch with cached intermediates.
pub struct SvgpForward {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub kl: f64,
    pub jitter: f64,
    raw_var: DVector<f64>,
    p: DMatrix<f64>,
    alpha: DVector<f64>,
    v: DVector<f64>,
    s: DMatrix<f64>,
    a: DMatrix<f64>,
    sa: DMatrix<f64>,
    ls: DMatrix<f64>,
}

/// Gradients of a scalar loss with respect to the SVGP inputs.
pub struct SvgpGrads {
    pub kzz: DMatrix<f64>,
    pub kxz: DMatrix<f64>,
    pub kxx: DVector<f64>,
    pub m0x: DVector<f64>,
    pub m: DVector<f64>,
    pub m0z: DVector<f64>,
    pub s_factor: DMatrix<f64>,
}

impl SvgpForward {
    /// `kxz` is `N x M`; `ls` is the lower-triangular factor of `S`.
    pub fn new(
        kzz: &DMatrix<f64>,
        kxz: &DMatrix<f64>,
        kxx: &DVector<f64>,
        m0x: &DVector<f64>,
        m: &DVector<f64>,
        m0z: &DVector<f64>,
        ls: &DMatrix<f64>,
    ) -> Result<Self> {
        let big_m = kzz.nrows();
        if kxz.ncols() != big_m || m.len() != big_m || m0z.len() != big_m || ls.shape() != (big_m, big_m) {
            return Err(Error::shape("inconsistent inducing dimensions"));
        }
        if kxz.nrows() != kxx.len() || kxx.len() != m0x.len() {
            return Err(Error::shape("inconsistent location dimensions"));
        }
        let chol = chol_with_jitter(kzz)?;
        let ls = ls.lower_triangle();
        let s = &ls * ls.transpose();
        let v = m - m0z;
        let alpha = chol.chol.solve(&v);
        let a = chol.chol.solve(&kxz.transpose());
        let sa = &s * &a;
        let n = kxx.len();
        let mean = m0x + kxz * &alpha;
        let mut raw_var = DVector::zeros(n);
        let mut var = DVector::zeros(n);
        for i in 0..n {
            let kpk = kxz.row(i).transpose().dot(&a.column(i));
            let quad = a.column(i).dot(&sa.column(i));
            raw_var[i] = kxx[i] - kpk + quad;
            if raw_var[i] < -1e-6 * kxx[i].abs() {
                log::warn!(
                    "posterior variance {:.3e} below zero beyond tolerance (prior {:.3e})",
                    raw_var[i],
                    kxx[i]
                );
            }
            var[i] = raw_var[i].max(0.0);
        }
        if mean.iter().chain(var.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numerical {
                message: "non-finite posterior marginal".into(),
                last_jitter: Some(chol.jitter),
            });
        }
        let p = chol.chol.inverse();
        let log_det_s = 2.0 * ls.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>();
        let kl = 0.5 * (p.component_mul(&s).sum() + v.dot(&alpha) - big_m as f64 + chol.log_det() - log_det_s);
        Ok(Self {
            mean,
            var,
            kl,
            jitter: chol.jitter,
            raw_var,
            p,
            alpha,
            v,
            s,
            a,
            sa,
            ls,
        })
    }

    /// Pulls back `gm = dL/dmean`, `gs = dL/dvar` and `g_kl = dL/dKL`.
    pub fn backward(&self, kxz: &DMatrix<f64>, gm: &DVector<f64>, gs: &DVector<f64>, g_kl: f64) -> SvgpGrads {
        let n = gm.len();
        let big_m = self.p.nrows();
        // the variance floor has zero slope below zero
        let gs: DVector<f64> = DVector::from_fn(n, |i, _| if self.raw_var[i] >= 0.0 { gs[i] } else { 0.0 });

        // dKxz row i = gm_i alpha + 2 gs_i (P SA_i - A_i)
        let psa = &self.p * &self.sa;
        let mut g_kxz_t = (&psa - &self.a) * DMatrix::from_diagonal(&(&gs * 2.0));
        g_kxz_t.ger(1.0, &self.alpha, gm, 1.0);
        let g_kxz = g_kxz_t.transpose();

        // gradient with respect to P = K^-1 before chaining through the inverse
        let g_alpha = kxz.transpose() * gm;
        let mut g_p = &g_alpha * self.v.transpose();
        let kt = kxz.transpose();
        let kt_gs = &kt * DMatrix::from_diagonal(&gs);
        g_p -= &kt_gs * kxz;
        g_p += &kt_gs * self.sa.transpose();
        g_p += &self.sa * kt_gs.transpose();
        g_p += (&self.s + &self.v * self.v.transpose()) * (0.5 * g_kl);
        let mut g_kzz = -(&self.p * g_p * &self.p);
        g_kzz += &self.p * (0.5 * g_kl);

        let g_v = &self.p * &g_alpha + &self.alpha * g_kl;

        let mut g_s = &self.a * DMatrix::from_diagonal(&gs) * self.a.transpose();
        g_s += &self.p * (0.5 * g_kl);
        let mut g_ls = ((&g_s + g_s.transpose()) * &self.ls).lower_triangle();
        for i in 0..big_m {
            g_ls[(i, i)] -= g_kl / self.ls[(i, i)];
        }

        SvgpGrads {
            kzz: g_kzz,
            kxz: g_kxz,
            kxx: gs.clone(),
            m0x: gm.clone(),
            m: g_v.clone(),
            m0z: -g_v,
            s_factor: g_ls,
        }
    }
}
