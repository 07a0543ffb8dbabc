use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Log of the location-scale Student-t density.
pub fn student_t_logpdf(y: f64, loc: f64, scale: f64, nu: f64) -> Result<f64> {
    if !(scale > 0.0) || !(nu > 0.0) {
        return Err(Error::invalid(format!("student-t needs scale > 0 and nu > 0, got {scale}, {nu}")));
    }
    if nu.is_infinite() {
        return Ok(gaussian_logpdf(y, loc, scale * scale));
    }
    Ok(TConst::new(nu).logpdf(y, loc, scale))
}

pub fn gaussian_logpdf(y: f64, loc: f64, var: f64) -> f64 {
    let r = y - loc;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

/// Per-`nu` normalising constant with its derivative, shared across locations.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TConst {
    pub nu: f64,
    pub log_norm: f64,
    pub dlog_norm: f64,
}

impl TConst {
    pub fn new(nu: f64) -> Self {
        let log_norm = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln();
        let dlog_norm = 0.5 * digamma(0.5 * (nu + 1.0)) - 0.5 * digamma(0.5 * nu) - 0.5 / nu;
        Self { nu, log_norm, dlog_norm }
    }

    /// Infinite `nu` stands for the Gaussian limit.
    pub fn gaussian() -> Self {
        Self {
            nu: f64::INFINITY,
            log_norm: -0.5 * LN_2PI,
            dlog_norm: 0.0,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        self.nu.is_infinite()
    }

    #[inline]
    pub fn logpdf(&self, y: f64, loc: f64, scale: f64) -> f64 {
        let z = (y - loc) / scale;
        if self.is_gaussian() {
            return self.log_norm - scale.ln() - 0.5 * z * z;
        }
        self.log_norm - scale.ln() - 0.5 * (self.nu + 1.0) * (z * z / self.nu).ln_1p()
    }

    /// Log density plus partials with respect to location, scale and `nu`.
    #[inline]
    pub fn logpdf_grad(&self, y: f64, loc: f64, scale: f64) -> (f64, f64, f64, f64) {
        let z = (y - loc) / scale;
        let z2 = z * z;
        if self.is_gaussian() {
            let lp = self.log_norm - scale.ln() - 0.5 * z2;
            return (lp, z / scale, (z2 - 1.0) / scale, 0.0);
        }
        let nu = self.nu;
        let l1p = (z2 / nu).ln_1p();
        let lp = self.log_norm - scale.ln() - 0.5 * (nu + 1.0) * l1p;
        let denom = nu + z2;
        let dloc = (nu + 1.0) * z / (scale * denom);
        let dscale = -1.0 / scale + (nu + 1.0) * z2 / (scale * denom);
        let dnu = self.dlog_norm - 0.5 * l1p + (nu + 1.0) * z2 / (2.0 * nu * denom);
        (lp, dloc, dscale, dnu)
    }
}
