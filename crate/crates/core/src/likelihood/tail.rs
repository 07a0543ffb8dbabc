use crate::error::{Error, Result};

/// Least-squares fit of log density against `log |y|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailFit {
    /// Estimates `-(nu_eff + 1)` for polynomial tails.
    pub slope: f64,
    /// Root-mean-square residual of the linear fit; large values flag a non-polynomial tail.
    pub rms_residual: f64,
}

/// `n` points spaced geometrically from `lo` to `hi`.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || n < 2 {
        return Err(Error::invalid("geometric grid needs 0 < lo < hi and at least two points"));
    }
    let ratio = (hi / lo).ln() / (n - 1) as f64;
    Ok((0..n).map(|i| lo * (ratio * i as f64).exp()).collect())
}

/// Fits the tail slope of `log_density` on a grid of positive abscissae.
pub fn estimate_tail_index(log_density: impl Fn(f64) -> f64, y_grid: &[f64]) -> Result<TailFit> {
    if y_grid.len() < 2 {
        return Err(Error::invalid("tail fit needs at least two grid points"));
    }
    let mut xs = Vec::with_capacity(y_grid.len());
    let mut ys = Vec::with_capacity(y_grid.len());
    for &y in y_grid {
        let ld = log_density(y);
        if !ld.is_finite() {
            return Err(Error::numerical(format!("density is not positive at y = {y}")));
        }
        xs.push(y.abs().ln());
        ys.push(ld);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("grid has a single distinct magnitude"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(TailFit {
        slope,
        rms_residual: (rss / n).sqrt(),
    })
}
