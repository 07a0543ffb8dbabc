//! Window normalisation, the MLP backbone and the per-location head outputs.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};

/// Floor on the per-window channel scale so constant windows keep a finite Jacobian.
pub const REVIN_SCALE_FLOOR: f64 = 1e-6;
pub const DEFAULT_WIDTH: usize = 128;

/// A lookback window of `L` rows by `D` channels with its forecast horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub values: DMatrix<f64>,
    pub horizon: usize,
}

impl Window {
    pub fn new(values: DMatrix<f64>, horizon: usize) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 || horizon == 0 {
            return Err(Error::invalid("window needs L >= 1, D >= 1 and H >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("window contains non-finite values"));
        }
        Ok(Self { values, horizon })
    }

    pub fn lookback(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RevinStats {
    pub loc: Vec<f64>,
    pub scale: Vec<f64>,
}

impl RevinStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            loc: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }
}

/// Per-channel mean and population standard deviation of a window.
pub fn revin_stats(values: &DMatrix<f64>) -> RevinStats {
    let n = values.nrows() as f64;
    let mut loc = Vec::with_capacity(values.ncols());
    let mut scale = Vec::with_capacity(values.ncols());
    for col in values.column_iter() {
        let m = col.sum() / n;
        let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        loc.push(m);
        scale.push(var.sqrt().max(REVIN_SCALE_FLOOR));
    }
    RevinStats { loc, scale }
}

pub fn revin_normalize(window: &Window) -> (Window, RevinStats) {
    let stats = revin_stats(&window.values);
    let mut values = window.values.clone();
    for (d, mut col) in values.column_iter_mut().enumerate() {
        col.apply(|x| *x = (*x - stats.loc[d]) / stats.scale[d]);
    }
    (
        Window {
            values,
            horizon: window.horizon,
        },
        stats,
    )
}

/// `y = y_norm * s_d + m_d`, column by column.
pub fn revin_denormalize(values: &DMatrix<f64>, stats: &RevinStats) -> Result<DMatrix<f64>> {
    if values.ncols() != stats.loc.len() || stats.scale.len() != stats.loc.len() {
        return Err(Error::shape("channel count does not match the statistics"));
    }
    let mut out = values.clone();
    for (d, mut col) in out.column_iter_mut().enumerate() {
        col.apply(|x| *x = *x * stats.scale[d] + stats.loc[d]);
    }
    Ok(out)
}

/// Change of variables back to the input scale: `log p_Y = log p_norm - log s_d`.
pub fn original_scale_logdensity(normalized_logdensity: f64, stats: &RevinStats, channel: usize) -> f64 {
    normalized_logdensity - stats.scale[channel].ln()
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Shapes of the two-hidden-layer backbone followed by one linear head block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpShape {
    pub input: usize,
    pub width: usize,
    pub output: usize,
}

impl MlpShape {
    /// Parameter counts of `w1, b1, w2, b2, w_head, b_head`, in storage order.
    pub fn block_sizes(&self) -> [usize; 6] {
        [
            self.width * self.input,
            self.width,
            self.width * self.width,
            self.width,
            self.output * self.width,
            self.output,
        ]
    }

    pub fn len(&self) -> usize {
        self.block_sizes().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniform fan-in initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights; zero biases.
pub fn init_mlp<R: Rng + ?Sized>(shape: MlpShape, rng: &mut R, out: &mut [f64]) {
    assert_eq!(out.len(), shape.len());
    let sizes = shape.block_sizes();
    let fan_ins = [shape.input, 0, shape.width, 0, shape.width, 0];
    let mut offset = 0;
    for (size, fan) in sizes.iter().zip(fan_ins) {
        let block = &mut out[offset..offset + size];
        if fan == 0 {
            block.fill(0.0);
        } else {
            let bound = 1.0 / (fan as f64).sqrt();
            for v in block.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        offset += size;
    }
}

/// Activations kept for the backward pass; columns are samples.
pub struct MlpCache {
    input: DMatrix<f64>,
    pre1: DMatrix<f64>,
    h1: DMatrix<f64>,
    pre2: DMatrix<f64>,
    h2: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

fn split(shape: MlpShape, params: &[f64]) -> [&[f64]; 6] {
    let sizes = shape.block_sizes();
    let mut rest = params;
    let mut out: [&[f64]; 6] = [&[]; 6];
    for (slot, size) in out.iter_mut().zip(sizes) {
        let (a, b) = rest.split_at(size);
        *slot = a;
        rest = b;
    }
    out
}

fn affine(w: &[f64], b: &[f64], rows: usize, cols: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
    let w = DMatrix::from_column_slice(rows, cols, w);
    let mut out = w * x;
    for mut col in out.column_iter_mut() {
        for (o, bb) in col.iter_mut().zip(b) {
            *o += bb;
        }
    }
    out
}

/// `flatten -> W -> W -> heads` with softplus activations. `input` is `in x batch`.
pub fn mlp_forward(shape: MlpShape, params: &[f64], input: DMatrix<f64>) -> MlpCache {
    let [w1, b1, w2, b2, wh, bh] = split(shape, params);
    let pre1 = affine(w1, b1, shape.width, shape.input, &input);
    let h1 = pre1.map(softplus);
    let pre2 = affine(w2, b2, shape.width, shape.width, &h1);
    let h2 = pre2.map(softplus);
    let output = affine(wh, bh, shape.output, shape.width, &h2);
    MlpCache {
        input,
        pre1,
        h1,
        pre2,
        h2,
        output,
    }
}

/// Accumulates parameter gradients for `g_out = dL/d output`.
pub fn mlp_backward(shape: MlpShape, params: &[f64], cache: &MlpCache, g_out: &DMatrix<f64>, grad: &mut [f64]) {
    let [_, _, w2, _, wh, _] = split(shape, params);
    let sizes = shape.block_sizes();
    let mut offsets = [0usize; 6];
    for i in 1..6 {
        offsets[i] = offsets[i - 1] + sizes[i - 1];
    }
    let mut add_block = |idx: usize, m: &DMatrix<f64>| {
        for (g, v) in grad[offsets[idx]..offsets[idx] + sizes[idx]].iter_mut().zip(m.iter()) {
            *g += v;
        }
    };
    let row_sums = |m: &DMatrix<f64>| DMatrix::from_iterator(m.nrows(), 1, m.row_iter().map(|r| r.sum()));

    add_block(4, &(g_out * cache.h2.transpose()));
    add_block(5, &row_sums(g_out));
    let wh = DMatrix::from_column_slice(shape.output, shape.width, wh);
    let g_h2 = wh.transpose() * g_out;
    let g_pre2 = g_h2.zip_map(&cache.pre2, |g, a| g * crate::gate::sigmoid(a));
    add_block(2, &(&g_pre2 * cache.h1.transpose()));
    add_block(3, &row_sums(&g_pre2));
    let w2 = DMatrix::from_column_slice(shape.width, shape.width, w2);
    let g_h1 = w2.transpose() * &g_pre2;
    let g_pre1 = g_h1.zip_map(&cache.pre1, |g, a| g * crate::gate::sigmoid(a));
    add_block(0, &(&g_pre1 * cache.input.transpose()));
    add_block(1, &row_sums(&g_pre1));
}

/// Head outputs for one window, indexed by horizon step `t` and channel `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub horizon: usize,
    pub channels: usize,
    pub regimes: usize,
    pub feature_dim: usize,
    /// `H x D` location head.
    pub mu: DMatrix<f64>,
    /// Location-major, `R_max - 1` logits per location.
    pub gate_logits: Vec<f64>,
    /// Location-major, then regime, then feature.
    pub features: Vec<f64>,
    /// `H x D`, non-negative.
    pub v_res: DMatrix<f64>,
}

impl HeadOutputs {
    fn loc(&self, t: usize, d: usize) -> usize {
        t * self.channels + d
    }

    pub fn gate_logits_at(&self, t: usize, d: usize) -> &[f64] {
        let k = self.gate_logits.len() / (self.horizon * self.channels);
        let l = self.loc(t, d);
        &self.gate_logits[l * k..(l + 1) * k]
    }

    pub fn features_at(&self, t: usize, d: usize, r: usize) -> &[f64] {
        let l = self.loc(t, d);
        let start = (l * self.regimes + r) * self.feature_dim;
        &self.features[start..start + self.feature_dim]
    }

    /// `(H, D)`, `(H, D, R-1)`, `(H, D, R, d_g)`, `(H, D)`.
    pub fn shapes(&self) -> [Vec<usize>; 4] {
        let (h, d) = (self.horizon, self.channels);
        let k = self.gate_logits.len() / (h * d);
        [
            vec![self.mu.nrows(), self.mu.ncols()],
            vec![h, d, k],
            vec![h, d, self.regimes, self.feature_dim],
            vec![self.v_res.nrows(), self.v_res.ncols()],
        ]
    }
}

/// Column view of a batch of windows, flattened row-major in time (`t * D + d`).
pub fn flatten_windows<'a>(windows: impl ExactSizeIterator<Item = &'a DMatrix<f64>>) -> DMatrix<f64> {
    let n = windows.len();
    let mut cols = Vec::new();
    let mut rows = 0;
    for w in windows {
        rows = w.len();
        for t in 0..w.nrows() {
            for d in 0..w.ncols() {
                cols.push(w[(t, d)]);
            }
        }
    }
    DMatrix::from_vec(rows, n, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_window(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Window {
        Window::new(DMatrix::from_fn(l, d, |_, _| rng.random_range(-3.0..5.0)), 4).unwrap()
    }

    #[test]
    fn constant_channel_is_floored() {
        let w = Window::new(DMatrix::from_element(10, 2, 3.5), 2).unwrap();
        let (n, s) = revin_normalize(&w);
        assert!(n.values.iter().all(|v| *v == 0.0));
        assert_eq!(s.scale, vec![REVIN_SCALE_FLOOR; 2]);
    }

    #[test]
    fn round_trip_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let w = random_window(&mut rng, 30, 3);
            let (n, s) = revin_normalize(&w);
            let back = revin_denormalize(&n.values, &s).unwrap();
            assert!((back - &w.values).amax() < 1e-10);
            for col in n.values.column_iter() {
                let m = col.mean();
                let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
                assert_abs_diff_eq!(m, 0.0, epsilon = 1e-10);
                assert_abs_diff_eq!(sd, 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn denormalize_cases() {
        let v = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(revin_denormalize(&v, &RevinStats::identity(1)).unwrap(), v);
        let s = RevinStats {
            loc: vec![3.0],
            scale: vec![2.0],
        };
        assert_eq!(revin_denormalize(&v, &s).unwrap()[(0, 0)], 5.0);
        assert!(revin_denormalize(&DMatrix::zeros(1, 2), &s).is_err());
    }

    #[test]
    fn jacobian_preserves_normalisation() {
        let s = RevinStats {
            loc: vec![0.0, 2.0],
            scale: vec![1.0, std::f64::consts::E],
        };
        assert_eq!(original_scale_logdensity(-0.3, &s, 0), -0.3);
        assert_abs_diff_eq!(original_scale_logdensity(-0.3, &s, 1), -1.3, epsilon = 1e-15);
        // density of y when (y - m) / s is standard normal
        let n = 40_000;
        let (lo, hi) = (2.0 - 12.0 * s.scale[1], 2.0 + 12.0 * s.scale[1]);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let y = lo + h * i as f64;
            let z = (y - s.loc[1]) / s.scale[1];
            let ld = -0.5 * (z * z + (2.0 * std::f64::consts::PI).ln());
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * original_scale_logdensity(ld, &s, 1).exp();
        }
        assert_abs_diff_eq!(total * h, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn softplus_inverse_pair() {
        for x in [-20.0, -1.0, 0.0, 0.3, 5.0, 40.0] {
            assert_abs_diff_eq!(softplus_inverse(softplus(x)), x, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(softplus(0.0), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let shape = MlpShape {
            input: 5,
            width: 4,
            output: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = vec![0.0; shape.len()];
        init_mlp(shape, &mut rng, &mut params);
        for p in params.iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let x = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let weights = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let loss = |p: &[f64]| mlp_forward(shape, p, x.clone()).output.component_mul(&weights).sum();
        let cache = mlp_forward(shape, &params, x.clone());
        let mut grad = vec![0.0; shape.len()];
        mlp_backward(shape, &params, &cache, &weights, &mut grad);
        let h = 1e-6;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&p);
            p[i] -= 2.0 * h;
            let fd = (up - loss(&p)) / (2.0 * h);
            assert_abs_diff_eq!(grad[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn init_is_seeded() {
        let shape = MlpShape {
            input: 6,
            width: 8,
            output: 2,
        };
        let mut a = vec![0.0; shape.len()];
        let mut b = vec![0.0; shape.len()];
        init_mlp(shape, &mut ChaCha8Rng::seed_from_u64(9), &mut a);
        init_mlp(shape, &mut ChaCha8Rng::seed_from_u64(9), &mut b);
        assert_eq!(a, b);
        let bound = 1.0 / 6f64.sqrt();
        assert!(a[..48].iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn flatten_is_time_major() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = a.map(|x| -x);
        let f = flatten_windows([&a, &b].into_iter());
        assert_eq!(f.column(0).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.column(1).as_slice(), &[-1.0, -2.0, -3.0, -4.0]);
    }
}
