//! Synthetic regime-switching series, windowing, CSV ingestion and scaling.

use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::sigmoid;

/// Floor applied to zero-variance channels by the standard scaler.
pub const SCALER_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub amplitude: f64,
    pub period: f64,
    #[serde(default)]
    pub drift: f64,
    pub sigma: f64,
    pub nu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Switching {
    /// Segment `k` (between consecutive times) uses regime `k mod R`.
    Abrupt { times: Vec<usize> },
    /// Row-stochastic transition matrix, chain started in regime 0.
    Markov { transition: Vec<Vec<f64>> },
    /// Like `Abrupt`, blending neighbouring regimes' noise with a logistic ramp.
    Gradual { times: Vec<usize>, width: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub length: usize,
    pub channels: usize,
    pub regimes: Vec<RegimeSpec>,
    pub switching: Switching,
    pub seed: u64,
}

impl SynthSpec {
    /// Calm regime `(sigma 0.1, nu 50)` alternating with a turbulent one `(sigma 1, nu 4)`;
    /// segment lengths uniform in `[150, 450]` and a shared daily sinusoid.
    pub fn two_regime_abrupt(length: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f5e_9a7e);
        let mut times = Vec::new();
        let mut t = 0;
        loop {
            t += rng.random_range(150..=450);
            if t >= length {
                break;
            }
            times.push(t);
        }
        let mean = |sigma: f64, nu: f64| RegimeSpec {
            amplitude: 1.0,
            period: 24.0,
            drift: 0.0,
            sigma,
            nu,
        };
        Self {
            length,
            channels: 1,
            regimes: vec![mean(0.1, 50.0), mean(1.0, 4.0)],
            switching: Switching::Abrupt { times },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.channels == 0 || self.regimes.is_empty() {
            return Err(Error::invalid("synthetic spec needs length, channels and at least one regime"));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if !(r.sigma > 0.0) || !(r.nu > 2.0) || !(r.period > 0.0) {
                return Err(Error::invalid(format!("regime {i}: need sigma > 0, nu > 2 and period > 0")));
            }
            if !(r.amplitude.is_finite() && r.drift.is_finite()) {
                return Err(Error::invalid(format!("regime {i}: non-finite mean parameters")));
            }
        }
        let check_times = |times: &[usize]| -> Result<()> {
            if times.windows(2).any(|w| w[0] >= w[1]) || times.iter().any(|t| *t == 0 || *t >= self.length) {
                return Err(Error::invalid("switch times must be strictly increasing inside (0, length)"));
            }
            Ok(())
        };
        match &self.switching {
            Switching::Abrupt { times } => check_times(times),
            Switching::Gradual { times, width } => {
                if !(*width > 0.0) {
                    return Err(Error::invalid("gradual width must be positive"));
                }
                check_times(times)
            }
            Switching::Markov { transition } => {
                let r = self.regimes.len();
                if transition.len() != r || transition.iter().any(|row| row.len() != r) {
                    return Err(Error::shape("transition matrix must be R x R"));
                }
                for row in transition {
                    if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return Err(Error::invalid("transition rows must be probability vectors"));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Generated values with the oracle regime of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    pub values: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// Weight on the incoming regime for gradual specs.
    pub blend: Option<Vec<f64>>,
}

impl LabeledSeries {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// Fraction of rows carrying each label.
    pub fn occupancy(&self, regimes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; regimes];
        for l in &self.labels {
            counts[*l] += 1;
        }
        counts.iter().map(|c| *c as f64 / self.labels.len() as f64).collect()
    }
}

fn segment_of(times: &[usize], t: usize) -> usize {
    times.partition_point(|s| *s <= t)
}

fn mean_value(regime: &RegimeSpec, t: usize, channel: usize, channels: usize) -> f64 {
    let phase = 2.0 * std::f64::consts::PI * channel as f64 / channels as f64;
    regime.amplitude * (2.0 * std::f64::consts::PI * t as f64 / regime.period + phase).sin() + regime.drift * t as f64
}

/// `y_t = mean(t) + sigma_r * t_nu_r` with the oracle label recorded per row.
pub fn synth_generate(spec: &SynthSpec) -> Result<LabeledSeries> {
    spec.validate()?;
    let r = spec.regimes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dists = spec
        .regimes
        .iter()
        .map(|g| StudentT::new(g.nu).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<Vec<_>>>()?;

    // (from, to, weight on `to`) per row
    let mut mix: Vec<(usize, usize, f64)> = Vec::with_capacity(spec.length);
    match &spec.switching {
        Switching::Abrupt { times } => {
            mix.extend((0..spec.length).map(|t| {
                let k = segment_of(times, t) % r;
                (k, k, 0.0)
            }));
        }
        Switching::Markov { transition } => {
            let mut state = 0usize;
            for _ in 0..spec.length {
                mix.push((state, state, 0.0));
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut next = r - 1;
                for (j, p) in transition[state].iter().enumerate() {
                    acc += p;
                    if u < acc {
                        next = j;
                        break;
                    }
                }
                state = next;
            }
        }
        Switching::Gradual { times, width } => {
            for t in 0..spec.length {
                if times.is_empty() {
                    mix.push((0, 0, 0.0));
                    continue;
                }
                // blend across the nearest switch
                let k = segment_of(times, t);
                let nearest = match (k.checked_sub(1), times.get(k)) {
                    (Some(a), Some(_)) if t - times[a] <= times[k] - t => a,
                    (_, Some(_)) => k,
                    (Some(a), None) => a,
                    (None, None) => unreachable!(),
                };
                let weight = sigmoid((t as f64 - times[nearest] as f64) / width);
                mix.push((nearest % r, (nearest + 1) % r, weight));
            }
        }
    }
    let labels: Vec<usize> = mix.iter().map(|(a, b, w)| if *w > 0.5 { *b } else { *a }).collect();
    let blend = matches!(spec.switching, Switching::Gradual { .. }).then(|| mix.iter().map(|m| m.2).collect());

    let mut values = DMatrix::zeros(spec.length, spec.channels);
    for (t, &(from, to, weight)) in mix.iter().enumerate() {
        let a = &spec.regimes[from];
        let b = &spec.regimes[to];
        for d in 0..spec.channels {
            let mean = (1.0 - weight) * mean_value(a, t, d, spec.channels) + weight * mean_value(b, t, d, spec.channels);
            let e_from = a.sigma * dists[from].sample(&mut rng);
            let noise = if weight > 0.0 {
                (1.0 - weight) * e_from + weight * b.sigma * dists[to].sample(&mut rng)
            } else {
                e_from
            };
            values[(t, d)] = mean + noise;
        }
    }
    Ok(LabeledSeries { values, labels, blend })
}

/// Mean process alone, handy for noiseless checks.
pub fn synth_mean(spec: &SynthSpec, t: usize, label: usize, channel: usize) -> f64 {
    mean_value(&spec.regimes[label], t, channel, spec.channels)
}

/// Writes `t, ch0..chD-1, regime_label`.
pub fn write_series_csv(series: &LabeledSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = series.values.ncols();
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|i| format!("ch{i}")));
    header.push("regime_label".into());
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut row = vec![t.to_string()];
        row.extend((0..d).map(|i| format!("{:?}", series.values[(t, i)])));
        row.push(series.labels[t].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_series_csv`].
pub fn read_series_csv(path: &Path) -> Result<LabeledSeries> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "regime_label")
        .ok_or_else(|| Error::Data("missing regime_label column".into()))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut vals = Vec::new();
        for (i, field) in rec.iter().enumerate().skip(1) {
            if i == label_col {
                labels.push(field.parse::<usize>().map_err(|e| Error::Data(e.to_string()))?);
            } else {
                vals.push(field.parse::<f64>().map_err(|e| Error::Data(e.to_string()))?);
            }
        }
        rows.push(vals);
    }
    let d = rows.first().map_or(0, Vec::len);
    let values = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    Ok(LabeledSeries {
        values,
        labels,
        blend: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Step between consecutive training windows; validation and test always use 1.
    pub train_stride: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            lookback: 336,
            horizon: 24,
            val_fraction: 0.1,
            test_fraction: 0.2,
            train_stride: 1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| f > 0.0 && f < 1.0;
        if self.lookback == 0 || self.horizon == 0 || self.train_stride == 0 {
            return Err(Error::invalid("lookback, horizon and stride must be positive"));
        }
        if !frac_ok(self.val_fraction) || !frac_ok(self.test_fraction) || self.val_fraction + self.test_fraction >= 1.0 {
            return Err(Error::invalid("split fractions must lie in (0, 1) and sum below 1"));
        }
        Ok(())
    }

    /// Row indices where validation and test targets begin.
    pub fn boundaries(&self, length: usize) -> (usize, usize) {
        let test_start = length - (self.test_fraction * length as f64).round() as usize;
        let val_start = test_start - (self.val_fraction * length as f64).round() as usize;
        (val_start, test_start)
    }
}

/// One forecasting example: lookback rows, the next `H` rows, and their oracle labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: DMatrix<f64>,
    pub target: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// First row of the lookback in the source series.
    pub start: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Total number of stride-1 windows in a series of length `t`.
pub fn window_count(t: usize, lookback: usize, horizon: usize) -> usize {
    (t + 1).saturating_sub(lookback + horizon)
}

fn sample_at(values: &DMatrix<f64>, labels: Option<&[usize]>, s: usize, l: usize, h: usize) -> Sample {
    Sample {
        input: values.rows(s, l).clone_owned(),
        target: values.rows(s + l, h).clone_owned(),
        labels: labels.map_or_else(Vec::new, |lab| lab[s + l..s + l + h].to_vec()),
        start: s,
    }
}

/// Sliding windows, assigned to the split that owns all of their target rows.
pub fn make_windows(values: &DMatrix<f64>, labels: Option<&[usize]>, split: &SplitSpec) -> Result<Splits> {
    split.validate()?;
    let t = values.nrows();
    let (l, h) = (split.lookback, split.horizon);
    if t < l + h {
        return Err(Error::Data(format!("series of length {t} is shorter than lookback + horizon = {}", l + h)));
    }
    if labels.is_some_and(|lab| lab.len() != t) {
        return Err(Error::shape("label count differs from series length"));
    }
    let (val_start, test_start) = split.boundaries(t);
    let mut out = Splits::default();
    for s in 0..window_count(t, l, h) {
        let first = s + l;
        let last = first + h - 1;
        if last < val_start {
            if s % split.train_stride == 0 {
                out.train.push(sample_at(values, labels, s, l, h));
            }
        } else if first >= val_start && last < test_start {
            out.val.push(sample_at(values, labels, s, l, h));
        } else if first >= test_start {
            out.test.push(sample_at(values, labels, s, l, h));
        }
    }
    Ok(out)
}

/// Per-channel standardisation fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardScaler {
    pub fn fit(train: &DMatrix<f64>) -> Result<Self> {
        if train.nrows() == 0 {
            return Err(Error::invalid("cannot fit a scaler on an empty training set"));
        }
        let n = train.nrows() as f64;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (d, col) in train.column_iter().enumerate() {
            let m = col.sum() / n;
            let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
            if sd < SCALER_FLOOR {
                log::warn!("channel {d} has zero variance on the training split; scale floored");
            }
            mean.push(m);
            std.push(sd.max(SCALER_FLOOR));
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, d| (x[(i, d)] - self.mean[d]) / self.std[d])
    }

    pub fn inverse(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, d| x[(i, d)] * self.std[d] + self.mean[d])
    }
}

/// Scales the three blocks with statistics from `train` alone.
pub fn standard_scale(
    train: &DMatrix<f64>,
    val: &DMatrix<f64>,
    test: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, StandardScaler)> {
    let scaler = StandardScaler::fit(train)?;
    Ok((scaler.transform(train), scaler.transform(val), scaler.transform(test), scaler))
}

/// A scaled series split into windows, ready for training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub splits: Splits,
    pub scaler: StandardScaler,
    pub channels: usize,
}

impl Dataset {
    /// Fits the scaler on rows before the validation boundary, then windows the scaled series.
    pub fn prepare(values: &DMatrix<f64>, labels: Option<&[usize]>, split: &SplitSpec) -> Result<Self> {
        split.validate()?;
        if values.nrows() < split.lookback + split.horizon {
            return Err(Error::Data("series is shorter than lookback + horizon".into()));
        }
        let (val_start, _) = split.boundaries(values.nrows());
        if val_start == 0 {
            return Err(Error::Data("empty training split".into()));
        }
        let scaler = StandardScaler::fit(&values.rows(0, val_start).clone_owned())?;
        let scaled = scaler.transform(values);
        let splits = make_windows(&scaled, labels, split)?;
        if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
            return Err(Error::Data(format!(
                "split produced {} train, {} val, {} test windows; every split needs at least one",
                splits.train.len(),
                splits.val.len(),
                splits.test.len()
            )));
        }
        Ok(Self {
            splits,
            scaler,
            channels: values.ncols(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct CsvSchema {
    /// Largest allowed gap as a multiple of the median timestamp step.
    pub max_gap_factor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestedSeries {
    pub timestamps: Vec<f64>,
    pub columns: Vec<String>,
    pub values: DMatrix<f64>,
}

fn parse_timestamp(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp() as f64);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp() as f64);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp() as f64)
}

/// Timestamp in the first column, numeric channels after; rows are sorted by time.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<IngestedSeries> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Data("expected a timestamp column and at least one channel".into()));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let ts = rec
            .get(0)
            .and_then(parse_timestamp)
            .ok_or_else(|| Error::Data(format!("row {line}: unparseable timestamp")))?;
        if rec.len() != headers.len() {
            return Err(Error::Data(format!("row {line}: expected {} fields, found {}", headers.len(), rec.len())));
        }
        let mut vals = Vec::with_capacity(columns.len());
        for (j, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("row {line}, column {}: cannot parse {field:?}", headers[j].to_string())))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {line}, column {}: non-finite value", &headers[j])));
            }
            vals.push(v);
        }
        rows.push((ts, vals));
    }
    if rows.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!("duplicate timestamp {}", w[0].0)));
    }
    if let (Some(factor), true) = (schema.max_gap_factor, rows.len() > 2) {
        let mut steps: Vec<f64> = rows.windows(2).map(|w| w[1].0 - w[0].0).collect();
        let max_step = steps.iter().copied().fold(0.0, f64::max);
        steps.sort_by(f64::total_cmp);
        let median = steps[steps.len() / 2];
        if max_step > factor * median {
            return Err(Error::Data(format!("gap of {max_step} exceeds {factor} x median step {median}")));
        }
    }
    let values = DMatrix::from_fn(rows.len(), columns.len(), |i, j| rows[i].1[j]);
    Ok(IngestedSeries {
        timestamps: rows.iter().map(|r| r.0).collect(),
        columns,
        values,
    })
}
