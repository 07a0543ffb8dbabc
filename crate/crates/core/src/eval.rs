//! Scoring rules, regime recovery against oracle labels, diagnostics export and
//! seed aggregation.

use std::fs;
use std::path::Path;

use pathfinding::prelude::{kuhn_munkres, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::gate::{effective_regimes, mean_weights, GateWeights, DEFAULT_ACTIVE_THRESHOLD};
use crate::likelihood::{log_predictive, sample_into, PredictiveState, QuadratureRule};
use crate::model::{LocationForecast, Model};

pub const DEFAULT_CRPS_SAMPLES: usize = 200;
pub const COVERAGE_LEVELS: [f64; 2] = [0.5, 0.9];
/// Windows per forward pass during evaluation.
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub temperature: f64,
    pub quadrature_nodes: usize,
    pub crps_samples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            quadrature_nodes: crate::likelihood::DEFAULT_QUADRATURE_NODES,
            crps_samples: DEFAULT_CRPS_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nlpd: f64,
    pub crps: f64,
    pub mse: f64,
    pub coverage_50: f64,
    pub coverage_90: f64,
}

impl Metrics {
    fn as_array(&self) -> [f64; 5] {
        [self.nlpd, self.crps, self.mse, self.coverage_50, self.coverage_90]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            nlpd: a[0],
            crps: a[1],
            mse: a[2],
            coverage_50: a[3],
            coverage_90: a[4],
        }
    }
}

/// All-horizon metrics, a per-horizon breakdown and, after aggregation, the seed spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: Metrics,
    pub per_horizon: Vec<Metrics>,
    pub seeds: usize,
    /// Population standard deviation across seeds; zero for a single run.
    pub std: Metrics,
    pub per_horizon_std: Vec<Metrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeRecovery {
    pub accuracy: f64,
    pub mutual_information: f64,
}

/// Unbiased CRPS estimate `mean|X - y| - 0.5 mean_{i != j} |X_i - X_j|`.
pub fn crps_from_samples(samples: &[f64], y: f64) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid("CRPS needs at least two samples"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let abs_err = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / n as f64;
    // sum over i < j of (x_j - x_i) for sorted samples
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| x * (2.0 * i as f64 - n as f64 + 1.0))
        .sum();
    let spread = 2.0 * pair_sum / (n * (n - 1)) as f64;
    Ok((abs_err - 0.5 * spread).max(0.0))
}

/// Empirical central interval at `level` from samples.
pub fn central_interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    if samples.is_empty() || !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("interval needs samples and a level in (0, 1)"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    Ok((q(0.5 - level / 2.0), q(0.5 + level / 2.0)))
}

/// Mean negative log predictive density over states and targets in the states' coordinates.
pub fn nlpd_from_states(states: &[PredictiveState], targets: &[f64], rule: &QuadratureRule) -> Result<f64> {
    if states.len() != targets.len() || states.is_empty() {
        return Err(Error::shape("need one target per predictive state"));
    }
    let mut total = 0.0;
    for (s, y) in states.iter().zip(targets) {
        let tc = s.tconsts();
        total -= log_predictive(&s.inputs(*y, &tc), s.kind, rule);
    }
    Ok(total / states.len() as f64)
}

fn forecasts(model: &Model, samples: &[Sample], temperature: f64) -> Result<Vec<LocationForecast>> {
    let mut out = Vec::new();
    for (c, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
        let inputs: Vec<_> = chunk.iter().map(|s| &s.input).collect();
        for mut f in model.forecast(&inputs, temperature)? {
            f.window += c * EVAL_CHUNK;
            out.push(f);
        }
    }
    Ok(out)
}

/// Gate weights at every location, paired with the oracle label of its horizon step.
/// The label vector is empty when the samples carry no labels.
pub fn location_gates(model: &Model, samples: &[Sample], temperature: f64) -> Result<(Vec<GateWeights>, Vec<usize>)> {
    let fc = forecasts(model, samples, temperature)?;
    let labelled = samples.iter().all(|s| !s.labels.is_empty());
    let labels = if labelled {
        fc.iter().map(|f| samples[f.window].labels[f.step]).collect()
    } else {
        Vec::new()
    };
    Ok((fc.into_iter().map(|f| f.state.gate).collect(), labels))
}

fn target_of(samples: &[Sample], f: &LocationForecast) -> f64 {
    samples[f.window].target[(f.step, f.channel)]
}

/// Mean NLPD over every (window, step, channel) location, in the coordinates of the samples.
pub fn mean_nlpd(model: &Model, samples: &[Sample], temperature: f64, rule: &QuadratureRule) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let fc = forecasts(model, samples, temperature)?;
    let total: f64 = fc.iter().map(|f| -f.logdensity(target_of(samples, f), rule)).sum();
    let v = total / fc.len() as f64;
    if !v.is_finite() {
        return Err(Error::numerical("non-finite validation NLPD"));
    }
    Ok(v)
}

/// Per-location scores used by [`evaluate`] and the diagnostics export.
#[derive(Clone, Debug)]
pub struct LocationScore {
    pub window: usize,
    pub step: usize,
    pub channel: usize,
    pub nll: f64,
    pub crps: f64,
    pub sq_err: f64,
    pub covered: [bool; 2],
    pub dominant: usize,
}

/// Scores every location. Samples come from one ChaCha8 stream seeded by `opts.seed`, drawn in location order.
pub fn score_locations(model: &Model, samples: &[Sample], opts: &EvalOptions) -> Result<Vec<LocationScore>> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let rule = QuadratureRule::gauss_hermite(opts.quadrature_nodes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut draws = vec![0.0; opts.crps_samples];
    let fc = forecasts(model, samples, opts.temperature)?;
    let mut out = Vec::with_capacity(fc.len());
    for f in &fc {
        let y = target_of(samples, f);
        sample_into(&f.state, &mut rng, &mut draws)?;
        for d in draws.iter_mut() {
            *d = *d * f.revin_scale + f.revin_loc;
        }
        let mut covered = [false; 2];
        for (k, level) in COVERAGE_LEVELS.iter().enumerate() {
            let (lo, hi) = central_interval(&draws, *level)?;
            covered[k] = lo <= y && y <= hi;
        }
        out.push(LocationScore {
            window: f.window,
            step: f.step,
            channel: f.channel,
            nll: -f.logdensity(y, &rule),
            crps: crps_from_samples(&draws, y)?,
            sq_err: (f.mean() - y).powi(2),
            covered,
            dominant: f.state.gate.dominant(),
        });
    }
    Ok(out)
}

fn summarise<'a>(scores: impl Iterator<Item = &'a LocationScore>) -> Metrics {
    let mut acc = [0.0; 5];
    let mut n = 0usize;
    for s in scores {
        acc[0] += s.nll;
        acc[1] += s.crps;
        acc[2] += s.sq_err;
        acc[3] += f64::from(u8::from(s.covered[0]));
        acc[4] += f64::from(u8::from(s.covered[1]));
        n += 1;
    }
    Metrics::from_array(acc.map(|v| if n == 0 { f64::NAN } else { v / n as f64 }))
}

/// NLPD, CRPS, MSE and coverage over a split, overall and per horizon step.
pub fn evaluate(model: &Model, samples: &[Sample], opts: &EvalOptions) -> Result<MetricReport> {
    let scores = score_locations(model, samples, opts)?;
    let metrics = summarise(scores.iter());
    if !metrics.nlpd.is_finite() {
        return Err(Error::numerical("non-finite NLPD"));
    }
    let per_horizon: Vec<Metrics> = (0..model.arch.horizon)
        .map(|h| summarise(scores.iter().filter(|s| s.step == h)))
        .collect();
    Ok(MetricReport {
        metrics,
        per_horizon_std: vec![Metrics::default(); per_horizon.len()],
        per_horizon,
        seeds: 1,
        std: Metrics::default(),
    })
}

/// Coverage at `level_index` of [`COVERAGE_LEVELS`] restricted to locations whose dominant regime is `regime`.
pub fn regime_conditional_coverage(scores: &[LocationScore], regime: usize, level_index: usize) -> Option<f64> {
    let hits: Vec<bool> = scores
        .iter()
        .filter(|s| s.dominant == regime)
        .map(|s| s.covered[level_index])
        .collect();
    (!hits.is_empty()).then(|| hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Best-permutation accuracy of argmax gates against labels, plus soft-gate/label mutual information.
pub fn regime_recovery(gates: &[GateWeights], labels: &[usize]) -> Result<RegimeRecovery> {
    if gates.len() != labels.len() {
        return Err(Error::shape(format!("{} gates but {} labels", gates.len(), labels.len())));
    }
    if gates.is_empty() {
        return Err(Error::invalid("no locations to score"));
    }
    let r = gates[0].len();
    if gates.iter().any(|g| g.len() != r) {
        return Err(Error::shape("gates have inconsistent lengths"));
    }
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let size = r.max(n_labels);
    let mut confusion = vec![vec![0i64; size]; size];
    for (g, l) in gates.iter().zip(labels) {
        confusion[*l][g.dominant()] += 1;
    }
    let weights = Matrix::from_rows(confusion).map_err(|e| Error::invalid(format!("confusion matrix: {e:?}")))?;
    let (matched, _) = kuhn_munkres(&weights);
    let n = gates.len() as f64;
    let accuracy = matched as f64 / n;

    let mut joint = vec![vec![0.0; r]; n_labels];
    for (g, l) in gates.iter().zip(labels) {
        for (k, p) in g.as_slice().iter().enumerate() {
            joint[*l][k] += p / n;
        }
    }
    let p_label: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
    let p_comp: Vec<f64> = (0..r).map(|k| joint.iter().map(|row| row[k]).sum()).collect();
    let mut mi = 0.0;
    for (l, row) in joint.iter().enumerate() {
        for (k, p) in row.iter().enumerate() {
            if *p > 0.0 {
                mi += p * (p / (p_label[l] * p_comp[k])).ln();
            }
        }
    }
    Ok(RegimeRecovery {
        accuracy,
        mutual_information: mi.max(0.0),
    })
}

/// Mean and population standard deviation across seeds. Sums run over sorted values so the
/// result does not depend on report order.
pub fn aggregate_seeds(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports.first().ok_or_else(|| Error::invalid("need at least one report"))?;
    if reports.iter().any(|r| r.per_horizon.len() != first.per_horizon.len()) {
        return Err(Error::shape("reports have different horizons"));
    }
    let agg = |pick: &dyn Fn(&MetricReport) -> Metrics| -> (Metrics, Metrics) {
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for k in 0..5 {
            let mut vals: Vec<f64> = reports.iter().map(|r| pick(r).as_array()[k]).collect();
            vals.sort_by(f64::total_cmp);
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let mut dev: Vec<f64> = vals.iter().map(|v| (v - m).powi(2)).collect();
            dev.sort_by(f64::total_cmp);
            mean[k] = m;
            std[k] = (dev.iter().sum::<f64>() / n).sqrt();
        }
        (Metrics::from_array(mean), Metrics::from_array(std))
    };
    let (metrics, std) = agg(&|r| r.metrics);
    let mut per_horizon = Vec::new();
    let mut per_horizon_std = Vec::new();
    for h in 0..first.per_horizon.len() {
        let (m, s) = agg(&|r| r.per_horizon[h]);
        per_horizon.push(m);
        per_horizon_std.push(s);
    }
    Ok(MetricReport {
        metrics,
        per_horizon,
        seeds: reports.iter().map(|r| r.seeds).sum(),
        std,
        per_horizon_std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub mean_gate: Vec<f64>,
    pub r_eff: usize,
    pub active_threshold: f64,
    pub locations: usize,
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Writes `gates.csv`, `regimes.csv`, `vres.csv`, `calibration.csv` and `summary.json` into `dir`.
pub fn export_diagnostics(model: &Model, samples: &[Sample], opts: &EvalOptions, dir: &Path) -> Result<DiagnosticsSummary> {
    fs::create_dir_all(dir)?;
    let fc = forecasts(model, samples, opts.temperature)?;
    let scores = score_locations(model, samples, opts)?;
    let r = model.arch.regimes;
    let gates: Vec<GateWeights> = fc.iter().map(|f| f.state.gate.clone()).collect();
    let mean = mean_weights(&gates)?;
    let r_eff = effective_regimes(&mean, DEFAULT_ACTIVE_THRESHOLD);

    let mut header: Vec<String> = ["window", "step", "channel"].map(String::from).to_vec();
    header.extend((0..r).map(|k| format!("pi_{k}")));
    header.extend(["entropy", "dominant"].map(String::from));
    let rows: Vec<Vec<String>> = fc
        .iter()
        .map(|f| {
            let mut row = vec![f.window.to_string(), f.step.to_string(), f.channel.to_string()];
            row.extend(f.state.gate.as_slice().iter().map(|p| p.to_string()));
            row.push(entropy(f.state.gate.as_slice()).to_string());
            row.push(f.state.gate.dominant().to_string());
            row
        })
        .collect();
    write_rows(&dir.join("gates.csv"), &header, &rows)?;

    let gp = model.arch.head.uses_gp();
    let taus = model.taus();
    let nus = model.nus();
    let header: Vec<String> = ["regime", "mean_gate", "active", "offset", "tau", "nu", "amplitude", "lengthscale"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = (0..r)
        .map(|k| {
            let param = |range: &std::ops::Range<usize>| {
                if gp {
                    model.group(range)[k].exp().to_string()
                } else {
                    String::new()
                }
            };
            vec![
                k.to_string(),
                mean.as_slice()[k].to_string(),
                (mean.as_slice()[k] > DEFAULT_ACTIVE_THRESHOLD).to_string(),
                if gp { model.offsets()[k].to_string() } else { String::new() },
                taus[k].to_string(),
                nus[k].to_string(),
                param(&model.layout.log_amp),
                param(&model.layout.log_len),
            ]
        })
        .collect();
    write_rows(&dir.join("regimes.csv"), &header, &rows)?;

    let mut header: Vec<String> = ["window", "step", "channel", "v_res", "residual_var"].map(String::from).to_vec();
    header.extend((0..r).map(|k| format!("rho_{k}")));
    let rows: Vec<Vec<String>> = fc
        .iter()
        .map(|f| {
            let s2 = f.state.posterior.variance;
            let mut row = vec![
                f.window.to_string(),
                f.step.to_string(),
                f.channel.to_string(),
                f.v_res.to_string(),
                s2.to_string(),
            ];
            row.extend(f.state.scales.iter().map(|s| (s2 / (s * s)).to_string()));
            row
        })
        .collect();
    write_rows(&dir.join("vres.csv"), &header, &rows)?;

    let header: Vec<String> = ["regime", "level", "locations", "coverage"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for (li, level) in COVERAGE_LEVELS.iter().enumerate() {
        let all = scores.iter().filter(|s| s.covered[li]).count() as f64 / scores.len() as f64;
        rows.push(vec!["all".into(), level.to_string(), scores.len().to_string(), all.to_string()]);
        for k in 0..r {
            let count = scores.iter().filter(|s| s.dominant == k).count();
            if let Some(c) = regime_conditional_coverage(&scores, k, li) {
                rows.push(vec![k.to_string(), level.to_string(), count.to_string(), c.to_string()]);
            }
        }
    }
    write_rows(&dir.join("calibration.csv"), &header, &rows)?;

    let summary = DiagnosticsSummary {
        mean_gate: mean.as_slice().to_vec(),
        r_eff,
        active_threshold: DEFAULT_ACTIVE_THRESHOLD,
        locations: fc.len(),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::LikelihoodKind;
    use crate::svgp::ResidualPosterior;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_state(sigma: f64) -> PredictiveState {
        PredictiveState::new(
            0.0,
            GateWeights::uniform(1),
            ResidualPosterior::new(0.0, 0.0).unwrap(),
            vec![sigma],
            vec![f64::INFINITY],
            LikelihoodKind::GaussianMixture,
        )
        .unwrap()
    }

    #[test]
    fn oracle_gaussian_nlpd_is_normal_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ys: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let states = vec![gaussian_state(1.0); ys.len()];
        let rule = QuadratureRule::standard();
        let v = nlpd_from_states(&states, &ys, rule).unwrap();
        let oracle = 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5;
        // the sample mean of y^2 / 2 has SE about 0.007 at 1e4 points
        assert!((v - oracle).abs() < 0.02, "nlpd {v} vs {oracle}");
        let wide = vec![gaussian_state(2.0); ys.len()];
        assert!(nlpd_from_states(&wide, &ys, rule).unwrap() > v);
        let half = nlpd_from_states(&states[..5000], &ys[..5000], rule).unwrap();
        let rest = nlpd_from_states(&states[5000..], &ys[5000..], rule).unwrap();
        assert!(((half + rest) / 2.0 - v).abs() < 1e-12);
    }

    #[test]
    fn crps_cases() {
        assert_eq!(crps_from_samples(&[1.5; 10], 1.5).unwrap(), 0.0);
        assert!(crps_from_samples(&[1.0], 1.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let oracle = 2.0 * (-0.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt() - 1.0 / std::f64::consts::PI.sqrt();
        let c = crps_from_samples(&xs, 0.0).unwrap();
        assert!((c - oracle).abs() < 0.003, "{c} vs {oracle}");
        let shifted: Vec<f64> = xs[..500].iter().map(|x| x + 3.25).collect();
        let a = crps_from_samples(&xs[..500], 0.4).unwrap();
        let b = crps_from_samples(&shifted, 3.65).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn crps_matches_quadratic_estimator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..57).map(|_| rng.random_range(-2.0..3.0)).collect();
        let y = 0.3;
        let n = xs.len() as f64;
        let a: f64 = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
        let mut b = 0.0;
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                if i != j {
                    b += (xs[i] - xs[j]).abs();
                }
            }
        }
        let direct = a - 0.5 * b / (n * (n - 1.0));
        assert!((crps_from_samples(&xs, y).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn coverage_is_calibrated_on_own_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = gaussian_state(1.3);
        let mut draws = vec![0.0; 200];
        let trials = 4000;
        for (k, level) in COVERAGE_LEVELS.iter().enumerate() {
            let mut hits = 0;
            for _ in 0..trials {
                sample_into(&state, &mut rng, &mut draws).unwrap();
                let mut y = [0.0];
                sample_into(&state, &mut rng, &mut y).unwrap();
                let (lo, hi) = central_interval(&draws, *level).unwrap();
                hits += usize::from(lo <= y[0] && y[0] <= hi);
            }
            let cov = hits as f64 / trials as f64;
            // with 200 draws the empirical interval is itself noisy; its expected coverage is close to the level
            let se = (level * (1.0 - level) / trials as f64).sqrt();
            assert!((cov - level).abs() < 3.0 * se + 0.01, "level {level} k {k} coverage {cov}");
        }
        let xs: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = central_interval(&xs, 0.5).unwrap();
        let (c, d) = central_interval(&xs, 0.9).unwrap();
        assert!(c <= a && b <= d);
    }

    fn brute_force_accuracy(gates: &[GateWeights], labels: &[usize], r: usize) -> f64 {
        fn perms(items: Vec<usize>) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.clone();
                let head = rest.remove(i);
                for mut p in perms(rest) {
                    p.insert(0, head);
                    out.push(p);
                }
            }
            out
        }
        let mut best = 0usize;
        for p in perms((0..r).collect()) {
            let hits = gates.iter().zip(labels).filter(|(g, l)| p[g.dominant()] == **l).count();
            best = best.max(hits);
        }
        best as f64 / gates.len() as f64
    }

    #[test]
    fn recovery_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let r = 2 + trial % 5;
            let n = 50 + trial * 7;
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
            let gates: Vec<GateWeights> = labels
                .iter()
                .map(|l| {
                    let mut p: Vec<f64> = (0..r).map(|_| rng.random_range(0.01..1.0)).collect();
                    if rng.random_bool(0.6) {
                        p[(l + 1) % r] += 1.5;
                    }
                    let s: f64 = p.iter().sum();
                    GateWeights::new(p.iter().map(|v| v / s).collect()).unwrap()
                })
                .collect();
            let rec = regime_recovery(&gates, &labels).unwrap();
            let brute = brute_force_accuracy(&gates, &labels, r);
            assert!((rec.accuracy - brute).abs() < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn recovery_edge_cases() {
        let labels = vec![0, 1, 1, 2, 0, 1];
        let perm = [2, 0, 1];
        let one_hot: Vec<GateWeights> = labels.iter().map(|l| GateWeights::one_hot(3, perm[*l])).collect();
        let rec = regime_recovery(&one_hot, &labels).unwrap();
        assert_eq!(rec.accuracy, 1.0);
        let label_entropy = -[2.0f64, 3.0, 1.0].iter().map(|c| c / 6.0 * (c / 6.0).ln()).sum::<f64>();
        assert!((rec.mutual_information - label_entropy).abs() < 1e-12);
        let uniform = vec![GateWeights::uniform(3); labels.len()];
        let rec = regime_recovery(&uniform, &labels).unwrap();
        assert!((rec.accuracy - 0.5).abs() < 1e-12);
        assert!(rec.mutual_information.abs() < 1e-12);
        assert!(regime_recovery(&uniform[..2], &labels).is_err());
    }

    #[test]
    fn recovery_is_label_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels: Vec<usize> = (0..80).map(|_| rng.random_range(0..3)).collect();
        let gates: Vec<GateWeights> = (0..80)
            .map(|_| {
                let p: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = p.iter().sum();
                GateWeights::new(p.iter().map(|v| v / s).collect()).unwrap()
            })
            .collect();
        let base = regime_recovery(&gates, &labels).unwrap();
        let relabeled: Vec<usize> = labels.iter().map(|l| [1, 2, 0][*l]).collect();
        let permuted: Vec<GateWeights> = gates
            .iter()
            .map(|g| {
                let p = g.as_slice();
                GateWeights::new(vec![p[2], p[0], p[1]]).unwrap()
            })
            .collect();
        for (g, l) in [(&gates, &relabeled), (&permuted, &labels)] {
            let rec = regime_recovery(g, l).unwrap();
            assert_eq!(rec.accuracy, base.accuracy);
            assert!((rec.mutual_information - base.mutual_information).abs() < 1e-12);
        }
    }

    fn report(v: f64) -> MetricReport {
        let m = Metrics {
            nlpd: v,
            crps: v / 2.0,
            mse: v * v,
            coverage_50: 0.5,
            coverage_90: 0.9,
        };
        MetricReport {
            metrics: m,
            per_horizon: vec![m, m],
            seeds: 1,
            std: Metrics::default(),
            per_horizon_std: vec![Metrics::default(); 2],
        }
    }

    #[test]
    fn aggregation_contracts() {
        let one = aggregate_seeds(&[report(1.3)]).unwrap();
        assert_eq!(one.std, Metrics::default());
        assert_eq!(one.metrics, report(1.3).metrics);
        let ab = aggregate_seeds(&[report(1.0), report(2.0)]).unwrap();
        assert!((ab.metrics.nlpd - 1.5).abs() < 1e-15);
        assert!((ab.std.nlpd - 0.5).abs() < 1e-15);
        assert_eq!(ab.seeds, 2);
        let xs = [report(0.1), report(0.7), report(0.2), report(1e-9)];
        let ys = [report(1e-9), report(0.2), report(0.1), report(0.7)];
        assert_eq!(aggregate_seeds(&xs).unwrap(), aggregate_seeds(&ys).unwrap());
        let mut bad = report(1.0);
        bad.per_horizon.pop();
        assert!(aggregate_seeds(&[report(1.0), bad]).is_err());
        assert!(aggregate_seeds(&[]).is_err());
    }
}
