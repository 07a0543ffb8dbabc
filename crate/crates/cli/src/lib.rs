//! Command implementations behind the `deregime` binary.
//!
//! Every command reads one JSON [`RunConfig`]. Command-line flags override its keys, and the
//! fully resolved result is written next to each output so a run can be repeated exactly.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use deregime_core::checkpoint::{config_hash, Checkpoint};
use deregime_core::data::{
    ingest_csv, read_series_csv, synth_generate, write_series_csv, CsvSchema, Dataset, Sample, SplitSpec, SynthSpec,
};
use deregime_core::eval::{
    aggregate_seeds, evaluate, export_diagnostics, location_gates, regime_recovery, EvalOptions, MetricReport,
    RegimeRecovery, DEFAULT_CRPS_SAMPLES,
};
use deregime_core::likelihood::QuadratureRule;
use deregime_core::model::HeadKind;
use deregime_core::training::{
    grad_check, init_state, train_from, write_history, GradCheckReport, TrainConfig, TrainOutcome, GRAD_CHECK_TOLERANCE,
};

pub const DEFAULT_SEEDS: [u64; 3] = [42, 123, 456];
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const SERIES_FILE: &str = "series.csv";
pub const EVAL_FILE: &str = "eval.json";

/// Usage or configuration problems; the binary maps these to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub crps_samples: usize,
    /// Seed of the predictive sampler.
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            crps_samples: DEFAULT_CRPS_SAMPLES,
            seed: 0,
        }
    }
}

/// One JSON document describing the data, the split, training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    /// A series CSV written by `synth`, or a timestamped CSV of numeric channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    #[serde(default)]
    pub csv: CsvSchema,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialise")
    }
}

/// The parts of a run that determine a trained model. Output paths, the seed list and the
/// epoch budget are excluded, so a run can be extended by resuming its checkpoint.
#[derive(Serialize)]
struct Identity<'a> {
    synth: &'a Option<SynthSpec>,
    data_path: &'a Option<PathBuf>,
    csv: &'a CsvSchema,
    split: &'a SplitSpec,
    train: TrainConfig,
}

/// Loaded series with optional oracle labels.
pub struct Series {
    pub values: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_with(&text, &[])
    }

    /// Parses `text` and applies `key.path=json` overrides before typing the result.
    pub fn from_json_with(text: &str, overrides: &[String]) -> anyhow::Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| usage(format!("config is not valid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        expand_synth_preset(&mut value)?;
        let run: RunConfig = serde_json::from_value(value).map_err(|e| usage(format!("invalid config: {e}")))?;
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.synth.is_some() && self.data_path.is_some() {
            return Err(usage("set either `synth` or `data_path`, not both"));
        }
        if let Some(s) = &self.synth {
            s.validate().map_err(|e| usage(e.to_string()))?;
        }
        self.split.validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(usage("`seeds` must not be empty"));
        }
        if self.eval.crps_samples < 2 {
            return Err(usage("eval.crps_samples must be at least 2"));
        }
        Ok(())
    }

    /// Copy restricted to one training seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut run = self.clone();
        run.train.seed = seed;
        run.seeds = vec![seed];
        run
    }

    /// Hash that a checkpoint must carry to be evaluated under this config.
    pub fn model_hash(&self) -> anyhow::Result<String> {
        Ok(config_hash(&Identity {
            synth: &self.synth,
            data_path: &self.data_path,
            csv: &self.csv,
            split: &self.split,
            train: TrainConfig {
                max_epochs: 0,
                ..self.train.clone()
            },
        })?)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed-{seed}"))
    }

    pub fn load_series(&self) -> anyhow::Result<Series> {
        if let Some(spec) = &self.synth {
            let s = synth_generate(spec)?;
            return Ok(Series {
                values: s.values,
                labels: Some(s.labels),
            });
        }
        let path = self
            .data_path
            .as_ref()
            .ok_or_else(|| usage("no dataset configured: set `synth` or `data_path`"))?;
        if !path.is_file() {
            return Err(usage(format!("dataset {} does not exist", path.display())));
        }
        let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let labelled = reader.headers()?.iter().any(|h| h == "regime_label");
        if labelled {
            let s = read_series_csv(path)?;
            Ok(Series {
                values: s.values,
                labels: Some(s.labels),
            })
        } else {
            let s = ingest_csv(path, &self.csv)?;
            Ok(Series {
                values: s.values,
                labels: None,
            })
        }
    }

    pub fn dataset(&self) -> anyhow::Result<Dataset> {
        let s = self.load_series()?;
        Ok(Dataset::prepare(&s.values, s.labels.as_deref(), &self.split)?)
    }

    pub fn write_resolved(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

/// `{"preset": "two_regime_abrupt", "length": T, "seed": s}` expands to the full series spec,
/// so the resolved config records every switch time.
fn expand_synth_preset(root: &mut Value) -> anyhow::Result<()> {
    let Some(synth) = root.get_mut("synth") else {
        return Ok(());
    };
    let Some(preset) = synth.get("preset").cloned() else {
        return Ok(());
    };
    if preset != "two_regime_abrupt" {
        return Err(usage(format!("unknown synth preset {preset}")));
    }
    let field = |k: &str, default: u64| -> anyhow::Result<u64> {
        match synth.get(k) {
            None => Ok(default),
            Some(v) => v.as_u64().ok_or_else(|| usage(format!("synth.{k} must be a non-negative integer"))),
        }
    };
    let allowed = ["preset", "length", "seed"];
    if let Some(extra) = synth.as_object().and_then(|o| o.keys().find(|k| !allowed.contains(&k.as_str()))) {
        return Err(usage(format!("unknown synth preset key `{extra}`")));
    }
    let spec = SynthSpec::two_regime_abrupt(field("length", 8000)? as usize, field("seed", 42)?);
    *synth = serde_json::to_value(spec)?;
    Ok(())
}

/// Sets a dotted key, e.g. `train.learning_rate=1e-3`. Values are parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{assignment}` is not of the form key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| usage(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(usage("empty override key"))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// How a command finished, when it did not fail outright.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Training hit a numerical failure, or a gradient check failed.
    Failed,
}

/// Exit code for an error: 1 for numerical failures, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<deregime_core::Error>().is_some_and(|c| c.is_numerical()));
    if numerical {
        1
    } else {
        2
    }
}

pub fn synth(run: &RunConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let spec = run.synth.as_ref().ok_or_else(|| usage("`synth` section missing from config"))?;
    let series = synth_generate(spec)?;
    fs::create_dir_all(out)?;
    let path = out.join(SERIES_FILE);
    write_series_csv(&series, &path)?;
    run.write_resolved(out)?;
    let occ = series.occupancy(spec.regimes.len());
    println!("wrote {} rows x {} channels to {}", series.len(), series.values.ncols(), path.display());
    println!("regime occupancy {occ:?}");
    Ok(path)
}

/// Result of training one seed.
pub struct SeedRun {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
}

/// Trains `run.train.seed` into `dir`, checkpointing after every epoch.
/// With `resume`, continues from that checkpoint after checking its config hash.
pub fn train_seed(run: &RunConfig, dataset: &Dataset, dir: &Path, resume: Option<&Path>) -> anyhow::Result<SeedRun> {
    fs::create_dir_all(dir)?;
    run.write_resolved(dir)?;
    let hash = run.model_hash()?;
    let (state, mut history) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ck.config_hash != hash {
                return Err(usage(format!("{} was trained under a different config", p.display())));
            }
            (ck.state, ck.history)
        }
        None => (init_state(&run.train, &dataset.splits.train)?, Vec::new()),
    };
    let ck_path = dir.join(CHECKPOINT_FILE);
    let prior = history.clone();
    let mut seen = Vec::new();
    let outcome = train_from(&run.train, state, &dataset.splits.train, &dataset.splits.val, |rec, st| {
        seen.push(rec.clone());
        let all: Vec<_> = prior.iter().chain(&seen).cloned().collect();
        Checkpoint::new(hash.clone(), run.train.clone(), st.clone(), all).save(&ck_path)
    })?;
    history.extend(outcome.history.iter().cloned());
    Checkpoint::new(hash, run.train.clone(), outcome.state.clone(), history.clone()).save(&ck_path)?;
    write_history(&history, &dir.join(HISTORY_FILE))?;
    Ok(SeedRun {
        outcome,
        checkpoint: ck_path,
    })
}

/// Loads a checkpoint and refuses it unless it was trained under `run` (with the checkpoint's seed).
pub fn load_matching(run: &RunConfig, path: &Path) -> anyhow::Result<Checkpoint> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let expected = run.for_seed(ck.config.seed).model_hash()?;
    if ck.config_hash != expected {
        return Err(usage(format!(
            "config hash mismatch for {}: checkpoint {}, config {}",
            path.display(),
            ck.config_hash,
            expected
        )));
    }
    Ok(ck)
}

pub fn eval_options(run: &RunConfig, ck: &Checkpoint) -> EvalOptions {
    EvalOptions {
        temperature: ck.state.eval_temperature(&ck.config),
        quadrature_nodes: ck.config.quadrature_nodes,
        crps_samples: run.eval.crps_samples,
        seed: run.eval.seed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub report: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery: Option<RegimeRecovery>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_seed: Vec<SeedEval>,
    pub aggregate: MetricReport,
}

/// Regime recovery on `samples`, when they carry labels and the head has a gate.
pub fn recovery_of(ck: &Checkpoint, samples: &[Sample], temperature: f64) -> anyhow::Result<Option<RegimeRecovery>> {
    if !ck.config.head.uses_gp() {
        return Ok(None);
    }
    let model = ck.state.best_model();
    let (gates, labels) = location_gates(&model, samples, temperature)?;
    if labels.is_empty() {
        return Ok(None);
    }
    Ok(Some(regime_recovery(&gates, &labels)?))
}

pub fn eval_checkpoints(run: &RunConfig, dataset: &Dataset, paths: &[PathBuf]) -> anyhow::Result<EvalSummary> {
    let mut per_seed = Vec::new();
    for p in paths {
        let ck = load_matching(run, p)?;
        let opts = eval_options(run, &ck);
        let model = ck.state.best_model();
        let report = evaluate(&model, &dataset.splits.test, &opts)?;
        let recovery = recovery_of(&ck, &dataset.splits.test, opts.temperature)?;
        per_seed.push(SeedEval {
            seed: ck.config.seed,
            checkpoint: p.clone(),
            report,
            recovery,
        });
    }
    let reports: Vec<MetricReport> = per_seed.iter().map(|s| s.report.clone()).collect();
    let aggregate = aggregate_seeds(&reports)?;
    Ok(EvalSummary { per_seed, aggregate })
}

/// Checks analytic gradients on a small instance of the configured head.
pub fn gradcheck(train: &TrainConfig, seed: u64, zero_group: Option<&str>) -> anyhow::Result<GradCheckReport> {
    let (lookback, horizon, channels, windows) = (8, 3, 2, 6);
    let multi = matches!(train.head, HeadKind::Deregime | HeadKind::MdnGaussian | HeadKind::MdnT) && !train.single_kernel;
    let config = TrainConfig {
        r_max: train.r_max.map(|r| r.min(3)).or(multi.then_some(3)),
        d_g: train.d_g.min(2),
        inducing: train.inducing.min(4),
        width: train.width.min(8),
        seed,
        ..train.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Sample> = (0..windows)
        .map(|i| Sample {
            input: DMatrix::from_fn(lookback, channels, |_, _| rng.random_range(-1.5..1.5)),
            target: DMatrix::from_fn(horizon, channels, |_, _| rng.random_range(-1.5..1.5)),
            labels: Vec::new(),
            start: i,
        })
        .collect();
    let state = init_state(&config, &samples)?;
    let rule = QuadratureRule::gauss_hermite(config.quadrature_nodes)?;
    let mut settings = config.settings_at(0, &rule);
    settings.data_scale = 2.0;
    settings.penalty_scale = 3.0;
    let batch: Vec<&Sample> = samples.iter().collect();
    Ok(grad_check(&state.model, &batch, &settings, 1e-5, zero_group)?)
}

#[derive(Parser, Debug)]
#[command(name = "deregime", version, about = "Regime-mixing sparse GP forecasting head")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run config; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Restrict to one seed (for `synth`, the series seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.learning_rate=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=JSON")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a synthetic regime-switching series.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one checkpoint per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run up to this many seeds as concurrent processes.
        #[arg(long, default_value_t = 1)]
        parallel_seeds: usize,
        /// Resume from this checkpoint (requires a single seed).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score checkpoints on the test split and aggregate across seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to score; defaults to each seed's run directory.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Export gate, regime, residual-variance and calibration tables.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Compare analytic gradients with central differences on a small instance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        zero_group: Option<String>,
    },
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    let mut run = RunConfig::from_json_with(&text, &common.overrides)?;
    if let Some(out) = &common.out {
        run.out_dir = out.clone();
    }
    if let Some(s) = common.seed {
        run.seeds = vec![s];
    }
    Ok(run)
}

fn default_checkpoints(run: &RunConfig, given: &[PathBuf]) -> Vec<PathBuf> {
    if given.is_empty() {
        run.seeds.iter().map(|s| run.seed_dir(*s).join(CHECKPOINT_FILE)).collect()
    } else {
        given.to_vec()
    }
}

fn train_cmd(common: &Common, run: &RunConfig, parallel: usize, resume: Option<&Path>) -> anyhow::Result<Status> {
    if resume.is_some() && run.seeds.len() != 1 {
        return Err(usage("--checkpoint needs exactly one seed (pass --seed)"));
    }
    if parallel > 1 && run.seeds.len() > 1 {
        return train_in_processes(common, run, parallel);
    }
    let dataset = run.dataset()?;
    run.write_resolved(&run.out_dir)?;
    let mut status = Status::Success;
    for &seed in &run.seeds {
        let one = run.for_seed(seed);
        let dir = run.seed_dir(seed);
        let res = train_seed(&one, &dataset, &dir, resume)?;
        let o = &res.outcome;
        match &o.failure {
            Some(msg) => {
                eprintln!("seed {seed}: numerical failure ({msg}); last good state saved to {}", res.checkpoint.display());
                status = Status::Failed;
            }
            None => println!(
                "seed {seed}: {} epochs, best val NLPD {:.5} at epoch {}{}, checkpoint {}",
                o.state.epoch,
                o.state.stopping.best.unwrap_or(f64::NAN),
                o.state.stopping.best_epoch.unwrap_or(0),
                if o.stopped_early { " (early stop)" } else { "" },
                res.checkpoint.display()
            ),
        }
    }
    Ok(status)
}

/// Each seed runs in its own child process; nothing is shared but the config file.
fn train_in_processes(common: &Common, run: &RunConfig, parallel: usize) -> anyhow::Result<Status> {
    let exe = std::env::current_exe()?;
    fs::create_dir_all(&run.out_dir)?;
    let config_path = run.write_resolved(&run.out_dir)?;
    let mut worst = 0;
    for chunk in run.seeds.chunks(parallel) {
        let mut children = Vec::new();
        for seed in chunk {
            let mut cmd = Command::new(&exe);
            cmd.arg("train").arg("--config").arg(&config_path).arg("--seed").arg(seed.to_string());
            if common.out.is_some() {
                cmd.arg("--out").arg(&run.out_dir);
            }
            children.push((*seed, cmd.spawn().with_context(|| format!("spawning seed {seed}"))?));
        }
        for (seed, mut child) in children {
            let code = child.wait()?.code().unwrap_or(2);
            if code != 0 {
                eprintln!("seed {seed} exited with status {code}");
            }
            worst = worst.max(code);
        }
    }
    match worst {
        0 => Ok(Status::Success),
        1 => Ok(Status::Failed),
        _ => Err(usage("one or more seed processes failed")),
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<Status> {
    match &cli.command {
        Cmd::Synth { common } => {
            let mut common = common.clone();
            if let Some(s) = common.seed {
                common.overrides.push(format!("synth.seed={s}"));
            }
            let run = resolve(&common)?;
            synth(&run, &run.out_dir)?;
            Ok(Status::Success)
        }
        Cmd::Train {
            common,
            parallel_seeds,
            checkpoint,
        } => {
            let run = resolve(common)?;
            if *parallel_seeds == 0 {
                return Err(usage("--parallel-seeds must be positive"));
            }
            train_cmd(common, &run, *parallel_seeds, checkpoint.as_deref())
        }
        Cmd::Eval { common, checkpoint } => {
            let run = resolve(common)?;
            let dataset = run.dataset()?;
            let paths = default_checkpoints(&run, checkpoint);
            let summary = eval_checkpoints(&run, &dataset, &paths)?;
            let path = run.out_dir.join(EVAL_FILE);
            write_json(&summary, &path)?;
            for s in &summary.per_seed {
                let m = &s.report.metrics;
                println!(
                    "seed {}: nlpd {:.5} crps {:.5} mse {:.5} cov50 {:.4} cov90 {:.4}",
                    s.seed, m.nlpd, m.crps, m.mse, m.coverage_50, m.coverage_90
                );
            }
            let (m, sd) = (&summary.aggregate.metrics, &summary.aggregate.std);
            println!(
                "mean over {} seeds: nlpd {:.5} ± {:.5} crps {:.5} ± {:.5} mse {:.5} ± {:.5}",
                summary.aggregate.seeds, m.nlpd, sd.nlpd, m.crps, sd.crps, m.mse, sd.mse
            );
            println!("wrote {}", path.display());
            Ok(Status::Success)
        }
        Cmd::Diagnose { common, checkpoint } => {
            let run = resolve(common)?;
            let dataset = run.dataset()?;
            for p in default_checkpoints(&run, checkpoint) {
                let ck = load_matching(&run, &p)?;
                let opts = eval_options(&run, &ck);
                let dir = run.seed_dir(ck.config.seed).join("diagnostics");
                let summary = export_diagnostics(&ck.state.best_model(), &dataset.splits.test, &opts, &dir)?;
                if let Some(rec) = recovery_of(&ck, &dataset.splits.test, opts.temperature)? {
                    write_json(&rec, &dir.join("recovery.json"))?;
                }
                println!("seed {}: R_eff {} -> {}", ck.config.seed, summary.r_eff, dir.display());
            }
            Ok(Status::Success)
        }
        Cmd::Gradcheck { common, zero_group } => {
            let run = resolve(common)?;
            let seed = common.seed.unwrap_or(run.train.seed);
            let report = gradcheck(&run.train, seed, zero_group.as_deref())?;
            for (name, err) in &report.groups {
                let mark = if *err < GRAD_CHECK_TOLERANCE { "ok" } else { "FAIL" };
                println!("{name:<10} {err:.3e} {mark}");
            }
            println!("worst {:.3e} (tolerance {GRAD_CHECK_TOLERANCE:.0e})", report.worst);
            Ok(if report.passed(GRAD_CHECK_TOLERANCE) {
                Status::Success
            } else {
                Status::Failed
            })
        }
    }
}
