//! Seeded multi-trial experiments over toy tasks, with an aggregated report.
//!
//! Trial `t` uses seed `seed + t` for both its task and its run, so two
//! methods compared on the same config see identical task/seed pairs.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::baselines::{run_block_bon, run_pass1};
use crate::config::{Metric, PositionPolicy, R3Config};
use crate::engine::{run_r3, RunOutput};
use crate::error::{Error, Result, RunFailure};
use crate::model::{CallCounts, Denoiser, ProcessReward};
use crate::toyworld::{grade, ContextMode, Grade, PrmMode, PrmSettings, ToySettings, ToyWorld};
use crate::transcript::{emit_trace, Transcript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    R3,
    Pass1,
    Bon,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::R3 => "r3",
            Method::Pass1 => "pass1",
            Method::Bon => "bon",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "r3" => Ok(Method::R3),
            "pass1" => Ok(Method::Pass1),
            "bon" => Ok(Method::Bon),
            _ => Err(format!("unknown method {s:?} (expected r3, pass1 or bon)")),
        }
    }
}

/// Experiment configuration, read from flat `key = value` TOML.
///
/// Unset keys take the standard defaults (see [`R3Config`]) and the toy
/// defaults (`p_err = 0.3`, exact task-truth PRM with levels 0.95 / 0.1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Second method run on the same seeds for a paired comparison.
    pub compare: Option<Method>,
    pub trials: usize,
    pub seed: u64,
    /// Concurrent trials; 0 uses every core.
    pub workers: usize,

    pub n_total: usize,
    pub block_len: usize,
    pub window: usize,
    pub tau_thresh: f64,
    pub n_samples: usize,
    pub beta_i: f64,
    pub alpha_b: f64,
    pub p_min: f64,
    pub epsilon: f64,
    pub temperature: f64,
    pub demask_steps: usize,
    pub metric: Metric,
    pub retain_original: bool,
    pub position_policy: PositionPolicy,

    pub p_err: f64,
    pub digits: usize,
    pub prm_mode: PrmMode,
    pub prm_context: ContextMode,
    pub prm_hi: f64,
    pub prm_lo: f64,
    pub prm_sigma: f64,

    pub denoiser_endpoint: Option<String>,
    pub prm_endpoint: Option<String>,
    pub http_timeout_ms: u64,
    pub http_retries: u32,

    pub out: Option<PathBuf>,
    pub trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let r3 = R3Config::default();
        let toy = ToySettings::default();
        Self {
            method: Method::R3,
            compare: None,
            trials: 100,
            seed: 0,
            workers: 0,
            n_total: r3.n_total,
            block_len: r3.block_len,
            window: r3.window,
            tau_thresh: r3.tau_thresh,
            n_samples: r3.n_samples,
            beta_i: r3.beta_i,
            alpha_b: r3.alpha_b,
            p_min: r3.p_min,
            epsilon: r3.epsilon,
            temperature: r3.temperature,
            demask_steps: r3.demask_steps,
            metric: r3.metric,
            retain_original: r3.retain_original,
            position_policy: r3.position_policy,
            p_err: toy.p_err,
            digits: toy.digits,
            prm_mode: toy.prm.mode,
            prm_context: toy.prm.context,
            prm_hi: toy.prm.hi,
            prm_lo: toy.prm.lo,
            prm_sigma: toy.prm.sigma,
            denoiser_endpoint: None,
            prm_endpoint: None,
            http_timeout_ms: 10_000,
            http_retries: 3,
            out: None,
            trace: false,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.compare == Some(self.method) {
            return Err(Error::Config("compare names the same method as method".into()));
        }
        self.r3_config(self.seed).validate()?;
        ToyWorld::new(self.seed, &self.r3_config(self.seed), &self.toy_settings()).map(|_| ())
    }

    pub fn r3_config(&self, seed: u64) -> R3Config {
        R3Config {
            n_total: self.n_total,
            block_len: self.block_len,
            window: self.window,
            tau_thresh: self.tau_thresh,
            n_samples: self.n_samples,
            beta_i: self.beta_i,
            alpha_b: self.alpha_b,
            p_min: self.p_min,
            epsilon: self.epsilon,
            temperature: self.temperature,
            demask_steps: self.demask_steps,
            metric: self.metric,
            retain_original: self.retain_original,
            position_policy: self.position_policy,
            seed,
        }
    }

    pub fn toy_settings(&self) -> ToySettings {
        ToySettings {
            p_err: self.p_err,
            digits: self.digits,
            prm: PrmSettings {
                mode: self.prm_mode,
                context: self.prm_context,
                hi: self.prm_hi,
                lo: self.prm_lo,
                sigma: self.prm_sigma,
            },
        }
    }

    pub fn methods(&self) -> Vec<Method> {
        std::iter::once(self.method).chain(self.compare).collect()
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }
}

/// Supplies the models for one trial. The default serves the toy oracles;
/// other providers (HTTP adapters) can stand in for either model.
pub trait ModelProvider: Sync {
    fn denoiser<'a>(&'a self, world: &'a ToyWorld) -> Result<Box<dyn Denoiser + 'a>>;
    fn prm<'a>(&'a self, world: &'a ToyWorld) -> Result<Box<dyn ProcessReward + 'a>>;
}

pub struct ToyModels;

impl ModelProvider for ToyModels {
    fn denoiser<'a>(&'a self, world: &'a ToyWorld) -> Result<Box<dyn Denoiser + 'a>> {
        Ok(Box::new(&world.denoiser))
    }
    fn prm<'a>(&'a self, world: &'a ToyWorld) -> Result<Box<dyn ProcessReward + 'a>> {
        Ok(Box::new(&world.prm))
    }
}

pub fn run_method(
    method: Method,
    world: &ToyWorld,
    dn: &dyn Denoiser,
    prm: &dyn ProcessReward,
    cfg: &R3Config,
) -> std::result::Result<RunOutput, RunFailure> {
    let prompt = [world.prompt()];
    match method {
        Method::R3 => run_r3(&prompt, dn, prm, cfg),
        Method::Pass1 => run_pass1(&prompt, dn, cfg),
        Method::Bon => run_block_bon(&prompt, dn, prm, cfg),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub grade: Grade,
    pub counts: CallCounts,
    pub transcript: Transcript,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub method: Method,
    /// `Err` holds the reason a trial was excluded.
    pub outcome: std::result::Result<TrialOutcome, String>,
}

/// Runs one trial of `method`. Transport failures exclude the trial; any
/// other failure aborts the experiment.
pub fn run_trial(
    exp: &ExperimentConfig,
    provider: &dyn ModelProvider,
    method: Method,
    trial: usize,
) -> std::result::Result<TrialResult, RunFailure> {
    let seed = exp.trial_seed(trial);
    let cfg = exp.r3_config(seed);
    let setup = || -> Result<ToyWorld> { ToyWorld::new(seed, &cfg, &exp.toy_settings()) };
    let world = setup().map_err(|e| RunFailure::new(e, Vec::new()))?;
    let models = provider
        .denoiser(&world)
        .and_then(|d| provider.prm(&world).map(|p| (d, p)));
    let (dn, prm) = models.map_err(|e| RunFailure::new(e, Vec::new()))?;
    let outcome = match run_method(method, &world, dn.as_ref(), prm.as_ref(), &cfg) {
        Ok(out) => {
            let item = out.items.into_iter().next().expect("single-item batch");
            let grade = grade(&item.seq, &world.task).map_err(|e| RunFailure::new(e, Vec::new()))?;
            Ok(TrialOutcome {
                grade,
                counts: out.counts,
                transcript: item.transcript,
            })
        }
        Err(f) if f.source.is_transport() => {
            warn!(trial, seed, method = method.name(), error = %f.source, "trial excluded");
            Err(f.source.to_string())
        }
        Err(f) => return Err(f),
    };
    Ok(TrialResult {
        trial,
        seed,
        method,
        outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCounts {
    pub batched_prm_invocations: f64,
    pub block_scorings: f64,
    pub denoiser_invocations: f64,
    pub denoiser_token_updates: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub trials_ok: usize,
    pub trials_failed: Vec<usize>,
    /// Fraction of trials whose final block is right.
    pub accuracy: f64,
    pub accuracy_se: f64,
    /// Fraction of trials with every block right.
    pub all_blocks_accuracy: f64,
    /// Accuracy of each block position across trials.
    pub per_block_accuracy: Vec<f64>,
    pub block_accuracy: f64,
    pub undecodable_blocks: usize,
    pub counts_total: CallCounts,
    pub counts_mean: MeanCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub first: Method,
    pub second: Method,
    pub pairs: usize,
    /// Mean of `correct(first) - correct(second)` over paired trials.
    pub accuracy_diff: f64,
    pub accuracy_diff_se: f64,
    pub first_only: usize,
    pub second_only: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub methods: Vec<MethodReport>,
    pub paired: Option<PairedComparison>,
    /// Excluded from determinism comparisons.
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub report: Report,
    pub trials: Vec<TrialResult>,
}

/// Aborted experiment: the failing trial and whatever it had logged.
#[derive(Debug)]
pub struct ExperimentFailure {
    pub trial: usize,
    pub method: Method,
    pub failure: RunFailure,
}

impl std::fmt::Display for ExperimentFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "trial {} ({}): {}", self.trial, self.method.name(), self.failure)
    }
}

impl std::error::Error for ExperimentFailure {}

pub fn run_experiment(
    exp: &ExperimentConfig,
    provider: &dyn ModelProvider,
) -> std::result::Result<Experiment, ExperimentFailure> {
    let started = Instant::now();
    let jobs: Vec<(usize, Method)> = (0..exp.trials)
        .flat_map(|t| exp.methods().into_iter().map(move |m| (t, m)))
        .collect();
    let run = |&(t, m): &(usize, Method)| {
        run_trial(exp, provider, m, t).map_err(|failure| ExperimentFailure {
            trial: t,
            method: m,
            failure,
        })
    };
    let results: std::result::Result<Vec<TrialResult>, ExperimentFailure> = if exp.workers == 1 {
        jobs.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(exp.workers)
            .build()
            .expect("thread pool");
        pool.install(|| jobs.par_iter().map(run).collect())
    };
    let mut trials = results?;
    trials.sort_by_key(|r| (r.trial, exp.methods().iter().position(|&m| m == r.method)));

    let methods = exp
        .methods()
        .into_iter()
        .map(|m| summarize(m, exp.n_total, trials.iter().filter(|r| r.method == m)))
        .collect();
    let paired = exp.compare.map(|second| pair(exp.method, second, &trials));
    Ok(Experiment {
        report: Report {
            config: exp.clone(),
            methods,
            paired,
            wall_time_ms: started.elapsed().as_millis() as u64,
        },
        trials,
    })
}

fn summarize<'a>(
    method: Method,
    n_total: usize,
    results: impl Iterator<Item = &'a TrialResult>,
) -> MethodReport {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match &r.outcome {
            Ok(o) => ok.push(o),
            Err(_) => failed.push(r.trial),
        }
    }
    let n = ok.len().max(1) as f64;
    let accuracy = ok.iter().filter(|o| o.grade.final_correct).count() as f64 / n;
    let per_block_accuracy: Vec<f64> = (0..n_total)
        .map(|b| {
            ok.iter()
                .filter(|o| o.grade.blocks[b] == crate::toyworld::BlockVerdict::Correct)
                .count() as f64
                / n
        })
        .collect();
    let counts_total: CallCounts = ok.iter().map(|o| o.counts).sum();
    MethodReport {
        method,
        trials_ok: ok.len(),
        trials_failed: failed,
        accuracy,
        accuracy_se: (accuracy * (1.0 - accuracy) / n).sqrt(),
        all_blocks_accuracy: ok.iter().filter(|o| o.grade.all_correct).count() as f64 / n,
        block_accuracy: per_block_accuracy.iter().sum::<f64>() / n_total as f64,
        per_block_accuracy,
        undecodable_blocks: ok.iter().map(|o| o.grade.undecodable_blocks()).sum(),
        counts_mean: MeanCounts {
            batched_prm_invocations: counts_total.batched_prm_invocations as f64 / n,
            block_scorings: counts_total.block_scorings as f64 / n,
            denoiser_invocations: counts_total.denoiser_invocations as f64 / n,
            denoiser_token_updates: counts_total.denoiser_token_updates as f64 / n,
        },
        counts_total,
    }
}

fn pair(first: Method, second: Method, trials: &[TrialResult]) -> PairedComparison {
    let correct = |m: Method, t: usize| {
        trials
            .iter()
            .find(|r| r.method == m && r.trial == t)
            .and_then(|r| r.outcome.as_ref().ok())
            .map(|o| o.grade.final_correct)
    };
    let mut diffs = Vec::new();
    let (mut first_only, mut second_only) = (0, 0);
    let max_trial = trials.iter().map(|r| r.trial + 1).max().unwrap_or(0);
    for t in 0..max_trial {
        if let (Some(a), Some(b)) = (correct(first, t), correct(second, t)) {
            first_only += (a && !b) as usize;
            second_only += (b && !a) as usize;
            diffs.push(a as i32 as f64 - b as i32 as f64);
        }
    }
    let n = diffs.len().max(1) as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    PairedComparison {
        first,
        second,
        pairs: diffs.len(),
        accuracy_diff: mean,
        accuracy_diff_se: (var / n).sqrt(),
        first_only,
        second_only,
    }
}

impl Report {
    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:>9} {:>7} {:>9} {:>9} {:>10} {:>10} {:>11}",
            "method", "trials", "accuracy", "±se", "all-blk", "blk-acc", "prm-calls", "scorings", "dn-calls"
        );
        for m in &self.methods {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>8.2}% {:>6.2}% {:>8.2}% {:>8.2}% {:>10.2} {:>10.2} {:>11.2}",
                m.method.name(),
                m.trials_ok,
                100.0 * m.accuracy,
                100.0 * m.accuracy_se,
                100.0 * m.all_blocks_accuracy,
                100.0 * m.block_accuracy,
                m.counts_mean.batched_prm_invocations,
                m.counts_mean.block_scorings,
                m.counts_mean.denoiser_invocations,
            );
            if !m.trials_failed.is_empty() {
                let _ = writeln!(s, "       excluded trials: {:?}", m.trials_failed);
            }
        }
        if let Some(p) = &self.paired {
            let _ = writeln!(
                s,
                "paired {} - {}: {:+.2} points (se {:.2}) over {} pairs; {} only-first, {} only-second",
                p.first.name(),
                p.second.name(),
                100.0 * p.accuracy_diff,
                100.0 * p.accuracy_diff_se,
                p.pairs,
                p.first_only,
                p.second_only
            );
        }
        let _ = writeln!(s, "wall time: {} ms", self.wall_time_ms);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn trace_path(dir: &Path, trial: usize, method: Method, partial: bool) -> PathBuf {
    let suffix = if partial { ".partial" } else { "" };
    dir.join("traces")
        .join(format!("trial-{trial:05}-{}{suffix}.jsonl", method.name()))
}

pub fn run_id(method: Method, seed: u64) -> String {
    format!("{}-{seed}", method.name())
}

/// Writes `report.json`, `report.txt` and, when tracing, one trace per trial.
pub fn write_outputs(dir: &Path, exp: &Experiment, trace: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), exp.report.to_json())?;
    fs::write(dir.join("report.txt"), exp.report.table())?;
    if trace {
        fs::create_dir_all(dir.join("traces"))?;
        for r in &exp.trials {
            if let Ok(o) = &r.outcome {
                let f = fs::File::create(trace_path(dir, r.trial, r.method, false))?;
                emit_trace(&o.transcript, &run_id(r.method, r.seed), BufWriter::new(f))?;
            }
        }
    }
    Ok(())
}

/// Flushes the transcript of an aborted trial next to the regular traces.
pub fn write_partial(dir: &Path, exp: &ExperimentConfig, failure: &ExperimentFailure) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("traces"))?;
    let path = trace_path(dir, failure.trial, failure.method, true);
    let f = fs::File::create(&path)?;
    let mut w = BufWriter::new(f);
    let id = run_id(failure.method, exp.trial_seed(failure.trial));
    for t in &failure.failure.transcripts {
        emit_trace(t, &id, &mut w)?;
    }
    Ok(path)
}
