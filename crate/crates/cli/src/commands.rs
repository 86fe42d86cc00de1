use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use r3_core::experiment::{run_experiment, write_outputs, write_partial, ExperimentConfig, Method, Report};
use r3_core::replay::{replay, ReplaySummary};
use r3_core::selftest::{run_all, Check};
use r3_core::transcript::read_trace;

use crate::ConfiguredModels;

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub method: Option<Method>,
    pub compare: Option<Method>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub trace: bool,
}

pub fn load_config(path: Option<&Path>, ov: &RunOverrides) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = ov.method {
        cfg.method = m;
    }
    if ov.compare.is_some() {
        cfg.compare = ov.compare;
    }
    if let Some(t) = ov.trials {
        cfg.trials = t;
    }
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if ov.out.is_some() {
        cfg.out = ov.out.clone();
    }
    cfg.trace |= ov.trace;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the experiment and writes its outputs. On an aborted trial the
/// partial trace is written before the error is returned.
pub fn run(cfg: &ExperimentConfig) -> anyhow::Result<Report> {
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let provider = ConfiguredModels::from_config(cfg);
    match run_experiment(cfg, &provider) {
        Ok(exp) => {
            write_outputs(&out, &exp, cfg.trace)
                .with_context(|| format!("writing outputs to {}", out.display()))?;
            Ok(exp.report)
        }
        Err(failure) => {
            let written = write_partial(&out, cfg, &failure);
            let msg = match written {
                Ok(p) => format!("{failure}; partial trace at {}", p.display()),
                Err(e) => format!("{failure}; partial trace not written: {e}"),
            };
            bail!(msg)
        }
    }
}

pub fn replay_file(path: &Path) -> anyhow::Result<ReplaySummary> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let records = read_trace(BufReader::new(f))?;
    Ok(replay(&records))
}

fn tokens(t: &[u32]) -> String {
    t.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn render_replay(s: &ReplaySummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} events, {} reviews, {} remasks verified, {} correction cycles",
        s.events,
        s.reviews,
        s.remasks_verified,
        s.cycles.len()
    );
    for c in &s.cycles {
        let _ = writeln!(
            out,
            "\n[{}] item {} blocks {}..={}",
            c.run_id, c.item, c.block_range.0, c.block_range.1
        );
        let _ = writeln!(out, "  review  {:?}", c.review_scores);
        let _ = writeln!(out, "  before  {}", tokens(&c.before));
        if let Some(m) = &c.masked {
            let _ = writeln!(out, "  masked  {}", tokens(m));
        }
        match (&c.after, c.selected) {
            (Some(a), Some(i)) => {
                let _ = writeln!(out, "  after   {} (candidate {i})", tokens(a));
            }
            (Some(a), None) => {
                let _ = writeln!(out, "  after   {} (original kept)", tokens(a));
            }
            _ => {}
        }
        if let Some(sc) = &c.after_scores {
            let _ = writeln!(out, "  scores  {sc:?}");
        }
    }
    for m in &s.mismatches {
        let _ = writeln!(out, "MISMATCH {m}");
    }
    out
}

pub fn selftest() -> Vec<Check> {
    run_all()
}

pub fn render_checks(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{tag}  {}  {}", c.name, c.detail);
    }
    out
}
