//! Fast invariant checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{run_block_bon, run_pass1};
use crate::config::{Metric, R3Config};
use crate::engine::{run_r3, select_best};
use crate::model::FixedScore;
use crate::remask::{remask_probabilities, RemaskParams};
use crate::toyworld::{ToySettings, ToyWorld};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn world(seed: u64, cfg: &R3Config) -> ToyWorld {
    ToyWorld::new(seed, cfg, &ToySettings::default()).expect("default toy world")
}

pub fn run_all() -> Vec<Check> {
    let cfg = R3Config::default();
    let w = world(1, &cfg);
    let prompt = [w.prompt()];
    let mut out = Vec::new();

    let never = run_r3(&prompt, &w.denoiser, &FixedScore(1.0), &cfg);
    let always = run_r3(&prompt, &w.denoiser, &FixedScore(0.0), &cfg);
    let bon = run_block_bon(&prompt, &w.denoiser, &w.prm, &cfg);
    match (&never, &always, &bon) {
        (Ok(n), Ok(a), Ok(b)) => out.push(check(
            "prm call counts (16 blocks, K=8, N=5)",
            n.counts.batched_prm_invocations == 2
                && a.counts.batched_prm_invocations == 4
                && b.counts.block_scorings == 80,
            format!(
                "never={} always={} bon scorings={}",
                n.counts.batched_prm_invocations,
                a.counts.batched_prm_invocations,
                b.counts.block_scorings
            ),
        )),
        _ => out.push(check("prm call counts (16 blocks, K=8, N=5)", false, "run failed".into())),
    }

    let p = remask_probabilities(&[0.1, 0.5, 0.9], &RemaskParams::from(&cfg));
    let want = [0.999_999_973_079_98, 0.027_806_347_378_281_51, 0.01];
    let err = p
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    out.push(check(
        "remask probabilities {0.1, 0.5, 0.9}",
        err < 1e-6,
        format!("{p:?}, max error {err:.2e}"),
    ));

    let again = run_r3(&prompt, &w.denoiser, &w.prm, &cfg);
    let first = run_r3(&prompt, &w.denoiser, &w.prm, &cfg);
    out.push(check(
        "same seed, same run",
        matches!((&first, &again), (Ok(a), Ok(b)) if a == b),
        String::new(),
    ));

    let pass1 = run_pass1(&prompt, &w.denoiser, &cfg);
    out.push(check(
        "never-triggering r3 equals pass@1",
        matches!((&never, &pass1), (Ok(a), Ok(b)) if a.items[0].seq == b.items[0].seq),
        String::new(),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let width = rng.random_range(1..=8);
        let sets: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..width).map(|_| rng.random_range(1e-6..=1.0)).collect())
            .collect();
        let by_product = select_best(&sets, &[], Metric::Product, false).winner;
        let by_logs = sets
            .iter()
            .map(|s| s.iter().map(|x| x.ln()).sum::<f64>())
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
            .0;
        violations += (by_product != Some(by_logs)) as usize;
    }
    out.push(check(
        "product argmax equals sum-of-logs argmax",
        violations == 0,
        format!("{violations} violations in 200 sets"),
    ));

    let fine = always
        .as_ref()
        .map(|a| a.items[0].transcript.check_well_formed().is_ok() && a.items[0].ledger.is_complete())
        .unwrap_or(false);
    out.push(check("transcript and ledger well formed", fine, String::new()));
    out
}
