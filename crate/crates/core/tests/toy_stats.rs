//! Monte-Carlo checks of the toy world against closed forms. Tolerances are
//! four standard errors unless noted.

use r3_core::baselines::{run_block_bon, run_pass1};
use r3_core::experiment::{run_experiment, ExperimentConfig, Method, ToyModels};
use r3_core::model::{denoise_region, CallAccountant};
use r3_core::toyworld::{ToySettings, ToyWorld};
use r3_core::{run_r3, Phase, PositionPolicy, R3Config, StreamKey};

fn within(observed: f64, expected: f64, n: f64, k: f64) -> bool {
    let se = (expected * (1.0 - expected) / n).sqrt();
    (observed - expected).abs() <= k * se
}

#[test]
fn denoiser_is_right_at_one_minus_p_err() {
    let cfg = R3Config::default();
    let world = ToyWorld::new(5, &cfg, &ToySettings::default()).unwrap();
    let mut seq = world.prompt();
    seq.push_masked_block();
    let editable: Vec<usize> = seq.block_range(0).collect();
    let acct = CallAccountant::new();
    let n = 10_000;
    let mut right = 0;
    for s in 0..n {
        let key = StreamKey::new(1, 0, 0, Phase::Extend).with_sample(s);
        let out = denoise_region(&world.denoiser, &seq, &editable, 0.8, 8, key, &acct).unwrap();
        let value = world.task.decode(out.block_slice(0).unwrap());
        assert!(value.is_some(), "oracle output always decodes");
        right += (value == Some(world.task.truth[0])) as usize;
    }
    let rate = right as f64 / n as f64;
    assert!(within(rate, 0.7, n as f64, 4.0), "rate {rate}");
    assert_eq!(acct.snapshot().denoiser_invocations, n as u64);
}

#[test]
fn pass1_sequence_accuracy_is_a_power() {
    let cfg = ExperimentConfig {
        method: Method::Pass1,
        trials: 4000,
        ..ExperimentConfig::default()
    };
    let r = &run_experiment(&cfg, &ToyModels).unwrap().report.methods[0];
    let expected = 0.7f64.powi(16);
    assert!(within(r.all_blocks_accuracy, expected, 4000.0, 4.0), "{}", r.all_blocks_accuracy);
    assert!(within(r.block_accuracy, 0.7, 64_000.0, 4.0), "{}", r.block_accuracy);
}

#[test]
fn bon_matches_its_closed_forms() {
    let cfg = ExperimentConfig {
        method: Method::Bon,
        trials: 1500,
        ..ExperimentConfig::default()
    };
    let r = &run_experiment(&cfg, &ToyModels).unwrap().report.methods[0];
    let per_block = 1.0 - 0.3f64.powi(5);
    assert!(within(r.block_accuracy, per_block, 24_000.0, 4.0), "{}", r.block_accuracy);
    assert!(within(r.all_blocks_accuracy, per_block.powi(16), 1500.0, 4.0), "{}", r.all_blocks_accuracy);
    assert_eq!(r.counts_mean.block_scorings, 80.0);
    assert_eq!(r.counts_mean.batched_prm_invocations, 16.0);
}

#[test]
fn single_block_windows_correct_with_probability_one_minus_p_to_the_n() {
    // With K = 1 every wrong block triggers, gets fully value-masked under the
    // prefix policy, and is fixed unless all candidates are wrong.
    let trials = 1000;
    let (mut wrong_first, mut fixed, mut correct, mut blocks) = (0, 0, 0, 0);
    for seed in 0..trials {
        let cfg = R3Config {
            seed,
            window: 1,
            position_policy: PositionPolicy::Prefix,
            ..R3Config::default()
        };
        let world = ToyWorld::new(seed, &cfg, &ToySettings::default()).unwrap();
        let out = run_r3(&[world.prompt()], &world.denoiser, &world.prm, &cfg).unwrap();
        let t = &out.items[0].transcript;
        let triggers = t.count(r3_core::EventKind::Trigger);
        wrong_first += triggers;
        fixed += t.count(r3_core::EventKind::Select);
        let grade = r3_core::toyworld::grade(&out.items[0].seq, &world.task).unwrap();
        correct += grade.correct_blocks();
        blocks += cfg.n_total;
    }
    let p_fix = fixed as f64 / wrong_first as f64;
    assert!(within(p_fix, 1.0 - 0.3f64.powi(5), wrong_first as f64, 4.0), "{p_fix}");
    assert!(within(wrong_first as f64 / blocks as f64, 0.3, blocks as f64, 4.0));
    let acc = correct as f64 / blocks as f64;
    assert!(within(acc, 1.0 - 0.3f64.powi(6), blocks as f64, 4.0), "{acc}");
}

#[test]
fn bon_with_one_sample_is_pass1() {
    for seed in 0..20 {
        let cfg = R3Config {
            seed,
            n_samples: 1,
            ..R3Config::default()
        };
        let world = ToyWorld::new(seed, &cfg, &ToySettings::default()).unwrap();
        let prompt = [world.prompt()];
        let bon = run_block_bon(&prompt, &world.denoiser, &world.prm, &cfg).unwrap();
        let p1 = run_pass1(&prompt, &world.denoiser, &cfg).unwrap();
        assert_eq!(bon.items[0].seq, p1.items[0].seq);
    }
}
