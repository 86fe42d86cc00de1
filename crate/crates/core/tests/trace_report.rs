use r3_core::experiment::{run_experiment, write_outputs, ExperimentConfig, Method, ToyModels};
use r3_core::model::{CallAccountant, CallCounts};
use r3_core::replay::replay;
use r3_core::toyworld::{ToySettings, ToyWorld};
use r3_core::transcript::{emit_trace, read_trace, EventKind};
use r3_core::{run_r3, R3Config};

fn traced_run(seed: u64) -> Vec<u8> {
    let cfg = R3Config {
        seed,
        ..R3Config::default()
    };
    let world = ToyWorld::new(seed, &cfg, &ToySettings::default()).unwrap();
    let out = run_r3(&[world.prompt()], &world.denoiser, &world.prm, &cfg).unwrap();
    let mut buf = Vec::new();
    emit_trace(&out.items[0].transcript, "r3-test", &mut buf).unwrap();
    buf
}

#[test]
fn replay_verifies_every_remask() {
    let mut cycles = 0;
    for seed in 0..30 {
        let records = read_trace(&traced_run(seed)[..]).unwrap();
        let remasks = records.iter().filter(|r| r.event == EventKind::Remask).count();
        let triggers = records.iter().filter(|r| r.event == EventKind::Trigger).count();
        let summary = replay(&records);
        assert!(summary.is_consistent(), "{:?}", summary.mismatches);
        assert_eq!(summary.remasks_verified, remasks);
        assert_eq!(summary.cycles.len(), triggers);
        cycles += triggers;
    }
    assert!(cycles > 0, "no refinement happened in 30 runs");
}

#[test]
fn replay_flags_tampered_positions() {
    let seed = (0..50)
        .find(|&s| {
            read_trace(&traced_run(s)[..])
                .unwrap()
                .iter()
                .any(|r| r.event == EventKind::Remask)
        })
        .expect("some run triggers");
    let mut records = read_trace(&traced_run(seed)[..]).unwrap();
    let remask = records.iter_mut().find(|r| r.event == EventKind::Remask).unwrap();
    let positions = remask.payload.positions.as_mut().unwrap();
    let block = positions.iter_mut().find(|p| !p.is_empty()).unwrap();
    block.pop();
    assert!(!replay(&records).is_consistent());
}

#[test]
fn reports_do_not_depend_on_worker_count() {
    let base = ExperimentConfig {
        trials: 40,
        seed: 77,
        compare: Some(Method::Bon),
        ..ExperimentConfig::default()
    };
    let mut one = run_experiment(&ExperimentConfig { workers: 1, ..base.clone() }, &ToyModels)
        .unwrap()
        .report;
    let mut many = run_experiment(&ExperimentConfig { workers: 4, ..base.clone() }, &ToyModels)
        .unwrap()
        .report;
    one.wall_time_ms = 0;
    many.wall_time_ms = 0;
    one.config.workers = 0;
    many.config.workers = 0;
    assert_eq!(one.to_json(), many.to_json());
}

#[test]
fn written_outputs_round_trip() {
    let cfg = ExperimentConfig {
        trials: 5,
        ..ExperimentConfig::default()
    };
    let exp = run_experiment(&cfg, &ToyModels).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &exp, true).unwrap();
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back: r3_core::experiment::Report = serde_json::from_str(&json).unwrap();
    assert_eq!(back, exp.report);
    for t in 0..5 {
        let path = r3_core::experiment::trace_path(dir.path(), t, Method::R3, false);
        let f = std::io::BufReader::new(std::fs::File::open(path).unwrap());
        let records = read_trace(f).unwrap();
        assert_eq!(records.len(), exp.trials[t].outcome.as_ref().unwrap().transcript.len());
        assert!(records.iter().all(|r| r.run_id == format!("r3-{t}")));
    }
}

#[test]
fn call_counts_add_up_across_runs() {
    let acct = CallAccountant::new();
    let mut expected = CallCounts::default();
    for (pairs, updates) in [(3usize, 7usize), (0, 0), (16, 32), (1, 1)] {
        acct.record_prm_batch(pairs);
        acct.record_denoise(updates);
        let single = CallAccountant::new();
        single.record_prm_batch(pairs);
        single.record_denoise(updates);
        expected += single.snapshot();
    }
    assert_eq!(acct.snapshot(), expected);

    let per_trial = run_experiment(&ExperimentConfig { trials: 6, ..ExperimentConfig::default() }, &ToyModels).unwrap();
    let summed: CallCounts = per_trial.trials.iter().map(|t| t.outcome.as_ref().unwrap().counts).sum();
    assert_eq!(per_trial.report.methods[0].counts_total, summed);
}
