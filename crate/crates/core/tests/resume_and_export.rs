use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use autotune_core::dehb::DehbSettings;
use autotune_core::export::{self, ExportKind, JOURNAL_FILE};
use autotune_core::journal::{self, Journal, JournalError, Phase, RecordBody};
use autotune_core::objectives::ObjectiveSpec;
use autotune_core::pbt::{ExploreMode, PbtSettings};
use autotune_core::protocol::{incumbents, run_protocol, ChecklistMeta, MethodSpec, ProtocolConfig, RunOptions, SeedPlan};
use autotune_core::runner::RunError;
use autotune_core::stats;

fn config(method: MethodSpec, tuning: Vec<u64>, budget: usize) -> ProtocolConfig {
    let spec = ObjectiveSpec::SeededValley { shift: 0.2, noise: 0.01 };
    let mut cfg = ProtocolConfig::new(method, spec.default_space(2), spec);
    cfg.seed_plan = SeedPlan::new(tuning, vec![10, 11, 12]).unwrap();
    cfg.repetitions = 1;
    cfg.budget_runs = budget;
    cfg.rng_seed = 9;
    cfg
}

fn run_to_completion(cfg: &ProtocolConfig, dir: &Path) {
    let j = Journal::create(&dir.join(JOURNAL_FILE), cfg.header()).unwrap();
    run_protocol(cfg, j, Vec::new(), &RunOptions::default()).unwrap();
}

fn tuning_trials(path: &Path) -> usize {
    journal::read(path).unwrap().trials().filter(|t| t.phase == Phase::Tuning).count()
}

#[test]
fn interrupted_random_search_runs_exactly_the_rest() {
    let cfg = config(MethodSpec::RandomSearch { n_configs: None }, vec![0], 16);
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    run_to_completion(&cfg, &full);

    let cut = dir.path().join("cut");
    let path = cut.join(JOURNAL_FILE);
    let j = Journal::create(&path, cfg.header()).unwrap();
    let opts = RunOptions { interrupt_after: Some(7), ..Default::default() };
    assert!(matches!(run_protocol(&cfg, j, Vec::new(), &opts), Err(RunError::Interrupted { fresh_trials: 7 })));
    assert_eq!(tuning_trials(&path), 7);

    let (j, loaded) = Journal::open(&path).unwrap();
    run_protocol(&cfg, j, loaded.records, &RunOptions::default()).unwrap();
    assert_eq!(tuning_trials(&path) - 7, 9);
    let a = incumbents(&journal::read(&full.join(JOURNAL_FILE)).unwrap().records);
    let b = incumbents(&journal::read(&path).unwrap().records);
    assert_eq!(a, b);
}

#[test]
fn resuming_a_completed_run_adds_nothing() {
    let cfg = config(MethodSpec::Dehb(DehbSettings { eta: 3.0, min_budget: 0.1, ..Default::default() }), vec![0, 1], 6);
    let dir = tempfile::tempdir().unwrap();
    run_to_completion(&cfg, dir.path());
    let path = dir.path().join(JOURNAL_FILE);
    let before = std::fs::read(&path).unwrap();
    let (j, loaded) = Journal::open(&path).unwrap();
    assert!(loaded.is_complete());
    run_protocol(&cfg, j, loaded.records, &RunOptions::default()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), before);
}

#[test]
fn torn_tail_is_recovered_on_resume() {
    let cfg = config(MethodSpec::RandomSearch { n_configs: None }, vec![0, 1], 5);
    let dir = tempfile::tempdir().unwrap();
    let reference = dir.path().join("ref");
    run_to_completion(&cfg, &reference);

    let path = dir.path().join("torn").join(JOURNAL_FILE);
    let j = Journal::create(&path, cfg.header()).unwrap();
    let opts = RunOptions { interrupt_after: Some(4), ..Default::default() };
    assert!(run_protocol(&cfg, j, Vec::new(), &opts).is_err());
    // A half-written record, as left by a crash mid-write.
    std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"seq\":5,\"type\":\"tri").unwrap();

    let (j, loaded) = Journal::open(&path).unwrap();
    assert_eq!(loaded.warnings.len(), 1);
    run_protocol(&cfg, j, loaded.records, &RunOptions::default()).unwrap();
    let a = journal::read(&reference.join(JOURNAL_FILE)).unwrap();
    let b = journal::read(&path).unwrap();
    assert!(b.warnings.is_empty());
    assert_eq!(a.records.len(), b.records.len());
    assert!(a.records.iter().zip(&b.records).all(|(x, y)| x.body.replays_as(&y.body)));
}

#[test]
fn resume_with_another_space_names_both_digests() {
    let cfg = config(MethodSpec::RandomSearch { n_configs: None }, vec![0], 3);
    let dir = tempfile::tempdir().unwrap();
    run_to_completion(&cfg, dir.path());
    let (j, _) = Journal::open(&dir.path().join(JOURNAL_FILE)).unwrap();
    let other = ObjectiveSpec::SeededValley { shift: 0.2, noise: 0.01 }.default_space(3);
    let err = j.check_space(&other).unwrap_err();
    let JournalError::DigestMismatch { journal, file } = &err else { panic!("{err}") };
    let msg = err.to_string();
    assert!(msg.contains(journal.as_str()) && msg.contains(file.as_str()));
}

#[test]
fn replaying_a_replayed_journal_changes_nothing() {
    let cfg = config(
        MethodSpec::Pbt(PbtSettings { population: Some(4), intervals: 3, quantile: 0.25, explore: ExploreMode::Gp, ..Default::default() }),
        vec![0, 1],
        4,
    );
    let dir = tempfile::tempdir().unwrap();
    run_to_completion(&cfg, dir.path());
    let path = dir.path().join(JOURNAL_FILE);
    let first = std::fs::read(&path).unwrap();
    for _ in 0..2 {
        let (j, loaded) = Journal::open(&path).unwrap();
        run_protocol(&cfg, j, loaded.records, &RunOptions::default()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}

#[test]
fn journal_spend_matches_reported_spend() {
    for method in [
        MethodSpec::RandomSearch { n_configs: None },
        MethodSpec::Dehb(DehbSettings { eta: 3.0, min_budget: 0.1, ..Default::default() }),
        MethodSpec::Pbt(PbtSettings { population: Some(4), intervals: 5, quantile: 0.25, warmstart_runs: 2, explore: ExploreMode::Gp, ..Default::default() }),
    ] {
        let cfg = config(method, vec![0, 1, 2], 6);
        let dir = tempfile::tempdir().unwrap();
        run_to_completion(&cfg, dir.path());
        let loaded = journal::read(&dir.path().join(JOURNAL_FILE)).unwrap();
        let rep = loaded.repetitions().next().unwrap().clone();
        let spend = |phase| loaded.trials().filter(|t| t.phase == phase).map(|t| t.spend()).sum::<f64>();
        assert!((spend(Phase::Tuning) - rep.spend).abs() < 1e-9, "{}", cfg.method);
        assert!((spend(Phase::Warmstart) - rep.warmstart_spend).abs() < 1e-9);
        assert!(rep.spend + rep.warmstart_spend <= cfg.budget_runs as f64 + 1e-9);
    }
}

#[test]
fn exports_are_deterministic_and_reaggregate_exactly() {
    let mut cfg = config(MethodSpec::RandomSearch { n_configs: None }, vec![0, 1], 4);
    cfg.repetitions = 3;
    let dir = tempfile::tempdir().unwrap();
    run_to_completion(&cfg, dir.path());
    let meta = ChecklistMeta::default();
    for kind in [ExportKind::Trials, ExportKind::Incumbents, ExportKind::Ranks, ExportKind::Checklist] {
        let p = export::export(dir.path(), kind, &meta).unwrap();
        let first = std::fs::read(&p).unwrap();
        export::export(dir.path(), kind, &meta).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first, "{kind:?}");
    }

    let mut reader = csv::Reader::from_path(dir.path().join("exports/trials.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (phase, rep, cost) = (col("phase"), col("rep"), col("cost"));
    let mut per_rep: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for row in reader.records() {
        let row = row.unwrap();
        if &row[phase] == "test" {
            per_rep.entry(row[rep].parse().unwrap()).or_default().push(row[cost].parse().unwrap());
        }
    }
    let means: Vec<f64> = per_rep.values().map(|v| stats::mean(v)).collect();
    let report = export::incumbent_report(&export::load_run(dir.path()).unwrap());
    assert_eq!(report.mean, Some(stats::mean(&means)));
    assert_eq!(report.std, Some(stats::std_dev(&means)));
}

#[test]
fn partial_journal_still_exports() {
    let cfg = config(MethodSpec::RandomSearch { n_configs: None }, vec![0], 4);
    let dir = tempfile::tempdir().unwrap();
    let j = Journal::create(&dir.path().join(JOURNAL_FILE), cfg.header()).unwrap();
    let opts = RunOptions { interrupt_after: Some(2), ..Default::default() };
    assert!(run_protocol(&cfg, j, Vec::new(), &opts).is_err());
    let p = export::export(dir.path(), ExportKind::Trials, &ChecklistMeta::default()).unwrap();
    assert_eq!(std::fs::read_to_string(p).unwrap().lines().count(), 3);
    let loaded = export::load_run(dir.path()).unwrap();
    assert!(!loaded.is_complete());
    assert!(loaded.records.iter().all(|r| matches!(r.body, RecordBody::Trial(_))));
}
