//! CSV and text exports derived from journals. Output depends only on the
//! journal contents, so exporting twice gives identical bytes.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::journal::{self, JournalError, Loaded, RecordBody};
use crate::objectives::Orientation;
use crate::protocol::{emit_checklist, rank_methods, ChecklistMeta, IncumbentReport, RankError, RankTable, ScoreTable};
use crate::stats;

pub const JOURNAL_FILE: &str = "journal.log";
pub const EXPORT_DIR: &str = "exports";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown export kind `{0}` (expected trials, incumbents, ranks or checklist)")]
    UnknownKind(String),
    #[error("ranking needs runs of at least one method with a finished repetition")]
    NothingToRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Trials,
    Incumbents,
    Ranks,
    Checklist,
}

impl ExportKind {
    pub fn file_name(self) -> &'static str {
        match self {
            ExportKind::Trials => "trials.csv",
            ExportKind::Incumbents => "incumbents.csv",
            ExportKind::Ranks => "ranks.csv",
            ExportKind::Checklist => "checklist.txt",
        }
    }
}

impl FromStr for ExportKind {
    type Err = ExportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trials" => Ok(ExportKind::Trials),
            "incumbents" => Ok(ExportKind::Incumbents),
            "ranks" => Ok(ExportKind::Ranks),
            "checklist" => Ok(ExportKind::Checklist),
            other => Err(ExportError::UnknownKind(other.to_string())),
        }
    }
}

pub fn load_run(dir: &Path) -> Result<Loaded, JournalError> {
    journal::read(&dir.join(JOURNAL_FILE))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String, ExportError> {
    let bytes = w.into_inner().map_err(|e| ExportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per trial: seq, one column per hyperparameter, budget, seed,
/// cost, status, wall_time, then rep, phase and group.
pub fn trials_csv(run: &Loaded) -> Result<String, ExportError> {
    let names: Vec<&str> = run.header.space.params().iter().map(|p| p.name.as_str()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["seq"];
    header.extend(&names);
    header.extend(["budget", "seed", "cost", "status", "wall_time", "rep", "phase", "group"]);
    w.write_record(&header)?;
    for r in &run.records {
        let RecordBody::Trial(t) = &r.body else { continue };
        let mut row = vec![r.seq.to_string()];
        row.extend(names.iter().map(|n| t.config.get(n).map(|v| v.to_string()).unwrap_or_default()));
        row.push(t.budget.to_string());
        row.push(t.seed.to_string());
        row.push(opt(t.cost));
        row.push(serde_json::to_value(t.status).expect("status").as_str().unwrap_or_default().to_string());
        row.push(t.wall_time.to_string());
        row.push(t.rep.to_string());
        row.push(serde_json::to_value(t.phase).expect("phase").as_str().unwrap_or_default().to_string());
        row.push(t.group.to_string());
        w.write_record(&row)?;
    }
    finish(w)
}

pub fn incumbent_report(run: &Loaded) -> IncumbentReport {
    let reps: Vec<_> = run.repetitions().cloned().collect();
    IncumbentReport::from_summaries(run.header.method.label(), run.header.objective.name(), &reps)
}

/// One row per repetition plus an aggregate row (`rep` = `all`).
pub fn incumbents_csv(run: &Loaded) -> Result<String, ExportError> {
    let names: Vec<&str> = run.header.space.params().iter().map(|p| p.name.as_str()).collect();
    let report = incumbent_report(run);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method", "objective", "rep", "tuning_cost", "test_mean", "test_std", "spend", "failure"];
    header.extend(&names);
    w.write_record(&header)?;
    for (rep, stats) in report.repetitions.iter().zip(report.test_stats()) {
        let mut row = vec![
            report.method.clone(),
            report.objective.clone(),
            rep.rep.to_string(),
            opt(rep.tuning_cost),
            opt(stats.map(|s| s.0)),
            opt(stats.map(|s| s.1)),
            rep.spend.to_string(),
            rep.failure.clone().unwrap_or_default(),
        ];
        row.extend(names.iter().map(|n| {
            rep.incumbent.as_ref().and_then(|c| c.get(n)).map(|v| v.to_string()).unwrap_or_default()
        }));
        w.write_record(&row)?;
    }
    let mut row = vec![
        report.method.clone(),
        report.objective.clone(),
        "all".into(),
        String::new(),
        opt(report.mean),
        opt(report.std),
        stats::mean(&report.repetitions.iter().map(|r| r.spend).collect::<Vec<_>>()).to_string(),
        if report.warning() { format!("{} failed repetitions", report.failed_repetitions) } else { String::new() },
    ];
    row.extend(names.iter().map(|_| String::new()));
    w.write_record(&row)?;
    finish(w)
}

/// Score table with one environment per objective and one method per run
/// label, using each run's aggregate test mean and std.
pub fn score_table(runs: &[Loaded]) -> ScoreTable {
    let mut table = ScoreTable::new(Orientation::LowerIsBetter);
    for run in runs {
        let report = incumbent_report(run);
        if let (Some(mean), Some(std)) = (report.mean, report.std) {
            table.push(&environment_name(run), &report.method, mean, std);
        }
    }
    table
}

fn environment_name(run: &Loaded) -> String {
    run.header.objective.to_string()
}

pub fn ranks(runs: &[Loaded]) -> Result<RankTable, ExportError> {
    let table = score_table(runs);
    if table.rows.is_empty() {
        return Err(ExportError::NothingToRank);
    }
    Ok(rank_methods(&table)?)
}

/// Renders `kind` for the runs in `dirs`; trials and incumbents use the
/// first run only.
pub fn render(kind: ExportKind, runs: &[Loaded], meta: &ChecklistMeta) -> Result<String, ExportError> {
    match kind {
        ExportKind::Trials => runs.first().map_or(Ok(String::new()), trials_csv),
        ExportKind::Incumbents => runs.first().map_or(Ok(String::new()), incumbents_csv),
        ExportKind::Ranks => Ok(ranks(runs)?.to_csv()),
        ExportKind::Checklist => Ok(emit_checklist(runs, meta).render()),
    }
}

/// Writes `kind` for the run in `dir` to `dir/exports/` and returns the
/// path written.
pub fn export(dir: &Path, kind: ExportKind, meta: &ChecklistMeta) -> Result<PathBuf, ExportError> {
    let run = load_run(dir)?;
    let text = render(kind, std::slice::from_ref(&run), meta)?;
    let out_dir = dir.join(EXPORT_DIR);
    let path = out_dir.join(kind.file_name());
    std::fs::create_dir_all(&out_dir)
        .and_then(|_| std::fs::write(&path, text))
        .map_err(|source| ExportError::Io { path: path.clone(), source })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::journal::Journal;
    use crate::protocol::test_header;

    #[test]
    fn empty_run_gives_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        Journal::create(&dir.path().join(JOURNAL_FILE), test_header()).unwrap();
        let path = export(dir.path(), ExportKind::Trials, &ChecklistMeta::default()).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "seq,x0,x1,budget,seed,cost,status,wall_time,rep,phase,group\n");
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!("sweepz".parse::<ExportKind>(), Err(ExportError::UnknownKind(_))));
    }
}
