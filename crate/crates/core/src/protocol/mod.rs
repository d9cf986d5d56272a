//! The evaluation protocol: tune on one set of seeds, test the incumbent on
//! a disjoint set, repeat with independent optimizer streams.

pub mod checklist;
pub mod rank;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dehb::{planned_spend, plan_iterations, run_dehb, DehbSettings};
use crate::journal::{Journal, JournalHeader, Phase, Record, RecordBody, RepetitionSummary, FORMAT_VERSION, TOOL_VERSION};
use crate::objectives::{Objective, ObjectiveSpec, Orientation};
use crate::pbt::{evaluate_schedule, run_pbt, PbtSettings, Schedule};
use crate::rs::run_rs;
use crate::runner::{EvalRequest, Incumbent, RunError, Runner};
use crate::seeding::rng_from;
use crate::space::{ConfigSpace, Configuration};
use crate::stats;

pub use checklist::{emit_checklist, Answer, ChecklistMeta, ChecklistReport};
pub use rank::{rank_methods, RankError, RankTable, ScoreRow, ScoreTable};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("the {0} seed list is empty")]
    Empty(&'static str),
    #[error("seed {0} is listed twice")]
    Duplicate(u64),
    #[error("seed {0} is both a tuning and a test seed")]
    Overlap(u64),
}

/// Disjoint tuning and test seeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub tuning: Vec<u64>,
    pub test: Vec<u64>,
}

impl SeedPlan {
    pub fn new(tuning: Vec<u64>, test: Vec<u64>) -> Result<Self, PlanError> {
        let plan = Self { tuning, test };
        plan.check()?;
        Ok(plan)
    }

    pub fn check(&self) -> Result<(), PlanError> {
        if self.tuning.is_empty() {
            return Err(PlanError::Empty("tuning"));
        }
        if self.test.is_empty() {
            return Err(PlanError::Empty("test"));
        }
        for list in [&self.tuning, &self.test] {
            for (i, s) in list.iter().enumerate() {
                if list[..i].contains(s) {
                    return Err(PlanError::Duplicate(*s));
                }
            }
        }
        if let Some(s) = self.tuning.iter().find(|s| self.test.contains(s)) {
            return Err(PlanError::Overlap(*s));
        }
        Ok(())
    }
}

impl Default for SeedPlan {
    /// Tuning seeds 0-4, test seeds 5-14.
    fn default() -> Self {
        Self { tuning: (0..5).collect(), test: (5..15).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodSpec {
    RandomSearch {
        /// Defaults to the budget in full runs.
        #[serde(default)]
        n_configs: Option<usize>,
    },
    Dehb(DehbSettings),
    Pbt(PbtSettings),
}

impl MethodSpec {
    pub fn label(&self) -> &'static str {
        match self {
            MethodSpec::RandomSearch { .. } => "rs",
            MethodSpec::Dehb(_) => "dehb",
            MethodSpec::Pbt(p) => p.label(),
        }
    }

    /// Name of the underlying optimization method.
    pub fn description(&self) -> String {
        match self {
            MethodSpec::RandomSearch { .. } => "random search".into(),
            MethodSpec::Dehb(d) => format!("DEHB (differential evolution + HyperBand, eta {})", d.eta),
            MethodSpec::Pbt(p) => match p.label() {
                "pbt" => "population-based training (random perturbation)".into(),
                "pb2" => "population-based bandits (GP-UCB explore)".into(),
                _ => format!(
                    "population-based bandits (GP-UCB explore) with {} warmstart runs{}",
                    p.warmstart_runs,
                    if p.restart_patience.is_some() { " and kernel restarts" } else { "" }
                ),
            },
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Everything that defines a protocol run; stored in the journal header.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub method: MethodSpec,
    pub space: ConfigSpace,
    pub objective: ObjectiveSpec,
    pub seed_plan: SeedPlan,
    pub repetitions: usize,
    /// Tuning budget per repetition in full-run equivalents.
    pub budget_runs: usize,
    pub rng_seed: u64,
    pub hardware: Option<String>,
}

impl ProtocolConfig {
    pub fn new(method: MethodSpec, space: ConfigSpace, objective: ObjectiveSpec) -> Self {
        Self {
            method,
            space,
            objective,
            seed_plan: SeedPlan::default(),
            repetitions: 3,
            budget_runs: 16,
            rng_seed: 0,
            hardware: None,
        }
    }

    pub fn header(&self) -> JournalHeader {
        let rungs = match &self.method {
            MethodSpec::Dehb(d) => d.ladder().ok().map(|l| l.rungs().to_vec()),
            _ => None,
        };
        JournalHeader {
            format_version: FORMAT_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            method: self.method.clone(),
            space: self.space.clone(),
            space_digest: self.space.digest(),
            objective: self.objective.clone(),
            seed_plan: self.seed_plan.clone(),
            budget_runs: self.budget_runs,
            repetitions: self.repetitions,
            rng_seed: self.rng_seed,
            orientation: Orientation::LowerIsBetter,
            rungs,
            hardware: self.hardware.clone(),
        }
    }

    pub fn from_header(header: &JournalHeader) -> Self {
        Self {
            method: header.method.clone(),
            space: header.space.clone(),
            objective: header.objective.clone(),
            seed_plan: header.seed_plan.clone(),
            repetitions: header.repetitions,
            budget_runs: header.budget_runs,
            rng_seed: header.rng_seed,
            hardware: header.hardware.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.seed_plan.check().map_err(|e| RunError::Invalid(e.to_string()))?;
        if self.repetitions == 0 {
            return Err(RunError::Invalid("at least one repetition is required".into()));
        }
        if self.budget_runs == 0 {
            return Err(RunError::Invalid("the budget must be at least one full run".into()));
        }
        let budget = self.budget_runs as f64;
        match &self.method {
            MethodSpec::RandomSearch { n_configs: Some(n) } if *n > self.budget_runs => Err(RunError::Invalid(
                format!("{n} random-search configurations exceed the budget of {budget} runs"),
            )),
            MethodSpec::Dehb(d) => {
                let ladder = d.ladder().map_err(|e| RunError::Invalid(e.to_string()))?;
                let k = d.iterations.unwrap_or_else(|| plan_iterations(&ladder, budget));
                if k == 0 || planned_spend(&ladder, k) > budget + 1e-9 {
                    return Err(RunError::Invalid(format!(
                        "DEHB plan does not fit a budget of {budget} runs"
                    )));
                }
                Ok(())
            }
            MethodSpec::Pbt(p) => {
                let total = p.population_size(self.budget_runs) + p.warmstart_runs;
                if total > self.budget_runs {
                    return Err(RunError::Invalid(format!(
                        "population plus warmstart runs ({total}) exceed the budget of {budget} runs"
                    )));
                }
                if p.population_size(self.budget_runs) < 2 {
                    return Err(RunError::Invalid("PBT needs a population of at least 2".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: usize,
    /// Stop after this many new trials (crash simulation).
    pub interrupt_after: Option<u64>,
    pub work_dir: Option<PathBuf>,
}

/// Test results of the incumbents of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct IncumbentReport {
    pub method: String,
    pub objective: String,
    pub repetitions: Vec<RepetitionSummary>,
    /// Mean over surviving repetitions of the per-repetition test mean.
    pub mean: Option<f64>,
    /// Population std of the per-repetition test means.
    pub std: Option<f64>,
    pub failed_repetitions: usize,
}

impl IncumbentReport {
    pub fn from_summaries(method: &str, objective: &str, summaries: &[RepetitionSummary]) -> Self {
        let means: Vec<f64> = summaries
            .iter()
            .filter(|s| s.failure.is_none() && !s.test_costs.is_empty())
            .map(|s| stats::mean(&s.test_costs))
            .collect();
        let failed = summaries.len() - means.len();
        let (mean, std) = if means.is_empty() {
            (None, None)
        } else {
            (Some(stats::mean(&means)), Some(stats::std_dev(&means)))
        };
        Self {
            method: method.to_string(),
            objective: objective.to_string(),
            repetitions: summaries.to_vec(),
            mean,
            std,
            failed_repetitions: failed,
        }
    }

    /// Set when some repetition failed and the aggregate covers fewer runs.
    pub fn warning(&self) -> bool {
        self.failed_repetitions > 0
    }

    /// Per-repetition `(mean, std)` over test seeds.
    pub fn test_stats(&self) -> Vec<Option<(f64, f64)>> {
        self.repetitions
            .iter()
            .map(|s| {
                (s.failure.is_none() && !s.test_costs.is_empty())
                    .then(|| (stats::mean(&s.test_costs), stats::std_dev(&s.test_costs)))
            })
            .collect()
    }
}

struct Tuned {
    incumbent: Incumbent,
    schedule: Option<Schedule>,
}

fn tune(runner: &mut Runner, cfg: &ProtocolConfig, rep: usize) -> Result<Tuned, RunError> {
    let mut rng = rng_from(&[cfg.rng_seed, rep as u64]);
    let seeds = &cfg.seed_plan.tuning;
    match &cfg.method {
        MethodSpec::RandomSearch { n_configs } => {
            let run = run_rs(runner, n_configs.unwrap_or(cfg.budget_runs), seeds, &mut rng)?;
            Ok(Tuned { incumbent: run.incumbent, schedule: None })
        }
        MethodSpec::Dehb(settings) => {
            let run = run_dehb(runner, settings, cfg.budget_runs as f64, seeds, &mut rng)?;
            Ok(Tuned { incumbent: run.incumbent, schedule: None })
        }
        MethodSpec::Pbt(settings) => {
            let population = settings.population_size(cfg.budget_runs);
            let run = run_pbt(runner, settings, population, seeds, &mut rng)?;
            Ok(Tuned { incumbent: run.incumbent, schedule: Some(run.schedule) })
        }
    }
}

/// Whether a repetition-level error is recorded as a failed repetition
/// rather than aborting the run.
fn repetition_failure(err: &RunError) -> bool {
    matches!(err, RunError::NoIncumbent)
}

/// Runs (or resumes) the protocol. `previous` are the records already in
/// `journal` after its header; they are replayed before anything new runs.
pub fn run_protocol(
    cfg: &ProtocolConfig,
    journal: Journal,
    previous: Vec<Record>,
    options: &RunOptions,
) -> Result<(IncumbentReport, Journal), RunError> {
    cfg.validate()?;
    let objective = Objective::new(cfg.objective.clone(), cfg.space.clone())?;
    journal.check_space(&cfg.space)?;
    let mut runner = Runner::resuming(objective, journal, previous);
    runner.set_workers(options.workers.max(1));
    runner.set_interrupt_after(options.interrupt_after);
    if let Some(dir) = &options.work_dir {
        runner.set_work_dir(dir.clone());
    }

    let mut summaries = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        runner.set_context(rep, Phase::Tuning);
        let summary = match tune(&mut runner, cfg, rep) {
            Ok(tuned) => {
                runner.record(RecordBody::Incumbent {
                    rep,
                    config: tuned.incumbent.config.clone(),
                    cost: tuned.incumbent.cost,
                })?;
                runner.set_context(rep, Phase::Test);
                let tested = match &tuned.schedule {
                    Some(s) => evaluate_schedule(&mut runner, s, &cfg.seed_plan.test)?,
                    None => {
                        let req = EvalRequest::fresh(tuned.incumbent.config.clone(), 1.0);
                        runner.evaluate(&[req], &cfg.seed_plan.test)?.remove(0)
                    }
                };
                let failure = tested.failed.then(|| "incumbent failed on a test seed".to_string());
                RepetitionSummary {
                    rep,
                    incumbent: Some(tuned.incumbent.config),
                    tuning_cost: Some(tuned.incumbent.cost),
                    test_costs: tested.per_seed.iter().flatten().copied().collect(),
                    spend: runner.spend(rep, Phase::Tuning),
                    warmstart_spend: runner.spend(rep, Phase::Warmstart),
                    schedule: tuned.schedule,
                    failure,
                }
            }
            Err(e) if repetition_failure(&e) => {
                log::warn!("repetition {rep} failed: {e}");
                RepetitionSummary {
                    rep,
                    incumbent: None,
                    tuning_cost: None,
                    test_costs: Vec::new(),
                    spend: runner.spend(rep, Phase::Tuning),
                    warmstart_spend: runner.spend(rep, Phase::Warmstart),
                    schedule: None,
                    failure: Some(e.to_string()),
                }
            }
            Err(e) => return Err(e),
        };
        runner.record(RecordBody::Repetition(summary.clone()))?;
        summaries.push(summary);
    }
    runner.record(RecordBody::Complete)?;
    runner.finish()?;
    let report = IncumbentReport::from_summaries(cfg.method.label(), cfg.objective.name(), &summaries);
    Ok((report, runner.into_journal()))
}

/// Runs the protocol with an in-memory journal.
pub fn run_in_memory(cfg: &ProtocolConfig, options: &RunOptions) -> Result<(IncumbentReport, Journal), RunError> {
    run_protocol(cfg, Journal::in_memory(cfg.header()), Vec::new(), options)
}

/// Incumbent configurations per repetition, as recorded.
pub fn incumbents(records: &[Record]) -> Vec<(usize, Configuration, f64)> {
    records
        .iter()
        .filter_map(|r| match &r.body {
            RecordBody::Incumbent { rep, config, cost } => Some((*rep, config.clone(), *cost)),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
pub fn test_header() -> JournalHeader {
    let spec = ObjectiveSpec::NoisySphere { noise: 0.0, shift: 0.0 };
    ProtocolConfig::new(MethodSpec::RandomSearch { n_configs: None }, spec.default_space(2), spec).header()
}
