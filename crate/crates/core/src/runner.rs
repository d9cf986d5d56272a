//! Trial execution shared by every optimizer.
//!
//! Optimizers submit batches of multi-seed evaluation requests to a
//! [`Runner`]. The runner is the single writer of the journal: per-seed
//! results are appended in request order no matter how many workers
//! computed them. When a run is resumed, the runner first serves requests
//! from the journal's existing records (checking that the optimizer asks
//! for exactly what was recorded) and only evaluates once the recorded
//! prefix is exhausted. Optimizers are deterministic given their rng seed,
//! so a resumed run continues exactly where the interrupted one stopped.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::journal::{Journal, JournalError, Phase, Record, RecordBody, TrialRecord};
use crate::objectives::{
    check_seeds, CheckpointHandle, EvalContext, EvalError, Evaluation, Objective, TrialStatus,
};
use crate::space::{Configuration, SpaceError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("run interrupted after {fresh_trials} new trials")]
    Interrupted { fresh_trials: u64 },
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("replay diverged from the journal at sequence {seq}: {message}")]
    Divergence { seq: u64, message: String },
    #[error("missing checkpoint payload `{0}`")]
    MissingCheckpoint(String),
    #[error("no incumbent: every evaluation failed")]
    NoIncumbent,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("invalid settings: {0}")]
    Invalid(String),
}

/// Best configuration found by an optimizer, with its tuning cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Incumbent {
    pub config: Configuration,
    pub cost: f64,
}

impl Incumbent {
    /// Replaces the incumbent only on strict improvement, so ties keep the
    /// earlier candidate.
    pub fn offer(current: &mut Option<Incumbent>, config: &Configuration, cost: f64) {
        if !cost.is_finite() {
            return;
        }
        if current.as_ref().is_none_or(|inc| cost < inc.cost) {
            *current = Some(Incumbent { config: config.clone(), cost });
        }
    }
}

/// One configuration to evaluate on every seed of a batch.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub config: Configuration,
    pub budget: f64,
    /// Per-seed checkpoints to continue from, in seed order.
    pub resume: Option<Vec<CheckpointHandle>>,
    pub member: Option<usize>,
    /// Persist the produced checkpoints so later requests can resume.
    pub keep_checkpoints: bool,
}

impl EvalRequest {
    pub fn fresh(config: Configuration, budget: f64) -> Self {
        Self { config, budget, resume: None, member: None, keep_checkpoints: false }
    }
}

/// Outcome of one multi-seed evaluation.
#[derive(Debug, Clone)]
pub struct GroupResult {
    pub group: u64,
    /// Mean over seeds, or `+inf` if any seed failed.
    pub cost: f64,
    pub per_seed: Vec<Option<f64>>,
    pub checkpoints: Vec<Option<CheckpointHandle>>,
    pub failed: bool,
}

#[derive(Debug)]
pub enum CheckpointStore {
    Memory(HashMap<String, Arc<Vec<u8>>>),
    Dir(PathBuf),
}

impl CheckpointStore {
    fn put(&mut self, handle: &CheckpointHandle) -> Result<String, RunError> {
        let name = handle.file_name();
        match self {
            CheckpointStore::Memory(map) => {
                map.insert(name.clone(), handle.payload.clone());
            }
            CheckpointStore::Dir(dir) => {
                std::fs::create_dir_all(&*dir)
                    .and_then(|_| std::fs::write(dir.join(&name), handle.payload.as_slice()))
                    .map_err(|e| {
                        RunError::Journal(JournalError::Io { path: dir.join(&name), source: e })
                    })?;
            }
        }
        Ok(name)
    }

    fn get(&self, name: &str) -> Result<Arc<Vec<u8>>, RunError> {
        match self {
            CheckpointStore::Memory(map) => map
                .get(name)
                .cloned()
                .ok_or_else(|| RunError::MissingCheckpoint(name.to_string())),
            CheckpointStore::Dir(dir) => std::fs::read(dir.join(name))
                .map(Arc::new)
                .map_err(|_| RunError::MissingCheckpoint(name.to_string())),
        }
    }
}

struct Job {
    request: usize,
    trial_id: u64,
    group: u64,
    seed: u64,
    resume: Option<CheckpointHandle>,
}

struct Outcome {
    cost: Option<f64>,
    checkpoint: Option<CheckpointHandle>,
}

pub struct Runner {
    objective: Objective,
    journal: Journal,
    replay: VecDeque<Record>,
    store: CheckpointStore,
    pool: Option<rayon::ThreadPool>,
    interrupt_after: Option<u64>,
    fresh_trials: u64,
    replayed_trials: u64,
    next_trial: u64,
    next_group: u64,
    rep: usize,
    phase: Phase,
    spend: BTreeMap<(usize, u8), f64>,
    work_dir: Option<PathBuf>,
}

fn phase_key(phase: Phase) -> u8 {
    match phase {
        Phase::Tuning => 0,
        Phase::Warmstart => 1,
        Phase::Test => 2,
    }
}

impl Runner {
    /// Runner with an in-memory journal and checkpoint store.
    pub fn in_memory(objective: Objective) -> Self {
        Self::with_journal(objective, Journal::scratch())
    }

    /// Runner writing to `journal`. Checkpoints go next to a file journal
    /// (under `checkpoints/`) or stay in memory.
    pub fn with_journal(objective: Objective, journal: Journal) -> Self {
        let store = match journal.path().and_then(Path::parent) {
            Some(dir) => CheckpointStore::Dir(dir.join("checkpoints")),
            None => CheckpointStore::Memory(HashMap::new()),
        };
        let work_dir = journal.path().and_then(Path::parent).map(|d| d.join("work"));
        Self {
            objective,
            journal,
            replay: VecDeque::new(),
            store,
            pool: None,
            interrupt_after: None,
            fresh_trials: 0,
            replayed_trials: 0,
            next_trial: 0,
            next_group: 0,
            rep: 0,
            phase: Phase::Tuning,
            spend: BTreeMap::new(),
            work_dir,
        }
    }

    /// Runner that first replays `previous` (records after the header, as
    /// read back from `journal`).
    pub fn resuming(objective: Objective, journal: Journal, previous: Vec<Record>) -> Self {
        let mut runner = Self::with_journal(objective, journal);
        runner.replay = previous.into();
        runner
    }

    /// Uses `workers` threads for evaluations; 1 evaluates inline.
    pub fn set_workers(&mut self, workers: usize) {
        self.pool = if workers > 1 {
            rayon::ThreadPoolBuilder::new().num_threads(workers).build().ok()
        } else {
            None
        };
    }

    /// Stops with [`RunError::Interrupted`] once `limit` new trials have run.
    pub fn set_interrupt_after(&mut self, limit: Option<u64>) {
        self.interrupt_after = limit;
    }

    pub fn set_work_dir(&mut self, dir: PathBuf) {
        self.work_dir = Some(dir);
    }

    pub fn set_context(&mut self, rep: usize, phase: Phase) {
        self.rep = rep;
        self.phase = phase;
    }

    pub fn rep(&self) -> usize {
        self.rep
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn into_journal(self) -> Journal {
        self.journal
    }

    pub fn fresh_trials(&self) -> u64 {
        self.fresh_trials
    }

    pub fn replayed_trials(&self) -> u64 {
        self.replayed_trials
    }

    /// Records still waiting to be replayed.
    pub fn pending_replay(&self) -> usize {
        self.replay.len()
    }

    /// Full-run equivalents spent in `phase` of repetition `rep`.
    pub fn spend(&self, rep: usize, phase: Phase) -> f64 {
        self.spend.get(&(rep, phase_key(phase))).copied().unwrap_or(0.0)
    }

    fn add_spend(&mut self, trial: &TrialRecord) {
        *self.spend.entry((trial.rep, phase_key(trial.phase))).or_insert(0.0) += trial.spend();
    }

    /// Appends `body`, or checks it against the journal while replaying.
    pub fn record(&mut self, body: RecordBody) -> Result<(), RunError> {
        if let Some(expected) = self.replay.pop_front() {
            if !expected.body.replays_as(&body) {
                return Err(RunError::Divergence {
                    seq: expected.seq,
                    message: format!("journal has {:?}, run produced {:?}", expected.body, body),
                });
            }
            return Ok(());
        }
        self.journal.append(body)?;
        Ok(())
    }

    /// Fails if the journal holds records the run never reproduced.
    pub fn finish(&self) -> Result<(), RunError> {
        match self.replay.front() {
            Some(rec) => Err(RunError::Divergence {
                seq: rec.seq,
                message: "journal continues past the end of the run".into(),
            }),
            None => Ok(()),
        }
    }

    /// Evaluates every request on every seed and returns one result per
    /// request.
    pub fn evaluate(&mut self, requests: &[EvalRequest], seeds: &[u64]) -> Result<Vec<GroupResult>, RunError> {
        check_seeds(seeds)?;
        let mut jobs = Vec::with_capacity(requests.len() * seeds.len());
        for (ri, req) in requests.iter().enumerate() {
            if let Some(r) = &req.resume {
                if r.len() != seeds.len() {
                    return Err(RunError::Invalid(format!(
                        "{} resume checkpoints for {} seeds",
                        r.len(),
                        seeds.len()
                    )));
                }
            }
            let group = self.next_group;
            self.next_group += 1;
            for (si, &seed) in seeds.iter().enumerate() {
                jobs.push(Job {
                    request: ri,
                    trial_id: self.next_trial,
                    group,
                    seed,
                    resume: req.resume.as_ref().map(|r| r[si].clone()),
                });
                self.next_trial += 1;
            }
        }

        let mut outcomes: Vec<Outcome> = Vec::with_capacity(jobs.len());
        while outcomes.len() < jobs.len() && !self.replay.is_empty() {
            let job = &jobs[outcomes.len()];
            let outcome = self.replay_job(job, &requests[job.request], seeds.len())?;
            outcomes.push(outcome);
        }

        let start = outcomes.len();
        let allowed = match self.interrupt_after {
            Some(limit) => limit.saturating_sub(self.fresh_trials) as usize,
            None => usize::MAX,
        };
        let end = jobs.len().min(start.saturating_add(allowed));
        let results = self.run_jobs(&jobs[start..end], requests);
        for (job, (result, wall_time)) in jobs[start..end].iter().zip(results) {
            let outcome = self.commit(job, &requests[job.request], seeds.len(), result, wall_time)?;
            outcomes.push(outcome);
        }
        if outcomes.len() < jobs.len() {
            return Err(RunError::Interrupted { fresh_trials: self.fresh_trials });
        }

        let mut groups = Vec::with_capacity(requests.len());
        let mut iter = outcomes.into_iter();
        for (ri, _) in requests.iter().enumerate() {
            let chunk: Vec<Outcome> = iter.by_ref().take(seeds.len()).collect();
            let per_seed: Vec<Option<f64>> = chunk.iter().map(|o| o.cost).collect();
            let failed = per_seed.iter().any(Option::is_none);
            let cost = if failed {
                f64::INFINITY
            } else {
                let costs: Vec<f64> = per_seed.iter().map(|c| c.expect("checked")).collect();
                crate::stats::mean(&costs)
            };
            groups.push(GroupResult {
                group: jobs[ri * seeds.len()].group,
                cost,
                per_seed,
                checkpoints: chunk.into_iter().map(|o| o.checkpoint).collect(),
                failed,
            });
        }
        Ok(groups)
    }

    fn trial_record(&self, job: &Job, req: &EvalRequest, group_size: usize) -> TrialRecord {
        TrialRecord {
            trial_id: job.trial_id,
            rep: self.rep,
            phase: self.phase,
            group: job.group,
            group_size,
            member: req.member,
            config: req.config.clone(),
            budget: req.budget,
            trained_from: job.resume.as_ref().map_or(0.0, |c| c.trained_fraction),
            seed: job.seed,
            status: TrialStatus::Pending,
            cost: None,
            wall_time: 0.0,
            checkpoint: None,
            error: None,
        }
    }

    fn replay_job(&mut self, job: &Job, req: &EvalRequest, group_size: usize) -> Result<Outcome, RunError> {
        let rec = self.replay.pop_front().expect("caller checked");
        let RecordBody::Trial(recorded) = &rec.body else {
            return Err(RunError::Divergence {
                seq: rec.seq,
                message: format!("journal has {:?}, run requested a trial", rec.body),
            });
        };
        let mut expected = self.trial_record(job, req, group_size);
        expected.status = recorded.status;
        expected.cost = recorded.cost;
        expected.wall_time = recorded.wall_time;
        expected.checkpoint = recorded.checkpoint.clone();
        expected.error = recorded.error.clone();
        if &expected != recorded {
            return Err(RunError::Divergence {
                seq: rec.seq,
                message: format!("journal has trial {recorded:?}, run requested {expected:?}"),
            });
        }
        let checkpoint = match &recorded.checkpoint {
            Some(name) => Some(CheckpointHandle {
                trial_id: job.trial_id,
                trained_fraction: req.budget,
                payload: self.store.get(name)?,
            }),
            None => None,
        };
        self.add_spend(recorded);
        self.replayed_trials += 1;
        Ok(Outcome { cost: recorded.cost.filter(|_| recorded.status == TrialStatus::Done), checkpoint })
    }

    fn run_jobs(&self, jobs: &[Job], requests: &[EvalRequest]) -> Vec<(Result<Evaluation, EvalError>, f64)> {
        let run = |job: &Job| {
            let req = &requests[job.request];
            let ctx = EvalContext { trial_id: job.trial_id, work_dir: self.work_dir.clone() };
            let started = Instant::now();
            let result = self.objective.evaluate(&req.config, req.budget, job.seed, job.resume.as_ref(), &ctx);
            (result, started.elapsed().as_secs_f64())
        };
        match &self.pool {
            Some(pool) if jobs.len() > 1 => pool.install(|| jobs.par_iter().map(run).collect()),
            _ => jobs.iter().map(run).collect(),
        }
    }

    fn commit(
        &mut self,
        job: &Job,
        req: &EvalRequest,
        group_size: usize,
        result: Result<Evaluation, EvalError>,
        wall_time: f64,
    ) -> Result<Outcome, RunError> {
        let mut record = self.trial_record(job, req, group_size);
        record.wall_time = wall_time;
        let outcome = match result {
            Ok(eval) => {
                record.status = TrialStatus::Done;
                record.cost = Some(eval.cost);
                if req.keep_checkpoints {
                    record.checkpoint = Some(self.store.put(&eval.checkpoint)?);
                }
                Outcome { cost: Some(eval.cost), checkpoint: Some(eval.checkpoint) }
            }
            Err(EvalError::Failed { message, output }) => {
                record.status = TrialStatus::Failed;
                let tail: String = output.chars().rev().take(2000).collect::<Vec<_>>().into_iter().rev().collect();
                record.error = Some(if tail.is_empty() { message } else { format!("{message}: {tail}") });
                Outcome { cost: None, checkpoint: None }
            }
            Err(EvalError::Checkpoint(message)) => {
                record.status = TrialStatus::Failed;
                record.error = Some(message);
                Outcome { cost: None, checkpoint: None }
            }
            Err(other) => return Err(other.into()),
        };
        self.add_spend(&record);
        self.journal.append(RecordBody::Trial(record))?;
        self.fresh_trials += 1;
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ObjectiveSpec;

    fn objective() -> Objective {
        let spec = ObjectiveSpec::NoisySphere { noise: 0.0, shift: 0.0 };
        Objective::new(spec.clone(), spec.default_space(2)).unwrap()
    }

    fn config(obj: &Objective, z: &[f64]) -> Configuration {
        obj.space().from_unit(z).unwrap()
    }

    #[test]
    fn groups_average_over_seeds() {
        let obj = objective();
        let mut runner = Runner::in_memory(obj.clone());
        let req = EvalRequest::fresh(config(&obj, &[0.75, 0.25]), 1.0);
        let out = runner.evaluate(&[req], &[0, 1, 2]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].cost, 0.125);
        assert_eq!(out[0].per_seed, vec![Some(0.125); 3]);
        assert_eq!(runner.journal().records().len(), 3);
        assert!((runner.spend(0, Phase::Tuning) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interruption_keeps_completed_prefix() {
        let obj = objective();
        let mut runner = Runner::in_memory(obj.clone());
        runner.set_interrupt_after(Some(4));
        let reqs: Vec<_> = (0..3).map(|i| EvalRequest::fresh(config(&obj, &[0.1 * i as f64, 0.5]), 1.0)).collect();
        let err = runner.evaluate(&reqs, &[0, 1]).unwrap_err();
        assert!(matches!(err, RunError::Interrupted { fresh_trials: 4 }));
        assert_eq!(runner.journal().records().len(), 4);
    }

    #[test]
    fn replay_serves_recorded_trials_then_continues() {
        let obj = objective();
        let reqs: Vec<_> = (0..3).map(|i| EvalRequest::fresh(config(&obj, &[0.1 * i as f64, 0.5]), 0.5)).collect();
        let mut first = Runner::in_memory(obj.clone());
        first.set_interrupt_after(Some(3));
        assert!(first.evaluate(&reqs, &[0, 1]).is_err());
        let previous = first.journal().records().to_vec();

        let mut second = Runner::resuming(obj.clone(), Journal::scratch(), previous);
        let out = second.evaluate(&reqs, &[0, 1]).unwrap();
        assert_eq!(second.replayed_trials(), 3);
        assert_eq!(second.fresh_trials(), 3);
        let mut straight = Runner::in_memory(obj);
        let expected = straight.evaluate(&reqs, &[0, 1]).unwrap();
        for (a, b) in out.iter().zip(&expected) {
            assert_eq!(a.cost, b.cost);
        }
    }

    #[test]
    fn replay_detects_divergence() {
        let obj = objective();
        let mut first = Runner::in_memory(obj.clone());
        first.evaluate(&[EvalRequest::fresh(config(&obj, &[0.2, 0.2]), 1.0)], &[0]).unwrap();
        let previous = first.journal().records().to_vec();
        let mut second = Runner::resuming(obj.clone(), Journal::scratch(), previous);
        let err = second
            .evaluate(&[EvalRequest::fresh(config(&obj, &[0.3, 0.2]), 1.0)], &[0])
            .unwrap_err();
        assert!(matches!(err, RunError::Divergence { seq: 1, .. }));
    }

    #[test]
    fn parallel_workers_match_serial_results() {
        let spec = ObjectiveSpec::NoisySphere { noise: 0.1, shift: 0.2 };
        let obj = Objective::new(spec.clone(), spec.default_space(3)).unwrap();
        let reqs: Vec<_> = (0..20)
            .map(|i| EvalRequest::fresh(config(&obj, &[0.05 * i as f64, 0.3, 0.9]), 0.5))
            .collect();
        let mut serial = Runner::in_memory(obj.clone());
        let mut parallel = Runner::in_memory(obj);
        parallel.set_workers(4);
        let a = serial.evaluate(&reqs, &[0, 1, 2]).unwrap();
        let b = parallel.evaluate(&reqs, &[0, 1, 2]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.cost.to_bits(), y.cost.to_bits());
        }
        for (x, y) in serial.journal().records().iter().zip(parallel.journal().records()) {
            assert!(x.body.replays_as(&y.body));
        }
    }

    #[test]
    fn failed_seed_fails_the_group() {
        let spec = ObjectiveSpec::ExternalCommand {
            command: "if [ \"$AUTOTUNE_SEED\" = 1 ]; then exit 1; fi; echo cost=2".into(),
        };
        let space: crate::space::ConfigSpace = "x: (0, 1)".parse().unwrap();
        let obj = Objective::new(spec, space.clone()).unwrap();
        let mut runner = Runner::in_memory(obj);
        let cfg = space.from_unit(&[0.5]).unwrap();
        let out = runner.evaluate(&[EvalRequest::fresh(cfg, 1.0)], &[0, 1]).unwrap();
        assert!(out[0].failed);
        assert_eq!(out[0].cost, f64::INFINITY);
        assert_eq!(out[0].per_seed, vec![Some(2.0), None]);
        let failed = runner
            .journal()
            .records()
            .iter()
            .filter(|r| matches!(&r.body, RecordBody::Trial(t) if t.status == TrialStatus::Failed))
            .count();
        assert_eq!(failed, 1);
    }
}
