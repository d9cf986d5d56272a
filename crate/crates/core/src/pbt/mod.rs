//! Population-based training with synchronized intervals.
//!
//! Every member trains for `1 / intervals` of a full run per round,
//! continuing from its own checkpoints. After each round but the last, the
//! worst quantile copies configuration and checkpoints from the best
//! quantile and then explores: a random perturbation (PBT) or a
//! GP-bandit suggestion (PB2). Optional warmstart runs preload the GP and
//! seed the initial population; optional kernel restarts drop the GP
//! history when the best interval cost stagnates.

pub mod gp;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::journal::{Phase, RecordBody};
use crate::objectives::CheckpointHandle;
use crate::runner::{EvalRequest, GroupResult, Incumbent, RunError, Runner};
use crate::space::{Configuration, PerturbSettings};

use gp::{gp_fit, gp_suggest, GpPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExploreMode {
    Perturb,
    Gp,
}

/// What the GP models. Both are lower-is-better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpTarget {
    /// Cost after the interval minus cost before it.
    CostChange,
    Cost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PbtSettings {
    /// Defaults to the budget minus the warmstart runs.
    #[serde(default)]
    pub population: Option<usize>,
    pub intervals: usize,
    pub quantile: f64,
    pub explore: ExploreMode,
    /// Chance that a replaced member explores at all.
    pub explore_prob: f64,
    pub warmstart_runs: usize,
    /// Intervals without improvement before the GP history is dropped;
    /// `None` disables restarts.
    #[serde(default)]
    pub restart_patience: Option<usize>,
    pub kappa: f64,
    pub perturb: PerturbSettings,
    pub gp_target: GpTarget,
}

impl Default for PbtSettings {
    fn default() -> Self {
        Self {
            population: None,
            intervals: 20,
            quantile: 0.125,
            explore: ExploreMode::Perturb,
            explore_prob: 1.0,
            warmstart_runs: 0,
            restart_patience: None,
            kappa: 1.0,
            perturb: PerturbSettings::default(),
            gp_target: GpTarget::CostChange,
        }
    }
}

impl PbtSettings {
    pub fn population_size(&self, budget_runs: usize) -> usize {
        self.population
            .unwrap_or_else(|| budget_runs.saturating_sub(self.warmstart_runs))
    }

    /// Short method label: `pbt`, `pb2`, or `bgt` for PB2 with warmstart
    /// runs or kernel restarts.
    pub fn label(&self) -> &'static str {
        match self.explore {
            ExploreMode::Perturb => "pbt",
            ExploreMode::Gp if self.warmstart_runs > 0 || self.restart_patience.is_some() => "bgt",
            ExploreMode::Gp => "pb2",
        }
    }

    fn check(&self, population: usize) -> Result<(), RunError> {
        if population < 2 {
            return Err(RunError::Invalid("PBT needs a population of at least 2".into()));
        }
        if self.intervals == 0 {
            return Err(RunError::Invalid("PBT needs at least one interval".into()));
        }
        if !(self.quantile > 0.0 && self.quantile <= 0.5) {
            return Err(RunError::Invalid("quantile must be in (0, 0.5]".into()));
        }
        if !(0.0..=1.0).contains(&self.explore_prob) {
            return Err(RunError::Invalid("explore probability must be in [0, 1]".into()));
        }
        if self.restart_patience == Some(0) {
            return Err(RunError::Invalid("restart patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// A configuration change in a member's history: from `interval` on, the
/// member trains with `config`, obtained from member `source`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub interval: usize,
    pub source: usize,
    pub config: Configuration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub id: usize,
    pub config: Configuration,
    /// Per-seed checkpoints; `None` before the first interval.
    pub checkpoints: Option<Vec<CheckpointHandle>>,
    /// Cost after each completed interval.
    pub history: Vec<f64>,
    pub lineage: Vec<LineageEntry>,
    /// Cost of the state this member continues from (the winner's after an
    /// exploit).
    last_cost: Option<f64>,
}

impl Member {
    fn new(id: usize, config: Configuration) -> Self {
        Self {
            id,
            lineage: vec![LineageEntry { interval: 0, source: id, config: config.clone() }],
            config,
            checkpoints: None,
            history: Vec::new(),
            last_cost: None,
        }
    }

    pub fn payloads(&self) -> Vec<Arc<Vec<u8>>> {
        self.checkpoints
            .iter()
            .flatten()
            .map(|c| c.payload.clone())
            .collect()
    }
}

/// Time-indexed hyperparameter schedule: `config` applies from `fraction`
/// until the next breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub breakpoints: Vec<(f64, Configuration)>,
}

impl Schedule {
    pub fn constant(config: Configuration) -> Self {
        Self { breakpoints: vec![(0.0, config)] }
    }

    /// Builds the schedule of a lineage. Changes at the same fraction
    /// collapse to the last one; entries that do not change the
    /// configuration are dropped.
    pub fn from_lineage(lineage: &[LineageEntry], intervals: usize) -> Self {
        let mut breakpoints: Vec<(f64, Configuration)> = Vec::new();
        for entry in lineage {
            let fraction = entry.interval as f64 / intervals as f64;
            match breakpoints.last_mut() {
                Some((f, c)) if *f == fraction => *c = entry.config.clone(),
                Some((_, c)) if *c == entry.config => {}
                _ => breakpoints.push((fraction, entry.config.clone())),
            }
        }
        // A same-fraction overwrite can make two neighbours equal.
        breakpoints.dedup_by(|b, a| a.1 == b.1);
        Self { breakpoints }
    }

    pub fn config_at(&self, fraction: f64) -> &Configuration {
        let mut current = &self.breakpoints[0].1;
        for (f, c) in &self.breakpoints {
            if *f <= fraction {
                current = c;
            }
        }
        current
    }

    /// `(start, end, config)` per breakpoint, the last one ending at 1.
    pub fn segments(&self) -> Vec<(f64, f64, &Configuration)> {
        self.breakpoints
            .iter()
            .enumerate()
            .map(|(i, (f, c))| {
                let end = self.breakpoints.get(i + 1).map_or(1.0, |b| b.0);
                (*f, end, c)
            })
            .collect()
    }
}

/// Pairs the worst `floor(q * n)` members with the best ones, as
/// `(loser, winner)`; rank `i` loser copies rank `i` winner. Equal costs
/// rank by member index.
pub fn exploit(costs: &[f64], quantile: f64) -> Vec<(usize, usize)> {
    let k = (quantile * costs.len() as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    let winners = &order[..k];
    let losers = order.iter().rev().take(k);
    losers.zip(winners).map(|(l, w)| (*l, *w)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestartDecision {
    Keep,
    Restart,
}

/// `costs` holds the best cost of each interval since the last restart.
/// Restarts once the last `patience` entries fail to beat the earlier best
/// by more than 1e-6.
pub fn kernel_restart_check(costs: &[f64], patience: usize) -> RestartDecision {
    let patience = patience.max(1);
    if costs.len() <= patience {
        return RestartDecision::Keep;
    }
    let split = costs.len() - patience;
    let before = costs[..split].iter().cloned().fold(f64::INFINITY, f64::min);
    let recent = costs[split..].iter().cloned().fold(f64::INFINITY, f64::min);
    if before - recent > 1e-6 {
        RestartDecision::Keep
    } else {
        RestartDecision::Restart
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalLog {
    pub interval: usize,
    pub costs: Vec<f64>,
    pub plan: Vec<(usize, usize)>,
    pub configs_before: Vec<Configuration>,
    pub configs_after: Vec<Configuration>,
    pub payloads_before: Vec<Vec<Arc<Vec<u8>>>>,
    pub payloads_after: Vec<Vec<Arc<Vec<u8>>>>,
    pub restarted: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Warmstart {
    pub points: Vec<GpPoint>,
    /// Successful warmstart configurations, best first.
    pub ranked: Vec<(Configuration, f64)>,
    pub spend: f64,
}

#[derive(Debug, Clone)]
pub struct PbtRun {
    pub members: Vec<Member>,
    pub incumbent: Incumbent,
    pub incumbent_member: usize,
    pub schedule: Schedule,
    pub intervals: Vec<IntervalLog>,
    pub warmstart: Warmstart,
    /// Tuning spend excluding warmstart runs.
    pub spend: f64,
}

fn interval_budget(i: usize, intervals: usize) -> f64 {
    (i + 1) as f64 / intervals as f64
}

#[allow(clippy::too_many_arguments)]
fn gp_point(
    runner: &Runner,
    config: &Configuration,
    interval: usize,
    intervals: usize,
    cost: f64,
    previous: Option<f64>,
    target: GpTarget,
    warmstart: bool,
) -> Result<Option<GpPoint>, RunError> {
    if !cost.is_finite() {
        return Ok(None);
    }
    let y = match (target, previous) {
        (GpTarget::Cost, _) => cost,
        (GpTarget::CostChange, Some(p)) if p.is_finite() => cost - p,
        (GpTarget::CostChange, _) => return Ok(None),
    };
    let x = runner.objective().space().to_unit(config)?;
    Ok(Some(GpPoint { x, t: interval as f64 / intervals as f64, y, warmstart }))
}

/// Trains all members through one interval.
fn train_interval(
    runner: &mut Runner,
    members: &mut [Member],
    i: usize,
    intervals: usize,
    seeds: &[u64],
) -> Result<Vec<GroupResult>, RunError> {
    let budget = interval_budget(i, intervals);
    let requests: Vec<EvalRequest> = members
        .iter()
        .map(|m| EvalRequest {
            config: m.config.clone(),
            budget,
            resume: m.checkpoints.clone(),
            member: Some(m.id),
            keep_checkpoints: true,
        })
        .collect();
    let results = runner.evaluate(&requests, seeds)?;
    for (m, r) in members.iter_mut().zip(&results) {
        m.history.push(r.cost);
        if !r.failed {
            m.checkpoints = Some(r.checkpoints.iter().map(|c| c.clone().expect("successful trial")).collect());
        }
    }
    Ok(results)
}

/// Runs `runs` random configurations to full budget, interval by interval,
/// recording every interval as a GP point.
pub fn warmstart(
    runner: &mut Runner,
    settings: &PbtSettings,
    seeds: &[u64],
    rng: &mut ChaCha8Rng,
) -> Result<Warmstart, RunError> {
    let runs = settings.warmstart_runs;
    if runs == 0 {
        return Ok(Warmstart::default());
    }
    let rep = runner.rep();
    runner.set_context(rep, Phase::Warmstart);
    let space = runner.objective().space().clone();
    let mut members: Vec<Member> = (0..runs).map(|id| Member::new(id, space.sample(rng))).collect();
    let mut points = Vec::new();
    for i in 0..settings.intervals {
        let results = train_interval(runner, &mut members, i, settings.intervals, seeds)?;
        for (m, r) in members.iter_mut().zip(&results) {
            if let Some(p) = gp_point(runner, &m.config, i, settings.intervals, r.cost, m.last_cost, settings.gp_target, true)? {
                points.push(p);
            }
            m.last_cost = Some(r.cost);
        }
    }
    runner.set_context(rep, Phase::Tuning);
    let mut ranked: Vec<(Configuration, f64)> = members
        .into_iter()
        .filter_map(|m| m.history.last().copied().filter(|c| c.is_finite()).map(|c| (m.config, c)))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(Warmstart { points, ranked, spend: runs as f64 })
}

/// Runs the full PBT loop and reconstructs the incumbent's schedule.
pub fn run_pbt(
    runner: &mut Runner,
    settings: &PbtSettings,
    population: usize,
    seeds: &[u64],
    rng: &mut ChaCha8Rng,
) -> Result<PbtRun, RunError> {
    settings.check(population)?;
    let n_int = settings.intervals;
    let rep = runner.rep();
    let space = runner.objective().space().clone();

    let warm = warmstart(runner, settings, seeds, rng)?;
    let mut members: Vec<Member> = (0..population)
        .map(|id| {
            let config = match warm.ranked.get(id) {
                Some((c, _)) => c.clone(),
                None => space.sample(rng),
            };
            Member::new(id, config)
        })
        .collect();

    let use_gp = settings.explore == ExploreMode::Gp;
    let mut points: Vec<GpPoint> = if use_gp { warm.points.clone() } else { Vec::new() };
    let mut best_since_restart: Vec<f64> = Vec::new();
    let mut kernel_scale = 1.0;
    let mut logs = Vec::with_capacity(n_int);

    for i in 0..n_int {
        let results = train_interval(runner, &mut members, i, n_int, seeds)?;
        let costs: Vec<f64> = results.iter().map(|r| r.cost).collect();
        if use_gp {
            for (m, r) in members.iter_mut().zip(&results) {
                if let Some(p) = gp_point(runner, &m.config, i, n_int, r.cost, m.last_cost, settings.gp_target, false)? {
                    points.push(p);
                }
            }
        }
        for (m, c) in members.iter_mut().zip(&costs) {
            m.last_cost = Some(*c);
        }

        let mut restarted = false;
        if let (true, Some(patience)) = (use_gp, settings.restart_patience) {
            best_since_restart.push(costs.iter().cloned().fold(f64::INFINITY, f64::min));
            if kernel_restart_check(&best_since_restart, patience) == RestartDecision::Restart {
                points.retain(|p| p.warmstart);
                best_since_restart.clear();
                kernel_scale = rng.random_range(-0.5f64..0.5).exp();
                runner.record(RecordBody::KernelRestart { rep, interval: i })?;
                restarted = true;
            }
        }

        let configs_before: Vec<Configuration> = members.iter().map(|m| m.config.clone()).collect();
        let payloads_before: Vec<_> = members.iter().map(Member::payloads).collect();
        let plan = if i + 1 < n_int { exploit(&costs, settings.quantile) } else { Vec::new() };
        if !plan.is_empty() {
            let model = if use_gp { gp_fit(&points, kernel_scale).ok() } else { None };
            for &(loser, winner) in &plan {
                runner.record(RecordBody::Exploit { rep, interval: i, loser, winner })?;
                let source = members[winner].clone();
                let target = &mut members[loser];
                target.config = source.config.clone();
                target.checkpoints = source.checkpoints.clone();
                target.lineage = source.lineage.clone();
                target.last_cost = source.last_cost;

                let (mode, config) = if rng.random_bool(settings.explore_prob) {
                    match settings.explore {
                        ExploreMode::Perturb => ("perturb", space.perturb(&source.config, rng, &settings.perturb)?),
                        ExploreMode::Gp => {
                            match gp_suggest(model.as_ref(), (i + 1) as f64 / n_int as f64, &space, rng, settings.kappa) {
                                Ok(c) => ("gp", c),
                                Err(e) => {
                                    log::debug!("GP explore unavailable ({e}), perturbing instead");
                                    ("perturb_fallback", space.perturb(&source.config, rng, &settings.perturb)?)
                                }
                            }
                        }
                    }
                } else {
                    ("none", source.config.clone())
                };
                let target = &mut members[loser];
                target.config = config.clone();
                target.lineage.push(LineageEntry { interval: i + 1, source: winner, config: config.clone() });
                runner.record(RecordBody::Explore { rep, interval: i, member: loser, mode: mode.to_string(), config })?;
            }
        }
        logs.push(IntervalLog {
            interval: i,
            costs,
            plan,
            configs_before,
            configs_after: members.iter().map(|m| m.config.clone()).collect(),
            payloads_before,
            payloads_after: members.iter().map(Member::payloads).collect(),
            restarted,
        });
    }

    let finals: Vec<f64> = members.iter().map(|m| *m.history.last().expect("at least one interval")).collect();
    let mut best: Option<usize> = None;
    for (id, c) in finals.iter().enumerate() {
        if c.is_finite() && best.is_none_or(|b| *c < finals[b]) {
            best = Some(id);
        }
    }
    let best = best.ok_or(RunError::NoIncumbent)?;
    let schedule = Schedule::from_lineage(&members[best].lineage, n_int);
    Ok(PbtRun {
        incumbent: Incumbent { config: members[best].config.clone(), cost: finals[best] },
        incumbent_member: best,
        schedule,
        intervals: logs,
        warmstart: warm,
        spend: population as f64,
        members,
    })
}

/// Trains a schedule from scratch on `seeds`, switching configuration at
/// each breakpoint by resuming from the previous segment's checkpoints.
pub fn evaluate_schedule(runner: &mut Runner, schedule: &Schedule, seeds: &[u64]) -> Result<GroupResult, RunError> {
    let mut resume: Option<Vec<CheckpointHandle>> = None;
    let mut last = None;
    for (_, end, config) in schedule.segments() {
        let request = EvalRequest {
            config: config.clone(),
            budget: end,
            resume: resume.clone(),
            member: None,
            keep_checkpoints: true,
        };
        let result = runner.evaluate(&[request], seeds)?.remove(0);
        if result.failed {
            return Ok(result);
        }
        resume = Some(result.checkpoints.iter().map(|c| c.clone().expect("successful trial")).collect());
        last = Some(result);
    }
    Ok(last.expect("schedules have at least one breakpoint"))
}
