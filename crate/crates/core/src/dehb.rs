//! DEHB: differential evolution populations on the rungs of a budget
//! ladder, run in HyperBand-style iterations.
//!
//! Iteration 0 fills the lowest rung with uniform samples and promotes the
//! best members upwards rung by rung. Iteration `k` drops the `k` lowest
//! rungs; each remaining rung evolves its population with rand/1/bin DE,
//! drawing parents from the same rung. Every rung spends
//! about one full run: `capacity * budget` with capacities taken against
//! the maximum budget.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budgets::{BudgetLadder, LadderError};
use crate::runner::{EvalRequest, Incumbent, RunError, Runner};
use crate::space::Configuration;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DehbSettings {
    pub eta: f64,
    pub min_budget: f64,
    /// Iterations to run; `None` picks the most that fit the budget.
    #[serde(default)]
    pub iterations: Option<usize>,
    /// Mutation scale.
    pub f: f64,
    /// Crossover probability.
    pub cr: f64,
}

impl Default for DehbSettings {
    fn default() -> Self {
        Self { eta: 1.9, min_budget: 0.01, iterations: None, f: 0.5, cr: 0.5 }
    }
}

impl DehbSettings {
    pub fn ladder(&self) -> Result<BudgetLadder, LadderError> {
        BudgetLadder::new(self.min_budget, 1.0, self.eta)
    }
}

/// A member of a rung population: its unit-cube vector, the decoded
/// configuration and its cost at the rung budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub x: Vec<f64>,
    pub config: Configuration,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RungLog {
    pub rung: usize,
    pub budget: f64,
    /// Slot costs before evolution (empty when the rung was filled fresh).
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DehbIteration {
    pub index: usize,
    pub rungs: Vec<RungLog>,
    /// Full-run equivalents spent in this iteration.
    pub spend: f64,
}

impl DehbIteration {
    pub fn budgets(&self) -> Vec<f64> {
        self.rungs.iter().map(|r| r.budget).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DehbRun {
    pub ladder: BudgetLadder,
    pub iterations: Vec<DehbIteration>,
    pub incumbent: Incumbent,
    pub spend: f64,
}

/// `x1 + f * (x2 - x3)`, clipped to the unit cube.
pub fn donor_from(x1: &[f64], x2: &[f64], x3: &[f64], f: f64) -> Vec<f64> {
    x1.iter()
        .zip(x2)
        .zip(x3)
        .map(|((a, b), c)| (a + f * (b - c)).clamp(0.0, 1.0))
        .collect()
}

/// rand/1 mutation over `pool`, skipping `exclude`. Missing parents are
/// drawn uniformly when fewer than three candidates are available.
pub fn de_mutate(pool: &[Vec<f64>], exclude: Option<usize>, f: f64, dimension: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let candidates: Vec<usize> = (0..pool.len()).filter(|&i| Some(i) != exclude).collect();
    let mut parents: Vec<Vec<f64>> = if candidates.len() >= 3 {
        index::sample(rng, candidates.len(), 3)
            .into_iter()
            .map(|i| pool[candidates[i]].clone())
            .collect()
    } else {
        index::sample(rng, candidates.len(), candidates.len())
            .into_iter()
            .map(|i| pool[candidates[i]].clone())
            .collect()
    };
    while parents.len() < 3 {
        parents.push((0..dimension).map(|_| rng.random::<f64>()).collect());
    }
    donor_from(&parents[0], &parents[1], &parents[2], f)
}

/// Binomial crossover. `j_rand` is drawn first, then one uniform per
/// coordinate.
pub fn de_crossover(target: &[f64], donor: &[f64], cr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert_eq!(target.len(), donor.len(), "crossover needs equal dimensions");
    let j_rand = rng.random_range(0..target.len());
    target
        .iter()
        .zip(donor)
        .enumerate()
        .map(|(j, (t, d))| {
            let u: f64 = rng.random();
            if j == j_rand || u < cr {
                *d
            } else {
                *t
            }
        })
        .collect()
}

/// One-to-one elitist selection; the child wins ties and loses whenever
/// its evaluation failed.
pub fn de_select(parent: Slot, child: Slot, child_failed: bool) -> Slot {
    if !child_failed && child.cost <= parent.cost {
        child
    } else {
        parent
    }
}

/// Total spend of iterations `first..` of a plan, in full-run equivalents.
fn iteration_spend(ladder: &BudgetLadder, iteration: usize) -> f64 {
    (iteration..ladder.len()).map(|j| ladder.rung_spend(j)).sum()
}

/// Largest number of iterations (at most the rung count) whose total
/// spend fits in `budget_runs`.
pub fn plan_iterations(ladder: &BudgetLadder, budget_runs: f64) -> usize {
    let mut total = 0.0;
    let mut k = 0;
    while k < ladder.len() {
        let s = iteration_spend(ladder, k);
        if total + s > budget_runs + 1e-9 {
            break;
        }
        total += s;
        k += 1;
    }
    k
}

/// Spend of the first `iterations` iterations.
pub fn planned_spend(ladder: &BudgetLadder, iterations: usize) -> f64 {
    (0..iterations.min(ladder.len())).map(|k| iteration_spend(ladder, k)).sum()
}

fn top(pop: &[Slot], k: usize) -> Vec<Slot> {
    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by(|&a, &b| pop[a].cost.total_cmp(&pop[b].cost).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| pop[i].clone()).collect()
}

struct Evaluated {
    slots: Vec<Slot>,
    failed: Vec<bool>,
}

fn evaluate_vectors(
    runner: &mut Runner,
    xs: Vec<Vec<f64>>,
    budget: f64,
    seeds: &[u64],
    incumbent: Option<&mut Option<Incumbent>>,
) -> Result<Evaluated, RunError> {
    let space = runner.objective().space().clone();
    let configs = xs.iter().map(|x| space.from_unit(x)).collect::<Result<Vec<_>, _>>()?;
    let requests: Vec<EvalRequest> = configs.iter().map(|c| EvalRequest::fresh(c.clone(), budget)).collect();
    let results = runner.evaluate(&requests, seeds)?;
    if let Some(inc) = incumbent {
        for (c, r) in configs.iter().zip(&results) {
            Incumbent::offer(inc, c, r.cost);
        }
    }
    let failed = results.iter().map(|r| r.failed).collect();
    let slots = xs
        .into_iter()
        .zip(configs)
        .zip(results)
        .map(|((x, config), r)| Slot { x, config, cost: r.cost })
        .collect();
    Ok(Evaluated { slots, failed })
}

/// Runs DEHB. `budget_runs` bounds the automatic iteration count.
pub fn run_dehb(
    runner: &mut Runner,
    settings: &DehbSettings,
    budget_runs: f64,
    seeds: &[u64],
    rng: &mut ChaCha8Rng,
) -> Result<DehbRun, RunError> {
    let ladder = settings.ladder().map_err(|e| RunError::Invalid(e.to_string()))?;
    let n = ladder.len();
    let iterations = match settings.iterations {
        Some(0) => return Err(RunError::Invalid("DEHB needs at least one iteration".into())),
        Some(k) => {
            if k > n {
                log::warn!("capping DEHB at {n} iterations (one per rung)");
            }
            k.min(n)
        }
        None => match plan_iterations(&ladder, budget_runs) {
            0 => {
                return Err(RunError::Invalid(format!(
                    "budget of {budget_runs} runs is below one DEHB iteration ({:.3})",
                    iteration_spend(&ladder, 0)
                )))
            }
            k => k,
        },
    };
    if planned_spend(&ladder, iterations) > budget_runs + 1e-9 {
        return Err(RunError::Invalid(format!(
            "{iterations} DEHB iterations need {:.3} runs, budget is {budget_runs}",
            planned_spend(&ladder, iterations)
        )));
    }
    let space = runner.objective().space().clone();
    let dim = space.dimension();
    let top_rung = n - 1;
    let mut pops: Vec<Vec<Slot>> = vec![Vec::new(); n];
    let mut incumbent: Option<Incumbent> = None;
    let mut logs = Vec::with_capacity(iterations);

    // Iteration 0: fill the bottom rung, then promote upwards.
    let mut rungs = Vec::with_capacity(n);
    let mut spend = 0.0;
    for j in 0..n {
        let cap = ladder.rung_capacity(j);
        let xs: Vec<Vec<f64>> = if j == 0 {
            (0..cap)
                .map(|_| space.to_unit(&space.sample(rng)))
                .collect::<Result<_, _>>()?
        } else {
            top(&pops[j - 1], cap).into_iter().map(|s| s.x).collect()
        };
        let inc = (j == top_rung).then_some(&mut incumbent);
        let evaluated = evaluate_vectors(runner, xs, ladder.budget(j), seeds, inc)?;
        spend += evaluated.slots.len() as f64 * ladder.budget(j);
        pops[j] = evaluated.slots;
        rungs.push(RungLog {
            rung: j,
            budget: ladder.budget(j),
            before: Vec::new(),
            after: pops[j].iter().map(|s| s.cost).collect(),
        });
    }
    logs.push(DehbIteration { index: 0, rungs, spend });

    for k in 1..iterations {
        let mut rungs = Vec::with_capacity(n - k);
        let mut spend = 0.0;
        for (j, pop) in pops.iter_mut().enumerate().skip(k) {
            let pool: Vec<Vec<f64>> = pop.iter().map(|s| s.x.clone()).collect();
            let children: Vec<Vec<f64>> = pop
                .iter()
                .enumerate()
                .map(|(i, target)| {
                    let donor = de_mutate(&pool, Some(i), settings.f, dim, rng);
                    de_crossover(&target.x, &donor, settings.cr, rng)
                })
                .collect();
            let inc = (j == top_rung).then_some(&mut incumbent);
            let evaluated = evaluate_vectors(runner, children, ladder.budget(j), seeds, inc)?;
            spend += evaluated.slots.len() as f64 * ladder.budget(j);
            let before: Vec<f64> = pop.iter().map(|s| s.cost).collect();
            *pop = std::mem::take(pop)
                .into_iter()
                .zip(evaluated.slots)
                .zip(evaluated.failed)
                .map(|((p, c), failed)| de_select(p, c, failed))
                .collect();
            rungs.push(RungLog {
                rung: j,
                budget: ladder.budget(j),
                before,
                after: pop.iter().map(|s| s.cost).collect(),
            });
        }
        logs.push(DehbIteration { index: k, rungs, spend });
    }

    let spend = logs.iter().map(|l| l.spend).sum();
    Ok(DehbRun {
        ladder,
        iterations: logs,
        incumbent: incumbent.ok_or(RunError::NoIncumbent)?,
        spend,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{Objective, ObjectiveSpec};
    use crate::seeding::rng_from;

    fn sphere(d: usize, noise: f64) -> Objective {
        let spec = ObjectiveSpec::NoisySphere { noise, shift: 0.0 };
        Objective::new(spec.clone(), spec.default_space(d)).unwrap()
    }

    #[test]
    fn donor_hand_arithmetic() {
        let d = donor_from(&[0.9, 0.9], &[1.0, 0.0], &[0.0, 0.0], 0.5);
        assert_eq!(d, vec![1.0, 0.9]);
        let x = vec![0.3, 0.7];
        assert_eq!(donor_from(&x, &x, &x, 0.5), x);
        assert_eq!(donor_from(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0), x);
    }

    #[test]
    fn mutation_with_zero_scale_returns_a_pool_member() {
        let pool = vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6], vec![0.7, 0.8]];
        let mut rng = rng_from(&[3]);
        for _ in 0..50 {
            let d = de_mutate(&pool, Some(0), 0.0, 2, &mut rng);
            assert!(pool[1..].contains(&d));
        }
    }

    #[test]
    fn small_pools_fall_back_to_uniform_parents() {
        let mut rng = rng_from(&[4]);
        for size in 0..3 {
            let pool = vec![vec![0.5; 3]; size];
            let d = de_mutate(&pool, None, 0.5, 3, &mut rng);
            assert_eq!(d.len(), 3);
            assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn crossover_extremes() {
        let t = vec![0.0; 5];
        let d = vec![1.0; 5];
        let mut rng = rng_from(&[5]);
        assert_eq!(de_crossover(&t, &d, 1.0, &mut rng), d);
        for _ in 0..20 {
            let c = de_crossover(&t, &d, 0.0, &mut rng);
            assert_eq!(c.iter().filter(|v| **v == 1.0).count(), 1);
        }
    }

    #[test]
    fn crossover_replays_its_transcript() {
        let t = vec![0.0; 3];
        let d = vec![1.0; 3];
        let mut rng = rng_from(&[6]);
        let child = de_crossover(&t, &d, 0.5, &mut rng);
        let mut replay = rng_from(&[6]);
        let j_rand = replay.random_range(0..3);
        let expected: Vec<f64> = (0..3)
            .map(|j| {
                let u: f64 = replay.random();
                if j == j_rand || u < 0.5 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        assert_eq!(child, expected);
    }

    #[test]
    fn selection_rules() {
        let slot = |cost| Slot { x: vec![0.5], config: Configuration::new(), cost };
        assert_eq!(de_select(slot(2.0), slot(1.0), false).cost, 1.0);
        assert_eq!(de_select(slot(1.0), slot(2.0), false).cost, 1.0);
        let mut child = slot(1.0);
        child.x = vec![0.1];
        assert_eq!(de_select(slot(1.0), child.clone(), false).x, vec![0.1]);
        assert_eq!(de_select(slot(1.0), child, true).x, vec![0.5]);
    }

    #[test]
    fn eta_five_iteration_schedule() {
        let obj = sphere(2, 0.0);
        let mut runner = Runner::in_memory(obj);
        let settings = DehbSettings { eta: 5.0, iterations: Some(3), ..Default::default() };
        let run = run_dehb(&mut runner, &settings, 16.0, &[0], &mut rng_from(&[1])).unwrap();
        let budgets: Vec<Vec<f64>> = run.iterations.iter().map(|i| i.budgets()).collect();
        let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&budgets[0], &[0.04, 0.2, 1.0]));
        assert!(close(&budgets[1], &[0.2, 1.0]));
        assert!(close(&budgets[2], &[1.0]));
        assert!((run.spend - 6.0).abs() < 1e-9);
    }

    #[test]
    fn single_rung_ladder_evaluates_one_full_run() {
        let obj = sphere(2, 0.0);
        let mut runner = Runner::in_memory(obj);
        let settings = DehbSettings { eta: 3.0, min_budget: 0.5, iterations: Some(1), ..Default::default() };
        let run = run_dehb(&mut runner, &settings, 1.0, &[0], &mut rng_from(&[2])).unwrap();
        assert_eq!(run.ladder.len(), 1);
        assert_eq!(run.iterations.len(), 1);
        assert_eq!(run.iterations[0].rungs[0].after.len(), 1);
        assert_eq!(run.incumbent.cost, run.iterations[0].rungs[0].after[0]);
    }

    #[test]
    fn automatic_iterations_fit_the_budget() {
        let ladder = DehbSettings::default().ladder().unwrap();
        let k = plan_iterations(&ladder, 16.0);
        assert!(planned_spend(&ladder, k) <= 16.0);
        assert!(k == ladder.len() || planned_spend(&ladder, k + 1) > 16.0);
        let obj = sphere(3, 0.05);
        let mut runner = Runner::in_memory(obj);
        let run = run_dehb(&mut runner, &DehbSettings::default(), 16.0, &[0, 1], &mut rng_from(&[3])).unwrap();
        assert_eq!(run.iterations.len(), k);
        assert!((runner.spend(0, crate::journal::Phase::Tuning) - run.spend).abs() < 1e-9);
    }

    #[test]
    fn over_budget_plan_is_rejected() {
        let mut runner = Runner::in_memory(sphere(2, 0.0));
        let settings = DehbSettings { eta: 5.0, iterations: Some(3), ..Default::default() };
        assert!(matches!(run_dehb(&mut runner, &settings, 5.0, &[0], &mut rng_from(&[1])), Err(RunError::Invalid(_))));
    }
}
