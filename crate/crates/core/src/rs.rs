//! Random search: sample configurations, evaluate each at full budget on
//! the tuning seeds, keep the best.

use rand_chacha::ChaCha8Rng;

use crate::runner::{EvalRequest, Incumbent, RunError, Runner};
use crate::space::Configuration;

#[derive(Debug, Clone, PartialEq)]
pub struct RsEvaluation {
    pub config: Configuration,
    /// Mean tuning cost; `+inf` when any seed failed.
    pub cost: f64,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct RsRun {
    pub n_configs: usize,
    pub evaluations: Vec<RsEvaluation>,
    pub incumbent: Incumbent,
    /// Full-run equivalents consumed.
    pub spend: f64,
}

/// Samples `n_configs` configurations up front and evaluates them as one
/// batch, so the result does not depend on the number of workers.
pub fn run_rs(runner: &mut Runner, n_configs: usize, seeds: &[u64], rng: &mut ChaCha8Rng) -> Result<RsRun, RunError> {
    if n_configs == 0 {
        return Err(RunError::Invalid("random search needs at least one configuration".into()));
    }
    let space = runner.objective().space().clone();
    let configs: Vec<Configuration> = (0..n_configs).map(|_| space.sample(rng)).collect();
    let requests: Vec<EvalRequest> = configs.iter().map(|c| EvalRequest::fresh(c.clone(), 1.0)).collect();
    let results = runner.evaluate(&requests, seeds)?;

    let mut incumbent = None;
    let mut evaluations = Vec::with_capacity(n_configs);
    for (config, result) in configs.into_iter().zip(results) {
        Incumbent::offer(&mut incumbent, &config, result.cost);
        evaluations.push(RsEvaluation { config, cost: result.cost, failed: result.failed });
    }
    Ok(RsRun {
        n_configs,
        evaluations,
        incumbent: incumbent.ok_or(RunError::NoIncumbent)?,
        spend: n_configs as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::journal::{Phase, RecordBody};
    use crate::objectives::{Objective, ObjectiveSpec};
    use crate::seeding::rng_from;

    fn sphere(d: usize) -> Objective {
        let spec = ObjectiveSpec::NoisySphere { noise: 0.0, shift: 0.0 };
        Objective::new(spec.clone(), spec.default_space(d)).unwrap()
    }

    #[test]
    fn single_config_is_the_incumbent() {
        let mut runner = Runner::in_memory(sphere(2));
        let run = run_rs(&mut runner, 1, &[0], &mut rng_from(&[1])).unwrap();
        assert_eq!(run.incumbent.config, run.evaluations[0].config);
    }

    #[test]
    fn spends_one_full_run_per_config() {
        let mut runner = Runner::in_memory(sphere(2));
        run_rs(&mut runner, 16, &[0, 1, 2, 3, 4], &mut rng_from(&[1])).unwrap();
        let trials: Vec<_> = runner
            .journal()
            .records()
            .iter()
            .filter_map(|r| match &r.body {
                RecordBody::Trial(t) => Some(t),
                _ => None,
            })
            .collect();
        assert_eq!(trials.len(), 16 * 5);
        assert!(trials.iter().all(|t| t.budget == 1.0));
        assert!((runner.spend(0, Phase::Tuning) - 16.0).abs() < 1e-9);
    }

    #[test]
    fn more_samples_never_hurt_with_shared_prefix() {
        let mut last = f64::INFINITY;
        for n in [1, 4, 16, 64] {
            let mut runner = Runner::in_memory(sphere(3));
            let run = run_rs(&mut runner, n, &[0], &mut rng_from(&[9])).unwrap();
            assert!(run.incumbent.cost <= last);
            last = run.incumbent.cost;
        }
    }

    #[test]
    fn all_failures_mean_no_incumbent() {
        let spec = ObjectiveSpec::ExternalCommand { command: "exit 3".into() };
        let obj = Objective::new(spec, "x: (0, 1)".parse().unwrap()).unwrap();
        let mut runner = Runner::in_memory(obj);
        assert!(matches!(run_rs(&mut runner, 2, &[0], &mut rng_from(&[0])), Err(RunError::NoIncumbent)));
    }
}
