//! The black-box objective contract and the built-in benchmark objectives.
//!
//! An objective maps `(configuration, budget fraction, seed)` to a cost,
//! lower being better, and hands back a checkpoint from which training can
//! be continued to a larger budget. Built-in objectives are deterministic
//! and continuation-consistent: resuming from a checkpoint at fraction `f`
//! and training to `b` produces the same cost as a fresh run to `b`.

mod external;
pub mod gridworld;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{derive_seed, rng_from, unit_interval};
use crate::space::{ConfigSpace, Configuration, SpaceError};
use crate::stats;

pub use gridworld::GridworldSettings;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("budget {0} is outside (0, 1]")]
    Budget(f64),
    #[error("cannot resume from fraction {from} to budget {to}")]
    Resume { from: f64, to: f64 },
    #[error("checkpoint payload is unreadable: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("trial failed: {message}")]
    Failed { message: String, output: String },
    #[error("no seeds to evaluate")]
    NoSeeds,
    #[error("seed {0} listed twice")]
    DuplicateSeed(u64),
    #[error("invalid objective: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Pending,
    Running,
    Done,
    Failed,
}

/// One evaluation of a configuration at a budget on a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: u64,
    pub config: Configuration,
    pub budget: f64,
    pub seed: u64,
    pub cost: Option<f64>,
    pub wall_time: f64,
    pub status: TrialStatus,
}

impl Trial {
    /// Cost used for ranking: failed or pending trials count as `+inf`.
    pub fn ranking_cost(&self) -> f64 {
        match (self.status, self.cost) {
            (TrialStatus::Done, Some(c)) => c,
            _ => f64::INFINITY,
        }
    }
}

/// Opaque training state that a later evaluation can continue from.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHandle {
    pub trial_id: u64,
    pub trained_fraction: f64,
    pub payload: Arc<Vec<u8>>,
}

impl CheckpointHandle {
    /// File name used when the payload is persisted under a run directory.
    pub fn file_name(&self) -> String {
        format!("{}_{:.6}.ckpt", self.trial_id, self.trained_fraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    LowerIsBetter,
    HigherIsBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    /// `||z - z*(s)||^2` plus bounded noise that widens at low budget.
    NoisySphere {
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        shift: f64,
    },
    /// `||z - z*(s)||^2 + (1 - b) / 2 + noise`, with per-seed optima
    /// `z*(s) = 0.5 + shift * u(s)`.
    SeededValley {
        #[serde(default)]
        shift: f64,
        #[serde(default)]
        noise: f64,
    },
    GridworldQ(GridworldSettings),
    ExternalCommand { command: String },
}

impl ObjectiveSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveSpec::NoisySphere { .. } => "noisy_sphere",
            ObjectiveSpec::SeededValley { .. } => "seeded_valley",
            ObjectiveSpec::GridworldQ(_) => "gridworld_q",
            ObjectiveSpec::ExternalCommand { .. } => "external_command",
        }
    }

    pub fn cost_metric(&self) -> &'static str {
        match self {
            ObjectiveSpec::NoisySphere { .. } | ObjectiveSpec::SeededValley { .. } => {
                "squared distance to the seed-dependent optimum (lower is better)"
            }
            ObjectiveSpec::GridworldQ(_) => "negative mean evaluation return (lower is better)",
            ObjectiveSpec::ExternalCommand { .. } => "cost reported by the external command",
        }
    }

    /// Default search space for objectives that have one.
    pub fn default_space(&self, dimension: usize) -> ConfigSpace {
        let text = match self {
            ObjectiveSpec::GridworldQ(_) => gridworld::DEFAULT_SPACE.to_string(),
            _ => (0..dimension.max(1))
                .map(|i| format!("x{i}: (0.0, 1.0)\n"))
                .collect(),
        };
        text.parse().expect("built-in space is valid")
    }
}

impl fmt::Display for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveSpec::NoisySphere { noise, shift } => {
                write!(f, "noisy_sphere:noise={noise},shift={shift}")
            }
            ObjectiveSpec::SeededValley { shift, noise } => {
                write!(f, "seeded_valley:shift={shift},noise={noise}")
            }
            ObjectiveSpec::GridworldQ(s) => write!(
                f,
                "gridworld_q:steps={},episodes={},slip={}",
                s.total_steps, s.eval_episodes, s.slip
            ),
            ObjectiveSpec::ExternalCommand { command } => write!(f, "cmd:{command}"),
        }
    }
}

impl FromStr for ObjectiveSpec {
    type Err = EvalError;

    /// Parses `name[:key=value,...]` or `cmd:<shell command>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(command) = s.strip_prefix("cmd:") {
            if command.trim().is_empty() {
                return Err(EvalError::Spec("empty command".into()));
            }
            return Ok(ObjectiveSpec::ExternalCommand { command: command.to_string() });
        }
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let mut pairs = Vec::new();
        for kv in args.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| EvalError::Spec(format!("expected key=value, got `{kv}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| EvalError::Spec(format!("`{v}` is not a number")))?;
            pairs.push((k.trim().to_string(), v));
        }
        let take = |key: &str, default: f64| {
            pairs.iter().find(|(k, _)| k == key).map(|(_, v)| *v).unwrap_or(default)
        };
        let known: &[&str] = match name {
            "noisy_sphere" | "seeded_valley" => &["noise", "shift"],
            "gridworld_q" => &["steps", "episodes", "slip"],
            other => return Err(EvalError::Spec(format!("unknown objective `{other}`"))),
        };
        if let Some((k, _)) = pairs.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(EvalError::Spec(format!("unknown parameter `{k}` for {name}")));
        }
        Ok(match name {
            "noisy_sphere" => ObjectiveSpec::NoisySphere {
                noise: take("noise", 0.05),
                shift: take("shift", 0.0),
            },
            "seeded_valley" => ObjectiveSpec::SeededValley {
                shift: take("shift", 0.25),
                noise: take("noise", 0.01),
            },
            _ => {
                let d = GridworldSettings::default();
                ObjectiveSpec::GridworldQ(GridworldSettings {
                    total_steps: take("steps", d.total_steps as f64) as u64,
                    eval_episodes: take("episodes", d.eval_episodes as f64) as usize,
                    slip: take("slip", d.slip),
                })
            }
        })
    }
}

/// Per-call context: identity of the trial and a scratch directory for
/// objectives that exchange files.
#[derive(Debug, Clone, Default)]
pub struct EvalContext {
    pub trial_id: u64,
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub cost: f64,
    pub checkpoint: CheckpointHandle,
}

/// An objective bound to the space its configurations come from.
#[derive(Debug, Clone)]
pub struct Objective {
    spec: ObjectiveSpec,
    space: ConfigSpace,
}

impl Objective {
    pub fn new(spec: ObjectiveSpec, space: ConfigSpace) -> Result<Self, EvalError> {
        match &spec {
            ObjectiveSpec::NoisySphere { noise, .. } | ObjectiveSpec::SeededValley { noise, .. }
                if !(noise.is_finite() && *noise >= 0.0) =>
            {
                return Err(EvalError::Spec("noise must be a non-negative number".into()))
            }
            ObjectiveSpec::GridworldQ(s) => s.validate()?,
            _ => {}
        }
        Ok(Self { spec, space })
    }

    pub fn spec(&self) -> &ObjectiveSpec {
        &self.spec
    }

    pub fn space(&self) -> &ConfigSpace {
        &self.space
    }

    /// Evaluates `config` trained to `budget` on `seed`, optionally
    /// continuing from `resume`.
    pub fn evaluate(
        &self,
        config: &Configuration,
        budget: f64,
        seed: u64,
        resume: Option<&CheckpointHandle>,
        ctx: &EvalContext,
    ) -> Result<Evaluation, EvalError> {
        if !(budget > 0.0 && budget <= 1.0) {
            return Err(EvalError::Budget(budget));
        }
        if let Some(r) = resume {
            if r.trained_fraction >= budget {
                return Err(EvalError::Resume { from: r.trained_fraction, to: budget });
            }
        }
        match &self.spec {
            ObjectiveSpec::NoisySphere { noise, shift } => {
                let z = self.space.to_unit(config)?;
                let target = seed_optimum(seed, z.len(), *shift);
                let eps = unit_interval(noise_hash(seed, &z, budget));
                let cost = squared_distance(&z, &target) + noise * (2.0 - budget) * eps;
                Ok(self.synthetic_result(cost, budget, seed, &z, resume, ctx))
            }
            ObjectiveSpec::SeededValley { shift, noise } => {
                let z = self.space.to_unit(config)?;
                let target = seed_optimum(seed, z.len(), *shift);
                let eps = unit_interval(noise_hash(seed, &z, 0.0));
                let cost = squared_distance(&z, &target) + (1.0 - budget) * 0.5 + noise * eps;
                Ok(self.synthetic_result(cost, budget, seed, &z, resume, ctx))
            }
            ObjectiveSpec::GridworldQ(settings) => {
                self.space.validate(config)?;
                gridworld::evaluate(settings, config, budget, seed, resume, ctx)
            }
            ObjectiveSpec::ExternalCommand { command } => {
                self.space.validate(config)?;
                external::evaluate(command, &self.space, config, budget, seed, resume, ctx)
            }
        }
    }

    fn synthetic_result(
        &self,
        cost: f64,
        budget: f64,
        seed: u64,
        z: &[f64],
        resume: Option<&CheckpointHandle>,
        ctx: &EvalContext,
    ) -> Evaluation {
        // Payload: the lineage digest of everything trained so far.
        let previous = resume
            .and_then(|r| r.payload.get(..8))
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .unwrap_or(0);
        let mut parts = vec![previous, seed, budget.to_bits()];
        parts.extend(z.iter().map(|x| x.to_bits()));
        let mut payload = derive_seed(&parts).to_le_bytes().to_vec();
        payload.extend_from_slice(&budget.to_le_bytes());
        Evaluation {
            cost,
            checkpoint: CheckpointHandle {
                trial_id: ctx.trial_id,
                trained_fraction: budget,
                payload: Arc::new(payload),
            },
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn noise_hash(seed: u64, z: &[f64], budget: f64) -> u64 {
    let mut parts = vec![0x5EED_0015E, seed, budget.to_bits()];
    parts.extend(z.iter().map(|x| x.to_bits()));
    derive_seed(&parts)
}

/// Unit vector `u(s)` drawn from a seed-keyed Gaussian.
pub fn seed_direction(seed: u64, dimension: usize) -> Vec<f64> {
    let mut rng = rng_from(&[0xD1EC_7104, seed]);
    loop {
        let v: Vec<f64> = (0..dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Optimum in unit space for `seed`: `0.5 + shift * u(seed)`.
pub fn seed_optimum(seed: u64, dimension: usize, shift: f64) -> Vec<f64> {
    if shift == 0.0 {
        return vec![0.5; dimension];
    }
    seed_direction(seed, dimension)
        .into_iter()
        .map(|u| 0.5 + shift * u)
        .collect()
}

/// Mean cost across seeds together with the per-seed costs.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSeedCost {
    pub mean: f64,
    pub per_seed: Vec<f64>,
}

pub fn check_seeds(seeds: &[u64]) -> Result<(), EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    for (i, s) in seeds.iter().enumerate() {
        if seeds[..i].contains(s) {
            return Err(EvalError::DuplicateSeed(*s));
        }
    }
    Ok(())
}

/// Evaluates a configuration from scratch on every seed and averages.
/// Any failure fails the aggregate.
pub fn evaluate_multi_seed(
    objective: &Objective,
    config: &Configuration,
    budget: f64,
    seeds: &[u64],
) -> Result<MultiSeedCost, EvalError> {
    check_seeds(seeds)?;
    let per_seed = seeds
        .iter()
        .map(|&s| {
            objective
                .evaluate(config, budget, s, None, &EvalContext::default())
                .map(|e| e.cost)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MultiSeedCost { mean: stats::mean(&per_seed), per_seed })
}
