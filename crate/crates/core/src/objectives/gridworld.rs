//! Tabular Q-learning on a slippery 5x5 gridworld.
//!
//! The agent starts in the top-left cell and receives +1 on reaching the
//! bottom-right goal, paying 0.01 per step otherwise; episodes end at the
//! goal or after 50 steps. With probability `slip` the chosen action is
//! replaced by a uniformly random one.
//!
//! Random-stream protocol (fixed, so that runs are reproducible and
//! continuable): training draws from `rng_from(&[TRAIN_TAG, seed])`; per
//! step it draws an exploration uniform, then (only when exploring) an
//! action index, then a slip uniform, then (only when slipping) an action
//! index. Evaluation draws from a fresh `rng_from(&[EVAL_TAG, seed])`: a
//! slip uniform per step and an action index when slipping. Greedy ties
//! resolve to the lowest action index.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CheckpointHandle, EvalContext, EvalError, Evaluation};
use crate::seeding::rng_from;
use crate::space::Configuration;

pub const SIZE: usize = 5;
pub const STATES: usize = SIZE * SIZE;
pub const ACTIONS: usize = 4;
pub const MAX_EPISODE_STEPS: u32 = 50;
pub const GOAL_REWARD: f64 = 1.0;
pub const STEP_REWARD: f64 = -0.01;
pub const TRAIN_TAG: u64 = 0x7124_1100;
pub const EVAL_TAG: u64 = 0xE7A1_0000;

pub const DEFAULT_SPACE: &str = "learning_rate: log(1e-7, 1.0)
epsilon: (0.0, 1.0)
gamma: (0.5, 0.999)
epsilon_decay: (0.9, 1.0)
";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridworldSettings {
    /// Environment steps in a full (budget 1) run.
    pub total_steps: u64,
    pub eval_episodes: usize,
    pub slip: f64,
}

impl Default for GridworldSettings {
    fn default() -> Self {
        Self { total_steps: 4000, eval_episodes: 100, slip: 0.1 }
    }
}

impl GridworldSettings {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.total_steps == 0 || self.eval_episodes == 0 {
            return Err(EvalError::Spec("gridworld needs steps and episodes".into()));
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return Err(EvalError::Spec("slip must be a probability".into()));
        }
        Ok(())
    }

    /// Training steps for a budget fraction, rounded up.
    pub fn steps_for(&self, budget: f64) -> u64 {
        ((budget * self.total_steps as f64) - 1e-9).ceil().max(0.0) as u64
    }
}

/// Hyperparameters read from a configuration, falling back to defaults
/// for names the space does not define.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QParams {
    pub learning_rate: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub epsilon_decay: f64,
}

impl QParams {
    pub fn from_config(config: &Configuration) -> Self {
        Self {
            learning_rate: config.get_f64("learning_rate").unwrap_or(0.1),
            epsilon: config.get_f64("epsilon").unwrap_or(0.1),
            gamma: config.get_f64("gamma").unwrap_or(0.9),
            epsilon_decay: config.get_f64("epsilon_decay").unwrap_or(1.0),
        }
    }
}

/// Complete learner state; the checkpoint payload is its JSON encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QState {
    pub q: Vec<f64>,
    pub position: usize,
    pub episode_steps: u32,
    pub episode: u64,
    pub steps: u64,
    pub rng_word_pos: u128,
}

impl QState {
    fn fresh() -> Self {
        Self {
            q: vec![0.0; STATES * ACTIONS],
            position: 0,
            episode_steps: 0,
            episode: 0,
            steps: 0,
            rng_word_pos: 0,
        }
    }
}

/// Moves one cell; bumping into a wall leaves the agent in place.
pub fn transition(position: usize, action: usize) -> usize {
    let (r, c) = (position / SIZE, position % SIZE);
    let (r, c) = match action {
        0 => (r.saturating_sub(1), c),
        1 => ((r + 1).min(SIZE - 1), c),
        2 => (r, c.saturating_sub(1)),
        _ => (r, (c + 1).min(SIZE - 1)),
    };
    r * SIZE + c
}

pub fn greedy(q: &[f64], state: usize) -> usize {
    let row = &q[state * ACTIONS..(state + 1) * ACTIONS];
    let mut best = 0;
    for a in 1..ACTIONS {
        if row[a] > row[best] {
            best = a;
        }
    }
    best
}

fn slip(rng: &mut ChaCha8Rng, action: usize, prob: f64) -> usize {
    if rng.random::<f64>() < prob {
        rng.random_range(0..ACTIONS)
    } else {
        action
    }
}

/// Runs Q-learning until `state.steps == target_steps`.
pub fn train(settings: &GridworldSettings, params: &QParams, seed: u64, state: &mut QState, target_steps: u64) {
    let mut rng = rng_from(&[TRAIN_TAG, seed]);
    rng.set_word_pos(state.rng_word_pos);
    let goal = STATES - 1;
    while state.steps < target_steps {
        let eps = params.epsilon * params.epsilon_decay.powi(state.episode.min(i32::MAX as u64) as i32);
        let s = state.position;
        let chosen = if rng.random::<f64>() < eps {
            rng.random_range(0..ACTIONS)
        } else {
            greedy(&state.q, s)
        };
        let action = slip(&mut rng, chosen, settings.slip);
        let next = transition(s, action);
        let done = next == goal;
        let reward = if done { GOAL_REWARD } else { STEP_REWARD };
        let bootstrap = if done {
            0.0
        } else {
            let g = greedy(&state.q, next);
            state.q[next * ACTIONS + g]
        };
        let idx = s * ACTIONS + chosen;
        state.q[idx] += params.learning_rate * (reward + params.gamma * bootstrap - state.q[idx]);
        state.steps += 1;
        state.episode_steps += 1;
        if done || state.episode_steps >= MAX_EPISODE_STEPS {
            state.position = 0;
            state.episode_steps = 0;
            state.episode += 1;
        } else {
            state.position = next;
        }
    }
    state.rng_word_pos = rng.get_word_pos();
}

/// Mean undiscounted return of the greedy policy.
pub fn evaluate_policy(settings: &GridworldSettings, q: &[f64], seed: u64) -> f64 {
    let mut rng = rng_from(&[EVAL_TAG, seed]);
    let goal = STATES - 1;
    let mut total = 0.0;
    for _ in 0..settings.eval_episodes {
        let mut pos = 0;
        let mut ret = 0.0;
        for _ in 0..MAX_EPISODE_STEPS {
            let action = slip(&mut rng, greedy(q, pos), settings.slip);
            pos = transition(pos, action);
            if pos == goal {
                ret += GOAL_REWARD;
                break;
            }
            ret += STEP_REWARD;
        }
        total += ret;
    }
    total / settings.eval_episodes as f64
}

/// Cost of the untrained (all-zero Q) policy on `seed`.
pub fn untrained_cost(settings: &GridworldSettings, seed: u64) -> f64 {
    -evaluate_policy(settings, &vec![0.0; STATES * ACTIONS], seed)
}

pub(super) fn evaluate(
    settings: &GridworldSettings,
    config: &Configuration,
    budget: f64,
    seed: u64,
    resume: Option<&CheckpointHandle>,
    ctx: &EvalContext,
) -> Result<Evaluation, EvalError> {
    let params = QParams::from_config(config);
    let mut state = match resume {
        Some(ck) => serde_json::from_slice::<QState>(&ck.payload)
            .map_err(|e| EvalError::Checkpoint(e.to_string()))?,
        None => QState::fresh(),
    };
    if state.q.len() != STATES * ACTIONS {
        return Err(EvalError::Checkpoint("Q table has the wrong shape".into()));
    }
    train(settings, &params, seed, &mut state, settings.steps_for(budget));
    let cost = -evaluate_policy(settings, &state.q, seed);
    let payload = serde_json::to_vec(&state).expect("state serializes");
    Ok(Evaluation {
        cost,
        checkpoint: CheckpointHandle {
            trial_id: ctx.trial_id,
            trained_fraction: budget,
            payload: Arc::new(payload),
        },
    })
}
