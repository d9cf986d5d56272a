//! Objectives backed by an external training command.
//!
//! The command runs under `sh -c` with one environment variable per
//! hyperparameter (name uppercased, other characters mapped to `_`) plus
//! `AUTOTUNE_BUDGET`, `AUTOTUNE_SEED`, `AUTOTUNE_TRIAL`,
//! `AUTOTUNE_CHECKPOINT_OUT` and, when resuming, `AUTOTUNE_CHECKPOINT_IN`.
//! The last non-empty line of standard output must read `cost=<float>`.

use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;

use super::{CheckpointHandle, EvalContext, EvalError, Evaluation};
use crate::space::{ConfigSpace, Configuration};

pub fn env_name(param: &str) -> String {
    param
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect()
}

fn parse_cost(stdout: &str) -> Option<f64> {
    let last = stdout.lines().rev().find(|l| !l.trim().is_empty())?;
    last.trim().strip_prefix("cost=")?.trim().parse().ok()
}

fn work_dir(ctx: &EvalContext) -> PathBuf {
    ctx.work_dir
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join(format!("autotune-{}", std::process::id())))
}

pub(super) fn evaluate(
    command: &str,
    space: &ConfigSpace,
    config: &Configuration,
    budget: f64,
    seed: u64,
    resume: Option<&CheckpointHandle>,
    ctx: &EvalContext,
) -> Result<Evaluation, EvalError> {
    let dir = work_dir(ctx);
    let io = |e: std::io::Error| EvalError::Failed { message: e.to_string(), output: String::new() };
    fs::create_dir_all(&dir).map_err(io)?;
    let out_path = dir.join(format!("trial-{}-seed-{seed}.out.ckpt", ctx.trial_id));
    let in_path = dir.join(format!("trial-{}-seed-{seed}.in.ckpt", ctx.trial_id));
    let _ = fs::remove_file(&out_path);

    let mut cmd = Command::new("sh");
    cmd.arg("-c").arg(command);
    for p in space.params() {
        if let Some(v) = config.get(&p.name) {
            cmd.env(env_name(&p.name), v.to_string());
        }
    }
    cmd.env("AUTOTUNE_BUDGET", budget.to_string())
        .env("AUTOTUNE_SEED", seed.to_string())
        .env("AUTOTUNE_TRIAL", ctx.trial_id.to_string())
        .env("AUTOTUNE_CHECKPOINT_OUT", &out_path);
    if let Some(r) = resume {
        fs::write(&in_path, r.payload.as_slice()).map_err(io)?;
        cmd.env("AUTOTUNE_CHECKPOINT_IN", &in_path);
    }

    let output = cmd.output().map_err(io)?;
    let _ = fs::remove_file(&in_path);
    let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
    let stderr = String::from_utf8_lossy(&output.stderr).into_owned();
    let captured = format!("{stdout}{stderr}");
    if !output.status.success() {
        return Err(EvalError::Failed {
            message: format!("command exited with {}", output.status),
            output: captured,
        });
    }
    let cost = parse_cost(&stdout).ok_or_else(|| EvalError::Failed {
        message: "last output line is not `cost=<float>`".into(),
        output: captured.clone(),
    })?;
    if !cost.is_finite() {
        return Err(EvalError::Failed { message: format!("cost {cost} is not finite"), output: captured });
    }
    let payload = fs::read(&out_path).unwrap_or_default();
    let _ = fs::remove_file(&out_path);
    Ok(Evaluation {
        cost,
        checkpoint: CheckpointHandle {
            trial_id: ctx.trial_id,
            trained_fraction: budget,
            payload: Arc::new(payload),
        },
    })
}
