//! One-hyperparameter sweeps: vary a single value of a base configuration
//! and evaluate every value on every seed.

use serde::{Deserialize, Serialize};

use crate::objectives::Orientation;
use crate::runner::{EvalRequest, RunError, Runner};
use crate::space::{Configuration, Value};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: Configuration,
    pub param: String,
    pub values: Vec<Value>,
    pub seeds: Vec<u64>,
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: Value,
    /// Cost per seed, `None` for failed trials.
    pub per_seed: Vec<(u64, Option<f64>)>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub median: Option<f64>,
    /// Seeds that completed.
    pub count: usize,
}

impl SweepRow {
    fn new(value: Value, per_seed: Vec<(u64, Option<f64>)>) -> Self {
        let ok: Vec<f64> = per_seed.iter().filter_map(|(_, c)| *c).collect();
        let some = |f: fn(&[f64]) -> f64| (!ok.is_empty()).then(|| f(&ok));
        Self {
            mean: some(stats::mean),
            std: some(stats::std_dev),
            median: some(stats::median),
            count: ok.len(),
            value,
            per_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub objective: String,
    pub param: String,
    pub rows: Vec<SweepRow>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl SweepTable {
    /// `sweep_<objective>_<param>.csv`
    pub fn file_name(&self) -> String {
        format!("sweep_{}_{}.csv", self.objective, self.param)
    }

    /// Per-seed rows (`value,seed,cost,status`) followed by aggregate rows
    /// whose `seed` column names the statistic.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("value,seed,cost,status\n");
        for row in &self.rows {
            for (seed, cost) in &row.per_seed {
                let status = if cost.is_some() { "done" } else { "failed" };
                out.push_str(&format!("{},{seed},{},{status}\n", row.value, fmt_opt(*cost)));
            }
        }
        for row in &self.rows {
            out.push_str(&format!("{},mean,{},\n", row.value, fmt_opt(row.mean)));
            out.push_str(&format!("{},std,{},\n", row.value, fmt_opt(row.std)));
            out.push_str(&format!("{},median,{},\n", row.value, fmt_opt(row.median)));
            out.push_str(&format!("{},count,{},\n", row.value, row.count));
        }
        out
    }
}

fn numeric_key(v: &Value) -> Option<f64> {
    v.as_f64()
}

/// Runs the sweep. Rows follow the value order, sorted ascending when all
/// values are numeric.
pub fn run_sweep(runner: &mut Runner, spec: &SweepSpec) -> Result<SweepTable, RunError> {
    let space = runner.objective().space().clone();
    let param = space
        .get(&spec.param)
        .ok_or_else(|| RunError::Invalid(format!("unknown hyperparameter `{}`", spec.param)))?
        .clone();
    if spec.values.is_empty() {
        return Err(RunError::Invalid("a sweep needs at least one value".into()));
    }
    let mut values = spec.values.clone();
    for (i, v) in values.iter().enumerate() {
        param.check(v)?;
        if values[..i].contains(v) {
            return Err(RunError::Invalid(format!("value {v} is listed twice")));
        }
    }
    if values.iter().all(|v| numeric_key(v).is_some()) {
        values.sort_by(|a, b| numeric_key(a).unwrap().total_cmp(&numeric_key(b).unwrap()));
    }
    let configs: Vec<Configuration> = values
        .iter()
        .map(|v| {
            let mut c = spec.base.clone();
            c.insert(&spec.param, v.clone());
            space.canonicalize(&c)
        })
        .collect::<Result<_, _>>()?;
    let requests: Vec<EvalRequest> = configs.into_iter().map(|c| EvalRequest::fresh(c, spec.budget)).collect();
    let results = runner.evaluate(&requests, &spec.seeds)?;
    let rows = values
        .into_iter()
        .zip(results)
        .map(|(v, r)| SweepRow::new(v, spec.seeds.iter().copied().zip(r.per_seed).collect()))
        .collect();
    Ok(SweepTable {
        objective: runner.objective().spec().name().to_string(),
        param: spec.param.clone(),
        rows,
    })
}

/// Best-versus-worst comparison of one table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableFlags {
    /// The worst mean lies within the best mean ± the best std.
    pub worst_within_best_band: bool,
    /// Relative median drop from best to worst row is below 20%.
    pub small_median_drop: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub tables: Vec<Option<TableFlags>>,
    pub within_band: usize,
    pub small_drop: usize,
    pub total: usize,
}

/// Flags for rows given as `(mean, std, median)`.
pub fn table_flags(rows: &[(f64, f64, f64)], orientation: Orientation) -> Option<TableFlags> {
    let better = |a: f64, b: f64| match orientation {
        Orientation::LowerIsBetter => a < b,
        Orientation::HigherIsBetter => a > b,
    };
    let first = rows.first()?;
    let (mut best, mut worst) = (first, first);
    for r in rows {
        if better(r.0, best.0) {
            best = r;
        }
        if better(worst.0, r.0) {
            worst = r;
        }
    }
    let within = (worst.0 - best.0).abs() <= best.1;
    let drop = if best.2 == 0.0 {
        if worst.2 == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        (worst.2 - best.2).abs() / best.2.abs()
    };
    Some(TableFlags { worst_within_best_band: within, small_median_drop: drop < 0.2 })
}

pub fn worst_vs_best_summary(tables: &[SweepTable], orientation: Orientation) -> SweepSummary {
    let flags: Vec<Option<TableFlags>> = tables
        .iter()
        .map(|t| {
            let rows: Vec<(f64, f64, f64)> = t
                .rows
                .iter()
                .filter_map(|r| Some((r.mean?, r.std?, r.median?)))
                .collect();
            table_flags(&rows, orientation)
        })
        .collect();
    SweepSummary {
        within_band: flags.iter().flatten().filter(|f| f.worst_within_best_band).count(),
        small_drop: flags.iter().flatten().filter(|f| f.small_median_drop).count(),
        total: tables.len(),
        tables: flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{Objective, ObjectiveSpec};

    fn row(mean: f64, std: f64) -> (f64, f64, f64) {
        (mean, std, mean)
    }

    #[test]
    fn close_rows_are_within_the_band() {
        let f = table_flags(&[row(10.0, 0.5), row(10.1, 0.5)], Orientation::LowerIsBetter).unwrap();
        assert!(f.worst_within_best_band);
        assert!(f.small_median_drop);
    }

    #[test]
    fn large_drop_is_flagged() {
        let f = table_flags(&[row(10.0, 0.5), row(100.0, 0.5)], Orientation::LowerIsBetter).unwrap();
        assert!(!f.worst_within_best_band);
        assert!(!f.small_median_drop);
    }

    #[test]
    fn single_value_single_seed() {
        let spec = ObjectiveSpec::NoisySphere { noise: 0.0, shift: 0.0 };
        let obj = Objective::new(spec.clone(), spec.default_space(2)).unwrap();
        let base = obj.space().from_unit(&[0.5, 0.5]).unwrap();
        let mut runner = Runner::in_memory(obj);
        let sweep = SweepSpec { base, param: "x0".into(), values: vec![Value::Float(0.25)], seeds: vec![0], budget: 1.0 };
        let table = run_sweep(&mut runner, &sweep).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].std, Some(0.0));
        assert_eq!(table.rows[0].mean, Some(0.0625));
        assert_eq!(table.file_name(), "sweep_noisy_sphere_x0.csv");
    }

    #[test]
    fn rows_sorted_by_value_and_duplicates_rejected() {
        let spec = ObjectiveSpec::NoisySphere { noise: 0.0, shift: 0.0 };
        let obj = Objective::new(spec.clone(), spec.default_space(1)).unwrap();
        let base = obj.space().from_unit(&[0.5]).unwrap();
        let mut runner = Runner::in_memory(obj);
        let mut sweep = SweepSpec {
            base,
            param: "x0".into(),
            values: vec![Value::Float(0.9), Value::Float(0.1), Value::Float(0.5)],
            seeds: vec![0, 1],
            budget: 1.0,
        };
        let table = run_sweep(&mut runner, &sweep).unwrap();
        let vs: Vec<f64> = table.rows.iter().map(|r| r.value.as_f64().unwrap()).collect();
        assert_eq!(vs, vec![0.1, 0.5, 0.9]);
        sweep.values.push(Value::Float(0.1));
        assert!(run_sweep(&mut runner, &sweep).is_err());
    }
}
