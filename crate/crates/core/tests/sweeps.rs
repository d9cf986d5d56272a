use std::collections::BTreeMap;

use autotune_core::objectives::gridworld::untrained_cost;
use autotune_core::objectives::{GridworldSettings, Objective, ObjectiveSpec, Orientation};
use autotune_core::runner::Runner;
use autotune_core::space::{ConfigSpace, Configuration, Value};
use autotune_core::stats;
use autotune_core::sweeps::{run_sweep, worst_vs_best_summary, SweepRow, SweepSpec, SweepTable};

const DQN_GRID: [f64; 10] = [1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6, 5e-7];

fn gridworld_base() -> Configuration {
    Configuration::new()
        .with("learning_rate", Value::Float(0.1))
        .with("epsilon", Value::Float(0.1))
        .with("gamma", Value::Float(0.9))
        .with("epsilon_decay", Value::Float(1.0))
}

fn gridworld_runner(space: ConfigSpace) -> Runner {
    let spec = ObjectiveSpec::GridworldQ(GridworldSettings::default());
    Runner::in_memory(Objective::new(spec, space).unwrap())
}

fn lr_sweep(values: &[f64], seeds: Vec<u64>) -> SweepSpec {
    SweepSpec {
        base: gridworld_base(),
        param: "learning_rate".into(),
        values: values.iter().map(|&v| Value::Float(v)).collect(),
        seeds,
        budget: 0.2,
    }
}

#[test]
fn learning_rate_grid_gives_one_row_per_value() {
    let spec = ObjectiveSpec::GridworldQ(GridworldSettings::default());
    let mut runner = gridworld_runner(spec.default_space(0));
    let table = run_sweep(&mut runner, &lr_sweep(&DQN_GRID, vec![0, 1, 2])).unwrap();
    assert_eq!(table.rows.len(), DQN_GRID.len());
    assert_eq!(table.file_name(), "sweep_gridworld_q_learning_rate.csv");
    let mut sorted = DQN_GRID.to_vec();
    sorted.sort_by(f64::total_cmp);
    let got: Vec<f64> = table.rows.iter().map(|r| r.value.as_f64().unwrap()).collect();
    assert_eq!(got, sorted);
    assert!(table.rows.iter().all(|r| r.count == 3 && r.per_seed.len() == 3));
}

#[test]
fn zero_learning_rate_costs_the_untrained_policy() {
    let space: ConfigSpace =
        "learning_rate: (0.0, 1.0)\nepsilon: (0.0, 1.0)\ngamma: (0.5, 0.999)\nepsilon_decay: (0.9, 1.0)".parse().unwrap();
    let seeds = vec![0, 3, 8];
    let mut runner = gridworld_runner(space);
    let table = run_sweep(&mut runner, &lr_sweep(&[0.5, 0.0, 0.1], seeds.clone())).unwrap();
    let zero = &table.rows[0];
    assert_eq!(zero.value, Value::Float(0.0));
    let settings = GridworldSettings::default();
    let untrained: Vec<f64> = seeds.iter().map(|&s| untrained_cost(&settings, s)).collect();
    for ((_, cost), want) in zero.per_seed.iter().zip(&untrained) {
        assert_eq!(cost.unwrap().to_bits(), want.to_bits());
    }
    assert_eq!(zero.mean, Some(stats::mean(&untrained)));
}

#[test]
fn emitted_statistics_recompute_exactly_from_per_seed_rows() {
    let spec = ObjectiveSpec::GridworldQ(GridworldSettings::default());
    let mut runner = gridworld_runner(spec.default_space(0));
    let table = run_sweep(&mut runner, &lr_sweep(&[1e-1, 1e-2, 1e-3], vec![0, 1, 2, 3, 4])).unwrap();
    let csv = table.to_csv();

    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let mut costs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut stated: BTreeMap<(String, String), String> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.unwrap();
        let (value, key, cost) = (rec[0].to_string(), rec[1].to_string(), rec[2].to_string());
        if key.parse::<u64>().is_ok() {
            assert_eq!(&rec[3], "done");
            costs.entry(value).or_default().push(cost.parse().unwrap());
        } else {
            stated.insert((value, key), cost);
        }
    }
    assert_eq!(costs.len(), 3);
    for (value, c) in &costs {
        let get = |k: &str| stated[&(value.clone(), k.to_string())].clone();
        assert_eq!(get("mean").parse::<f64>().unwrap(), stats::mean(c));
        assert_eq!(get("std").parse::<f64>().unwrap(), stats::std_dev(c));
        assert_eq!(get("median").parse::<f64>().unwrap(), stats::median(c));
        assert_eq!(get("count").parse::<usize>().unwrap(), c.len());
    }
}

#[test]
fn failed_seeds_are_counted_out() {
    let spec = ObjectiveSpec::ExternalCommand {
        command: r#"if [ "$AUTOTUNE_SEED" = 1 ]; then exit 1; fi; echo "cost=$X""#.into(),
    };
    let space: ConfigSpace = "x: (0.0, 1.0)".parse().unwrap();
    let mut runner = Runner::in_memory(Objective::new(spec, space).unwrap());
    let sweep = SweepSpec {
        base: Configuration::new().with("x", Value::Float(0.5)),
        param: "x".into(),
        values: vec![Value::Float(0.25), Value::Float(0.75)],
        seeds: vec![0, 1, 2],
        budget: 1.0,
    };
    let table = run_sweep(&mut runner, &sweep).unwrap();
    for row in &table.rows {
        assert_eq!(row.count, 2);
        assert_eq!(row.per_seed[1], (1, None));
        assert_eq!(row.mean, row.value.as_f64());
    }
    assert!(table.to_csv().contains("0.25,1,,failed\n"));
}

/// Builds a table whose flags are known in advance. The best row sits at
/// `base` with std 1; the worst row is placed inside or outside that band
/// and its median inside or outside the 20% drop.
fn planted_table(i: usize, within: bool, small: bool, orientation: Orientation) -> SweepTable {
    let base = 10.0 + i as f64;
    let sign = match orientation {
        Orientation::LowerIsBetter => 1.0,
        Orientation::HigherIsBetter => -1.0,
    };
    let worst_mean = base + sign * if within { 0.5 } else { 1.5 };
    let worst_median = base + sign * base * if small { 0.1 } else { 0.3 };
    let middle = base + sign * 0.25;
    let row = |v: f64, mean: f64, std: f64, median: f64| SweepRow {
        value: Value::Float(v),
        per_seed: Vec::new(),
        mean: Some(mean),
        std: Some(std),
        median: Some(median),
        count: 3,
    };
    let mut rows = vec![row(0.0, base, 1.0, base), row(1.0, worst_mean, 0.1, worst_median)];
    for k in 0..i % 4 {
        rows.insert(1, row(2.0 + k as f64, middle, 0.2, middle));
    }
    let n = rows.len();
    rows.rotate_left(i % n);
    SweepTable { objective: "synthetic".into(), param: "p".into(), rows }
}

#[test]
fn planted_flags_are_counted_exactly() {
    for orientation in [Orientation::LowerIsBetter, Orientation::HigherIsBetter] {
        let (mut planted_within, mut planted_small) = (0, 0);
        let tables: Vec<SweepTable> = (0..126)
            .map(|i| {
                let within = i % 3 != 0;
                let small = i % 5 < 2;
                planted_within += within as usize;
                planted_small += small as usize;
                planted_table(i, within, small, orientation)
            })
            .collect();
        let summary = worst_vs_best_summary(&tables, orientation);
        assert_eq!(summary.total, 126);
        assert_eq!(summary.within_band, planted_within);
        assert_eq!(summary.small_drop, planted_small);
        assert!(summary.tables.iter().all(Option::is_some));
    }
}
