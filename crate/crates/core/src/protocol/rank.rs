//! Cross-method ranking with standard-deviation bands.
//!
//! Per environment, the best remaining method anchors a rank; it and every
//! unranked method whose mean lies within the anchor's mean ± std share
//! that rank. The next rank is one plus the number of methods ranked so
//! far. Mean ranks are averaged over environments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::Orientation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("no environments to rank")]
    NoEnvironments,
    #[error("ranking needs at least one method")]
    NoMethods,
    #[error("missing result for method `{method}` on `{environment}`")]
    MissingCell { environment: String, method: String },
    #[error("two results for method `{method}` on `{environment}`")]
    DuplicateCell { environment: String, method: String },
    #[error("non-finite result for method `{method}` on `{environment}`")]
    NonFinite { environment: String, method: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub environment: String,
    pub method: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub orientation: Orientation,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(orientation: Orientation) -> Self {
        Self { orientation, rows: Vec::new() }
    }

    pub fn push(&mut self, environment: &str, method: &str, mean: f64, std: f64) -> &mut Self {
        self.rows.push(ScoreRow { environment: environment.into(), method: method.into(), mean, std });
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    /// In order of first appearance.
    pub environments: Vec<String>,
    pub methods: Vec<String>,
    /// `cells[e][m]` is `(mean, std)`.
    pub cells: Vec<Vec<(f64, f64)>>,
    /// `ranks[e][m]`, starting at 1.
    pub ranks: Vec<Vec<usize>>,
    /// Unrounded mean rank per method.
    pub mean_ranks: Vec<f64>,
}

impl RankTable {
    /// Mean rank rounded to one decimal.
    pub fn mean_rank(&self, method: &str) -> Option<f64> {
        let i = self.methods.iter().position(|m| m == method)?;
        Some((self.mean_ranks[i] * 10.0).round() / 10.0)
    }

    pub fn rank(&self, environment: &str, method: &str) -> Option<usize> {
        let e = self.environments.iter().position(|x| x == environment)?;
        let m = self.methods.iter().position(|x| x == method)?;
        Some(self.ranks[e][m])
    }

    /// CSV with columns method, environment, mean, std, rank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,environment,mean,std,rank\n");
        for (m, method) in self.methods.iter().enumerate() {
            for (e, env) in self.environments.iter().enumerate() {
                let (mean, std) = self.cells[e][m];
                out.push_str(&format!("{method},{env},{mean},{std},{}\n", self.ranks[e][m]));
            }
        }
        out
    }

    /// Plain-text table with one row per method.
    pub fn render(&self) -> String {
        let width = self.methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:width$}", "method");
        for env in &self.environments {
            out.push_str(&format!("  {env:>22}"));
        }
        out.push_str("  mean rank\n");
        for (m, method) in self.methods.iter().enumerate() {
            out.push_str(&format!("{method:width$}"));
            for e in 0..self.environments.len() {
                let (mean, std) = self.cells[e][m];
                let cell = format!("{mean:.4}±{std:.4} ({})", self.ranks[e][m]);
                out.push_str(&format!("  {cell:>22}"));
            }
            out.push_str(&format!("  {:.1}\n", (self.mean_ranks[m] * 10.0).round() / 10.0));
        }
        out
    }
}

/// Ranks one environment. `scores` are oriented so that larger is
/// better. Anchor ties go to the larger std, then the smaller name.
fn rank_environment(scores: &[(f64, f64)], names: &[String]) -> Vec<usize> {
    let n = scores.len();
    let mut ranks = vec![0usize; n];
    let mut ranked = 0;
    while ranked < n {
        let anchor = (0..n)
            .filter(|&i| ranks[i] == 0)
            .max_by(|&a, &b| {
                scores[a]
                    .0
                    .total_cmp(&scores[b].0)
                    .then(scores[a].1.total_cmp(&scores[b].1))
                    .then(names[b].cmp(&names[a]))
            })
            .expect("unranked method exists");
        let rank = ranked + 1;
        let (mean, std) = scores[anchor];
        for i in 0..n {
            if ranks[i] == 0 && (scores[i].0 - mean).abs() <= std {
                ranks[i] = rank;
                ranked += 1;
            }
        }
        if ranks[anchor] == 0 {
            // Only possible with a negative std; keep the anchor itself.
            ranks[anchor] = rank;
            ranked += 1;
        }
    }
    ranks
}

pub fn rank_methods(table: &ScoreTable) -> Result<RankTable, RankError> {
    let mut environments: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for row in &table.rows {
        if !environments.contains(&row.environment) {
            environments.push(row.environment.clone());
        }
        if !methods.contains(&row.method) {
            methods.push(row.method.clone());
        }
    }
    if environments.is_empty() {
        return Err(RankError::NoEnvironments);
    }
    if methods.is_empty() {
        return Err(RankError::NoMethods);
    }
    let mut cells = vec![vec![None; methods.len()]; environments.len()];
    for row in &table.rows {
        let e = environments.iter().position(|x| *x == row.environment).expect("collected");
        let m = methods.iter().position(|x| *x == row.method).expect("collected");
        if !(row.mean.is_finite() && row.std.is_finite()) {
            return Err(RankError::NonFinite { environment: row.environment.clone(), method: row.method.clone() });
        }
        if cells[e][m].replace((row.mean, row.std.abs())).is_some() {
            return Err(RankError::DuplicateCell { environment: row.environment.clone(), method: row.method.clone() });
        }
    }
    let mut full = Vec::with_capacity(environments.len());
    for (e, row) in cells.iter().enumerate() {
        let mut out = Vec::with_capacity(methods.len());
        for (m, cell) in row.iter().enumerate() {
            out.push(cell.ok_or_else(|| RankError::MissingCell {
                environment: environments[e].clone(),
                method: methods[m].clone(),
            })?);
        }
        full.push(out);
    }
    let sign = match table.orientation {
        Orientation::HigherIsBetter => 1.0,
        Orientation::LowerIsBetter => -1.0,
    };
    let ranks: Vec<Vec<usize>> = full
        .iter()
        .map(|row| {
            let oriented: Vec<(f64, f64)> = row.iter().map(|(m, s)| (sign * m, *s)).collect();
            rank_environment(&oriented, &methods)
        })
        .collect();
    let mean_ranks = (0..methods.len())
        .map(|m| ranks.iter().map(|r| r[m] as f64).sum::<f64>() / environments.len() as f64)
        .collect();
    Ok(RankTable { environments, methods, cells: full, ranks, mean_ranks })
}
