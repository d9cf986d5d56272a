//! Reproducibility checklist rendered from run journals.
//!
//! Items that a journal can prove are answered automatically; anything the
//! journals cannot establish is left `UNANSWERED` instead of guessed.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::journal::{Loaded, Phase};
use crate::space::{ConfigSpace, ParamKind};

#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    Yes,
    No(String),
    Text(String),
    NotApplicable(String),
    Unanswered,
}

impl Answer {
    fn flag(ok: bool, why_not: impl FnOnce() -> String) -> Self {
        if ok {
            Answer::Yes
        } else {
            Answer::No(why_not())
        }
    }

    fn render(&self) -> String {
        match self {
            Answer::Yes => "yes".into(),
            Answer::No(why) if why.is_empty() => "no".into(),
            Answer::No(why) => format!("no ({why})"),
            Answer::Text(t) => t.clone(),
            Answer::NotApplicable(why) => format!("n/a ({why})"),
            Answer::Unanswered => "UNANSWERED".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChecklistItem {
    pub number: usize,
    pub prompt: &'static str,
    pub answer: Answer,
    /// Sub-questions with their own answers.
    pub sub: Vec<(&'static str, Answer)>,
    /// Extra lines rendered as a bullet list.
    pub details: Vec<String>,
}

/// Answers that cannot be read from a journal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChecklistMeta {
    pub package: Option<String>,
    pub code_link: Option<String>,
    pub code_includes_tuning: Option<bool>,
    pub environment_bundled: Option<bool>,
    pub hardware: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChecklistReport {
    pub items: Vec<ChecklistItem>,
}

impl ChecklistReport {
    pub fn item(&self, number: usize) -> &ChecklistItem {
        &self.items[number - 1]
    }

    pub fn render(&self) -> String {
        let mut out = String::from("Reproducibility checklist\n=========================\n\n");
        for item in &self.items {
            let _ = writeln!(out, "{}. {}: {}", item.number, item.prompt, item.answer.render());
            for (q, a) in &item.sub {
                let _ = writeln!(out, "   - {q}: {}", a.render());
            }
            for d in &item.details {
                let _ = writeln!(out, "   - {d}");
            }
        }
        out
    }
}

/// Renders a parameter range in the checklist notation.
pub fn range_notation(kind: &ParamKind) -> String {
    match kind {
        ParamKind::Continuous { lower, upper } => format!("({lower:?}, {upper:?})"),
        ParamKind::LogContinuous { lower, upper } => format!("log(({lower:?}, {upper:?}))"),
        ParamKind::Integer { lower, upper } => format!("[{lower}, {upper}]"),
        ParamKind::Categorical { choices } => format!("{{{}}}", choices.join(", ")),
    }
}

fn space_lines(space: &ConfigSpace) -> Vec<String> {
    space
        .params()
        .iter()
        .map(|p| format!("  {}: {}", p.name, range_notation(&p.kind)))
        .collect()
}

fn run_name(j: &Loaded) -> String {
    format!("{}/{}", j.header.method.label(), j.header.objective.name())
}

fn seed_list(seeds: &[u64]) -> String {
    let parts: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!("[{}]", parts.join(", "))
}

/// Seeds used by trials of the given phases.
fn seeds_in(j: &Loaded, phases: &[Phase]) -> BTreeSet<u64> {
    j.trials().filter(|t| phases.contains(&t.phase)).map(|t| t.seed).collect()
}

/// Tuning and warmstart trials only touched tuning seeds.
fn trained_on_tuning_seeds(j: &Loaded) -> Result<(), String> {
    let tuning: BTreeSet<u64> = j.header.seed_plan.tuning.iter().copied().collect();
    let used = seeds_in(j, &[Phase::Tuning, Phase::Warmstart]);
    match used.difference(&tuning).next() {
        Some(s) => Err(format!("{} tuned on seed {s}, which is not a tuning seed", run_name(j))),
        None => Ok(()),
    }
}

/// Every reported test cost comes from a test-phase trial on a test seed
/// that was never used for tuning.
fn reported_on_test_seeds(j: &Loaded) -> Result<(), String> {
    let test: BTreeSet<u64> = j.header.seed_plan.test.iter().copied().collect();
    let tuning: BTreeSet<u64> = j.header.seed_plan.tuning.iter().copied().collect();
    if let Some(s) = test.intersection(&tuning).next() {
        return Err(format!("{}: seed {s} is both a tuning and a test seed", run_name(j)));
    }
    let used = seeds_in(j, &[Phase::Test]);
    if let Some(s) = used.difference(&test).next() {
        return Err(format!("{} tested on seed {s}, which is not a test seed", run_name(j)));
    }
    for rep in j.repetitions() {
        if rep.failure.is_some() {
            continue;
        }
        let tested: Vec<f64> = j
            .trials()
            .filter(|t| t.phase == Phase::Test && t.rep == rep.rep && t.budget == 1.0)
            .filter_map(|t| t.cost)
            .collect();
        if rep.test_costs.len() != test.len() || rep.test_costs.iter().any(|c| !tested.contains(c)) {
            return Err(format!("{} repetition {} reports costs not measured on the test seeds", run_name(j), rep.rep));
        }
    }
    Ok(())
}

fn combine(journals: &[&Loaded], check: impl Fn(&Loaded) -> Result<(), String>) -> Answer {
    if journals.is_empty() {
        return Answer::Unanswered;
    }
    let problems: Vec<String> = journals.iter().filter_map(|j| check(j).err()).collect();
    Answer::flag(problems.is_empty(), || problems.join("; "))
}

fn unique<T: Ord + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    items.collect::<BTreeSet<_>>().into_iter().collect()
}

fn meta_flag(v: Option<bool>) -> Answer {
    match v {
        Some(true) => Answer::Yes,
        Some(false) => Answer::No(String::new()),
        None => Answer::Unanswered,
    }
}

/// Builds all 17 checklist items from `journals` (one per method and
/// objective) and `meta`.
pub fn emit_checklist(journals: &[Loaded], meta: &ChecklistMeta) -> ChecklistReport {
    let all: Vec<&Loaded> = journals.iter().collect();
    let complete: Vec<&Loaded> = journals.iter().filter(|j| j.is_complete()).collect();
    let all_complete = !journals.is_empty() && complete.len() == journals.len();
    // Answers that depend on finished runs are only given when every run finished.
    let finished = |a: Answer| if all_complete { a } else { Answer::Unanswered };
    let mut items = Vec::with_capacity(17);
    let mut push = |prompt: &'static str, answer: Answer, sub: Vec<(&'static str, Answer)>, details: Vec<String>| {
        items.push(ChecklistItem { number: items.len() + 1, prompt, answer, sub, details });
    };

    let has_split = if journals.is_empty() { Answer::Unanswered } else { Answer::Yes };
    let trained = combine(&all, trained_on_tuning_seeds);
    push(
        "Separate training and test settings exist (tuning seeds vs. held-out test seeds)",
        has_split,
        vec![
            ("Training used only the training setting", trained.clone()),
            ("Tuning used only the training setting", trained),
            ("Final results come from the test setting", finished(combine(&all, reported_on_test_seeds))),
        ],
        Vec::new(),
    );

    let methods = unique(journals.iter().map(|j| j.header.method.description()));
    let package = meta.package.clone().unwrap_or_else(|| format!("autotune {}", crate::journal::TOOL_VERSION));
    push(
        "Tuning package and optimization method",
        if methods.is_empty() {
            Answer::Unanswered
        } else {
            Answer::Text(format!("{package}, based on {}", methods.join("; ")))
        },
        Vec::new(),
        Vec::new(),
    );

    let mut space_details = Vec::new();
    for j in journals {
        space_details.push(format!("{}:", run_name(j)));
        space_details.extend(space_lines(&j.header.space));
    }
    push(
        "Configuration space",
        if journals.is_empty() { Answer::Unanswered } else { Answer::Text(String::new()) },
        Vec::new(),
        space_details,
    );

    let shared = if journals.is_empty() {
        Answer::Unanswered
    } else {
        let mut conflicts = Vec::new();
        for (i, a) in journals.iter().enumerate() {
            for b in &journals[i + 1..] {
                for p in a.header.space.params() {
                    if let Some(q) = b.header.space.get(&p.name) {
                        if q.kind != p.kind {
                            conflicts.push(format!("`{}` differs between {} and {}", p.name, run_name(a), run_name(b)));
                        }
                    }
                }
            }
        }
        Answer::flag(conflicts.is_empty(), || unique(conflicts.into_iter()).join("; "))
    };
    push("Shared hyperparameters use the same ranges in every method", shared, Vec::new(), Vec::new());

    let metrics = unique(journals.iter().map(|j| j.header.objective.cost_metric().to_string()));
    push(
        "Cost metric optimized",
        if metrics.is_empty() { Answer::Unanswered } else { Answer::Text(metrics.join("; ")) },
        Vec::new(),
        Vec::new(),
    );

    let budgets: Vec<(String, usize)> = journals.iter().map(|j| (run_name(j), j.header.budget_runs)).collect();
    let budget_values = unique(budgets.iter().map(|b| b.1));
    push(
        "Tuning budget",
        match budget_values.as_slice() {
            [] => Answer::Unanswered,
            [b] => Answer::Text(format!("{b} full training runs per repetition")),
            _ => Answer::Text(
                budgets.iter().map(|(n, b)| format!("{n}: {b} full training runs")).collect::<Vec<_>>().join("; "),
            ),
        },
        Vec::new(),
        Vec::new(),
    );
    push(
        "Every tuned method had the same budget",
        if budgets.is_empty() {
            Answer::Unanswered
        } else {
            Answer::flag(budget_values.len() == 1, || {
                budgets.iter().map(|(n, b)| format!("{n}: {b}")).collect::<Vec<_>>().join(", ")
            })
        },
        Vec::new(),
        Vec::new(),
    );
    push(
        "Hardware is comparable across tuning runs (time budgets only)",
        if journals.is_empty() {
            Answer::Unanswered
        } else {
            Answer::NotApplicable("budgets are counted in training steps, not time".into())
        },
        Vec::new(),
        Vec::new(),
    );

    let incomplete: Vec<String> = journals.iter().filter(|j| !j.is_complete()).map(run_name).collect();
    let failed: Vec<String> = complete
        .iter()
        .flat_map(|j| j.repetitions().filter(|r| r.failure.is_some()).map(move |r| format!("{} repetition {}", run_name(j), r.rep)))
        .collect();
    push(
        "All reported methods were tuned exactly as described",
        if journals.is_empty() || !incomplete.is_empty() {
            Answer::Unanswered
        } else {
            Answer::flag(failed.is_empty(), || format!("failed: {}", failed.join(", ")))
        },
        Vec::new(),
        Vec::new(),
    );

    let tuning_lists = unique(journals.iter().map(|j| j.header.seed_plan.tuning.clone()));
    push(
        "Tuning seeds",
        match tuning_lists.as_slice() {
            [] => Answer::Unanswered,
            [s] => Answer::Text(format!("{} tuning seeds: {}", s.len(), seed_list(s))),
            _ => Answer::Text(
                journals
                    .iter()
                    .map(|j| format!("{}: {}", run_name(j), seed_list(&j.header.seed_plan.tuning)))
                    .collect::<Vec<_>>()
                    .join("; "),
            ),
        },
        Vec::new(),
        Vec::new(),
    );
    let test_lists = unique(journals.iter().map(|j| j.header.seed_plan.test.clone()));
    push(
        "Test seeds",
        match test_lists.as_slice() {
            [] => Answer::Unanswered,
            [s] => Answer::Text(format!("{} test seeds: {}", s.len(), seed_list(s))),
            _ => Answer::Text(
                journals
                    .iter()
                    .map(|j| format!("{}: {}", run_name(j), seed_list(&j.header.seed_plan.test)))
                    .collect::<Vec<_>>()
                    .join("; "),
            ),
        },
        Vec::new(),
        Vec::new(),
    );
    push(
        "All results are reported on the test seeds",
        finished(combine(&all, reported_on_test_seeds)),
        Vec::new(),
        Vec::new(),
    );

    let mut incumbents = Vec::new();
    for j in &complete {
        for rep in j.repetitions() {
            match (&rep.incumbent, &rep.failure) {
                (Some(c), None) => incumbents.push(format!("{} repetition {}: {c}", run_name(j), rep.rep)),
                (_, Some(f)) => incumbents.push(format!("{} repetition {}: failed ({f})", run_name(j), rep.rep)),
                _ => {}
            }
            if let Some(s) = &rep.schedule {
                for (f, c) in &s.breakpoints {
                    incumbents.push(format!("  from {:.0}% of training: {c}", f * 100.0));
                }
            }
        }
    }
    push(
        "Final incumbent configurations",
        if all_complete { Answer::Text(String::new()) } else { Answer::Unanswered },
        Vec::new(),
        if all_complete { incumbents } else { Vec::new() },
    );

    push(
        "Code for reproducing the experiments",
        meta.code_link.clone().map_or(Answer::Unanswered, Answer::Text),
        Vec::new(),
        Vec::new(),
    );
    push("The code includes the tuning process", meta_flag(meta.code_includes_tuning), Vec::new(), Vec::new());
    push(
        "An exact software environment is bundled with the code",
        meta_flag(meta.environment_bundled),
        Vec::new(),
        Vec::new(),
    );
    let hardware = meta
        .hardware
        .clone()
        .or_else(|| journals.iter().find_map(|j| j.header.hardware.clone()));
    push("Hardware used", hardware.map_or(Answer::Unanswered, Answer::Text), Vec::new(), Vec::new());

    ChecklistReport { items }
}

/// Whether every trial in `j` kept tuning and test seeds apart.
pub fn seeds_disjoint(j: &Loaded) -> bool {
    trained_on_tuning_seeds(j).is_ok() && reported_on_test_seeds(j).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Hyperparameter;

    #[test]
    fn range_notation_for_each_kind() {
        let ps = [
            Hyperparameter::continuous("a", 0.0, 1.0).unwrap(),
            Hyperparameter::log_continuous("b", 1e-6, 0.1).unwrap(),
            Hyperparameter::integer("c", 5, 20).unwrap(),
            Hyperparameter::categorical("d", &["16", "32"]).unwrap(),
        ];
        let out: Vec<String> = ps.iter().map(|p| range_notation(&p.kind)).collect();
        assert_eq!(out, vec!["(0.0, 1.0)", "log((1e-6, 0.1))", "[5, 20]", "{16, 32}"]);
    }

    #[test]
    fn no_journals_leaves_everything_open() {
        let report = emit_checklist(&[], &ChecklistMeta::default());
        assert_eq!(report.items.len(), 17);
        for item in &report.items {
            assert_eq!(item.answer, Answer::Unanswered, "item {}", item.number);
        }
        assert!(report.render().contains("17. "));
    }
}
