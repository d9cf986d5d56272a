use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use autotune_core::dehb::DehbSettings;
use autotune_core::export::{self, ExportError, ExportKind, JOURNAL_FILE};
use autotune_core::journal::{Journal, JournalError};
use autotune_core::objectives::{EvalError, Objective, ObjectiveSpec};
use autotune_core::pbt::{ExploreMode, GpTarget, PbtSettings};
use autotune_core::protocol::{
    run_protocol, ChecklistMeta, IncumbentReport, MethodSpec, PlanError, ProtocolConfig, RunOptions, SeedPlan,
};
use autotune_core::runner::{RunError, Runner};
use autotune_core::space::{ConfigSpace, Configuration, PerturbSettings, SpaceError};
use autotune_core::sweeps::{run_sweep, SweepSpec};

const EXIT_USAGE: u8 = 2;
const EXIT_OBJECTIVE: u8 = 3;
const EXIT_JOURNAL: u8 = 4;

#[derive(Parser)]
#[command(name = "autotune", version, about = "Hyperparameter tuning with separate tuning and test seeds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tune, then test the incumbent of every repetition.
    Tune {
        #[command(subcommand)]
        method: TuneMethod,
    },
    /// Continue an interrupted run from its journal.
    Resume(ResumeArgs),
    /// Print a report over one or more run directories.
    Report {
        kind: ReportKind,
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[command(flatten)]
        meta: MetaArgs,
    },
    /// Write an export file under DIR/exports.
    Export {
        dir: PathBuf,
        /// trials, incumbents, ranks or checklist
        kind: String,
        #[command(flatten)]
        meta: MetaArgs,
    },
    /// Evaluate one hyperparameter over a list of values and seeds.
    Sweep(SweepArgs),
}

#[derive(Subcommand)]
enum TuneMethod {
    /// Random search
    Rs {
        #[command(flatten)]
        common: CommonArgs,
        /// Configurations per repetition (default: the budget in full runs)
        #[arg(long)]
        n_configs: Option<usize>,
    },
    /// Differential evolution with successive halving
    Dehb {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 1.9)]
        eta: f64,
        #[arg(long, default_value_t = 0.01)]
        min_budget: f64,
        /// Number of iterations (default: as many as the budget allows)
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        mutation_factor: f64,
        #[arg(long, default_value_t = 0.5)]
        crossover_prob: f64,
    },
    /// Population-based training and its GP variants
    Pbt {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        pbt: PbtArgs,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Search space file; defaults to the objective's built-in space
    #[arg(long)]
    space: Option<PathBuf>,
    /// Dimension of the built-in space for synthetic objectives
    #[arg(long, default_value_t = 2)]
    dimension: usize,
    /// NAME[:key=value,...] or cmd:<shell command>
    #[arg(long)]
    objective: String,
    /// Tuning budget per repetition, in full-run equivalents
    #[arg(long, default_value_t = 16)]
    budget_runs: usize,
    #[arg(long, default_value = "0..4", value_parser = parse_seeds)]
    tuning_seeds: SeedList,
    #[arg(long, default_value = "5..14", value_parser = parse_seeds)]
    test_seeds: SeedList,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Parent of the run directory
    #[arg(long, env = "AUTOTUNE_RUN_DIR", default_value = "run")]
    out: PathBuf,
    /// Evaluate one trial at a time
    #[arg(long)]
    deterministic: bool,
    /// Free-form hardware description stored in the journal
    #[arg(long)]
    hardware: Option<String>,
    /// Stop after this many new trials, as if the process had crashed
    #[arg(long, hide = true)]
    interrupt_after: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExploreArg {
    Perturb,
    Gp,
}

#[derive(Clone, Copy, ValueEnum)]
enum GpTargetArg {
    CostChange,
    Cost,
}

#[derive(Args)]
struct PbtArgs {
    #[arg(long, value_enum, default_value = "perturb")]
    explore: ExploreArg,
    /// Population size (default: budget minus warmstart runs)
    #[arg(long)]
    population: Option<usize>,
    #[arg(long, default_value_t = 20)]
    intervals: usize,
    #[arg(long, default_value_t = 0.125)]
    quantile: f64,
    #[arg(long, default_value_t = 1.0)]
    explore_prob: f64,
    #[arg(long, default_value_t = 0)]
    warmstart_runs: usize,
    /// Intervals without improvement before the GP history is dropped
    #[arg(long, num_args = 0..=1, default_missing_value = "3")]
    restart_patience: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    #[arg(long, value_enum, default_value = "cost-change")]
    gp_target: GpTargetArg,
    #[arg(long, default_value_t = 1.2)]
    factor_up: f64,
    #[arg(long, default_value_t = 0.8)]
    factor_down: f64,
    #[arg(long, default_value_t = 0.25)]
    resample_prob: f64,
}

#[derive(Args)]
struct ResumeArgs {
    dir: PathBuf,
    /// Space file to check against the journal's digest
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    deterministic: bool,
    #[arg(long, hide = true)]
    interrupt_after: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Checklist,
    Ranks,
    Incumbents,
}

#[derive(Args, Default)]
struct MetaArgs {
    /// Name and version of the tuning package
    #[arg(long)]
    package: Option<String>,
    #[arg(long)]
    code_link: Option<String>,
    #[arg(long)]
    code_includes_tuning: Option<bool>,
    #[arg(long)]
    environment_bundled: Option<bool>,
    #[arg(long)]
    hardware: Option<String>,
}

impl MetaArgs {
    fn meta(&self) -> ChecklistMeta {
        ChecklistMeta {
            package: self.package.clone(),
            code_link: self.code_link.clone(),
            code_includes_tuning: self.code_includes_tuning,
            environment_bundled: self.environment_bundled,
            hardware: self.hardware.clone(),
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    dimension: usize,
    #[arg(long)]
    objective: String,
    #[arg(long)]
    param: String,
    /// Comma-separated values
    #[arg(long)]
    values: String,
    #[arg(long, default_value = "0..4", value_parser = parse_seeds)]
    seeds: SeedList,
    #[arg(long, default_value_t = 1.0)]
    budget: f64,
    /// Base configuration as name=value pairs; other parameters sit at the
    /// centre of the space
    #[arg(long)]
    base: Option<String>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Directory for the CSV
    #[arg(long, env = "AUTOTUNE_RUN_DIR", default_value = "run")]
    out: PathBuf,
}

#[derive(Debug, Clone)]
struct SeedList(Vec<u64>);

/// `0,1,2`, `5..14` (inclusive) or a mix such as `0,3..5`.
fn parse_seeds(text: &str) -> Result<SeedList, String> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once("..") {
            let hi = hi.strip_prefix('=').unwrap_or(hi);
            let lo: u64 = lo.trim().parse().map_err(|_| format!("bad seed `{lo}`"))?;
            let hi: u64 = hi.trim().parse().map_err(|_| format!("bad seed `{hi}`"))?;
            if hi < lo {
                return Err(format!("empty seed range `{part}`"));
            }
            seeds.extend(lo..=hi);
        } else {
            seeds.push(part.parse().map_err(|_| format!("bad seed `{part}`"))?);
        }
    }
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(SeedList(seeds))
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    Usage(message.into()).into()
}

fn load_space(path: Option<&Path>, objective: &ObjectiveSpec, dimension: usize) -> Result<ConfigSpace> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read space file {}", p.display()))?;
            Ok(text.parse::<ConfigSpace>().with_context(|| format!("in space file {}", p.display()))?)
        }
        None => match objective {
            ObjectiveSpec::ExternalCommand { .. } => Err(usage("an external objective needs --space")),
            _ => Ok(objective.default_space(dimension)),
        },
    }
}

fn new_run_dir(out: &Path, label: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let mut dir = out.join(format!("{stamp}-{label}"));
    let mut n = 2;
    while dir.exists() {
        dir = out.join(format!("{stamp}-{label}-{n}"));
        n += 1;
    }
    Ok(dir)
}

fn print_report(report: &IncumbentReport) {
    println!("method {} on {}", report.method, report.objective);
    for (rep, stats) in report.repetitions.iter().zip(report.test_stats()) {
        match (stats, &rep.incumbent) {
            (Some((mean, std)), Some(config)) => {
                println!("  rep {}: test {mean:.6} ± {std:.6}  spend {:.3}  {config}", rep.rep, rep.spend)
            }
            _ => println!("  rep {}: failed ({})", rep.rep, rep.failure.as_deref().unwrap_or("unknown")),
        }
    }
    match (report.mean, report.std) {
        (Some(m), Some(s)) => println!("  test cost {m:.6} ± {s:.6}"),
        _ => println!("  no repetition produced a tested incumbent"),
    }
    if report.warning() {
        println!("  warning: {} repetition(s) failed and are excluded", report.failed_repetitions);
    }
}

fn finish_run(report: &IncumbentReport) -> Result<()> {
    print_report(report);
    if report.mean.is_none() {
        return Err(RunError::NoIncumbent.into());
    }
    Ok(())
}

fn method_spec(method: &TuneMethod) -> Result<MethodSpec> {
    Ok(match method {
        TuneMethod::Rs { n_configs, .. } => MethodSpec::RandomSearch { n_configs: *n_configs },
        TuneMethod::Dehb { eta, min_budget, iterations, mutation_factor, crossover_prob, .. } => {
            MethodSpec::Dehb(DehbSettings {
                eta: *eta,
                min_budget: *min_budget,
                iterations: *iterations,
                f: *mutation_factor,
                cr: *crossover_prob,
            })
        }
        TuneMethod::Pbt { pbt, .. } => MethodSpec::Pbt(PbtSettings {
            population: pbt.population,
            intervals: pbt.intervals,
            quantile: pbt.quantile,
            explore: match pbt.explore {
                ExploreArg::Perturb => ExploreMode::Perturb,
                ExploreArg::Gp => ExploreMode::Gp,
            },
            explore_prob: pbt.explore_prob,
            warmstart_runs: pbt.warmstart_runs,
            restart_patience: pbt.restart_patience,
            kappa: pbt.kappa,
            perturb: PerturbSettings {
                factor_up: pbt.factor_up,
                factor_down: pbt.factor_down,
                resample_prob: pbt.resample_prob,
            },
            gp_target: match pbt.gp_target {
                GpTargetArg::CostChange => GpTarget::CostChange,
                GpTargetArg::Cost => GpTarget::Cost,
            },
        }),
    })
}

fn tune(method: TuneMethod) -> Result<()> {
    let spec = method_spec(&method)?;
    let common = match &method {
        TuneMethod::Rs { common, .. } | TuneMethod::Dehb { common, .. } | TuneMethod::Pbt { common, .. } => common,
    };
    let objective: ObjectiveSpec = common.objective.parse().map_err(|e: EvalError| usage(e.to_string()))?;
    let space = load_space(common.space.as_deref(), &objective, common.dimension)?;
    let mut cfg = ProtocolConfig::new(spec, space, objective);
    cfg.seed_plan = SeedPlan::new(common.tuning_seeds.0.clone(), common.test_seeds.0.clone())?;
    cfg.repetitions = common.repetitions;
    cfg.budget_runs = common.budget_runs;
    cfg.rng_seed = common.rng_seed;
    cfg.hardware = common.hardware.clone();
    cfg.validate()?;

    let dir = new_run_dir(&common.out, cfg.method.label())?;
    let journal = Journal::create(&dir.join(JOURNAL_FILE), cfg.header())?;
    println!("run directory: {}", dir.display());
    let options = RunOptions {
        workers: if common.deterministic { 1 } else { common.workers },
        interrupt_after: common.interrupt_after,
        work_dir: Some(dir.join("work")),
    };
    let (report, _) = run_protocol(&cfg, journal, Vec::new(), &options)?;
    finish_run(&report)
}

fn resume(args: ResumeArgs) -> Result<()> {
    let path = args.dir.join(JOURNAL_FILE);
    let (journal, loaded) = Journal::open(&path)?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    let cfg = ProtocolConfig::from_header(&loaded.header);
    if let Some(space_path) = &args.space {
        let space = load_space(Some(space_path), &cfg.objective, 0)?;
        journal.check_space(&space)?;
    }
    if loaded.is_complete() {
        println!("run already complete; no new trials");
        print_report(&export::incumbent_report(&loaded));
        return Ok(());
    }
    let options = RunOptions {
        workers: if args.deterministic { 1 } else { args.workers },
        interrupt_after: args.interrupt_after,
        work_dir: Some(args.dir.join("work")),
    };
    let (report, _) = run_protocol(&cfg, journal, loaded.records, &options)?;
    finish_run(&report)
}

fn report(kind: ReportKind, dirs: &[PathBuf], meta: &MetaArgs) -> Result<()> {
    let runs = dirs
        .iter()
        .map(|d| export::load_run(d).with_context(|| format!("reading {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    match kind {
        ReportKind::Checklist => print!("{}", export::render(ExportKind::Checklist, &runs, &meta.meta())?),
        ReportKind::Ranks => print!("{}", export::ranks(&runs)?.render()),
        ReportKind::Incumbents => {
            for run in &runs {
                print_report(&export::incumbent_report(run));
            }
        }
    }
    Ok(())
}

fn parse_base(space: &ConfigSpace, text: Option<&str>) -> Result<Configuration> {
    let mut config = space.from_unit(&vec![0.5; space.dimension()])?;
    for pair in text.unwrap_or("").split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = pair.split_once('=').ok_or_else(|| usage(format!("expected name=value, got `{pair}`")))?;
        let param = space.get(name.trim()).ok_or_else(|| usage(format!("unknown hyperparameter `{name}`")))?;
        config.insert(&param.name, param.parse_value(value)?);
    }
    Ok(config)
}

fn sweep(args: SweepArgs) -> Result<()> {
    let objective: ObjectiveSpec = args.objective.parse().map_err(|e: EvalError| usage(e.to_string()))?;
    let space = load_space(args.space.as_deref(), &objective, args.dimension)?;
    let param = space.get(&args.param).ok_or_else(|| usage(format!("unknown hyperparameter `{}`", args.param)))?;
    let values = args
        .values
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| param.parse_value(v))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = SweepSpec {
        base: parse_base(&space, args.base.as_deref())?,
        param: args.param.clone(),
        values,
        seeds: args.seeds.0,
        budget: args.budget,
    };
    let mut runner = Runner::in_memory(Objective::new(objective, space)?);
    runner.set_workers(args.workers.max(1));
    let table = run_sweep(&mut runner, &spec)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let path = args.out.join(table.file_name());
    std::fs::write(&path, table.to_csv()).with_context(|| format!("cannot write {}", path.display()))?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Tune { method } => tune(method),
        Command::Resume(args) => resume(args),
        Command::Report { kind, dirs, meta } => report(kind, &dirs, &meta),
        Command::Export { dir, kind, meta } => {
            let kind: ExportKind = kind.parse()?;
            let path = export::export(&dir, kind, &meta.meta())?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Sweep(args) => sweep(args),
    }
}

fn journal_code(e: &JournalError) -> Option<u8> {
    match e {
        JournalError::Io { .. } | JournalError::Append { .. } => None,
        _ => Some(EXIT_JOURNAL),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() || cause.is::<SpaceError>() || cause.is::<PlanError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<RunError>() {
            match e {
                RunError::Invalid(_) | RunError::Space(_) => return EXIT_USAGE,
                RunError::Eval(_) | RunError::NoIncumbent | RunError::MissingCheckpoint(_) => return EXIT_OBJECTIVE,
                RunError::Divergence { .. } => return EXIT_JOURNAL,
                RunError::Journal(j) => {
                    if let Some(code) = journal_code(j) {
                        return code;
                    }
                }
                RunError::Interrupted { .. } => return 1,
            }
        }
        if let Some(e) = cause.downcast_ref::<JournalError>() {
            if let Some(code) = journal_code(e) {
                return code;
            }
        }
        if let Some(e) = cause.downcast_ref::<ExportError>() {
            match e {
                ExportError::UnknownKind(_) => return EXIT_USAGE,
                ExportError::Journal(j) => {
                    if let Some(code) = journal_code(j) {
                        return code;
                    }
                }
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Spec(_) | EvalError::Space(_) | EvalError::Budget(_) => EXIT_USAGE,
                _ => EXIT_OBJECTIVE,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
