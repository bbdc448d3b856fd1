mod tables;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use evgame::inner::InnerOptions;
use evgame::metrics::{expected_outcome, savings_report, uncoordinated_baseline, SavingsReport};
use evgame::outer::{iterate_to_equilibrium, BehaviorModel, MixedStrategy, OuterOptions, OuterSolution};
use evgame::scenario::{generate_instance, validate, GenerationConfig, Scenario};
use evgame::tensor::{cache_load, PayoffTensor, TensorBuilder, TensorOptions};

pub const SOLUTION_FORMAT: &str = "evgame-solution/1";

#[derive(Parser)]
#[command(name = "evgame", version, about = "Two-stage EV aggregator charging game")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario file from a preset or a generation config.
    Generate(GenerateArgs),
    /// Build or resume the payoff tensor cache for a scenario.
    Tensor(TensorArgs),
    /// Solve the start-time game on a complete tensor.
    Solve(SolveArgs),
    /// Write savings and expected-load tables for one or more solutions.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Built-in generation config: paper-default or small.
    #[arg(long, default_value = "paper-default", conflicts_with = "config")]
    preset: String,
    /// JSON generation config (overrides --preset).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TensorArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = InnerOptions::default().eps_alg)]
    eps_alg: f64,
    #[arg(long, default_value_t = InnerOptions::default().max_sweeps)]
    max_sweeps: usize,
    /// Profiles per parallel batch (cache is flushed after each).
    #[arg(long, default_value_t = TensorOptions::default().chunk_size)]
    chunk_size: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Model {
    Eut,
    Pt,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, value_enum, default_value_t = Model::Eut)]
    model: Model,
    /// Prelec parameter: one value for everyone or a comma-separated vector.
    #[arg(long, default_value = "1.0")]
    alpha: String,
    /// Solve PT for alpha = step, 2 step, ..., 1 and write one CSV row each.
    #[arg(long, conflicts_with = "alpha")]
    alpha_sweep: Option<f64>,
    #[arg(long, default_value_t = OuterOptions::default().beta)]
    beta: f64,
    /// Certified epsilon at which to stop (default 1e-3 x median |F|; 0 runs all iterations).
    #[arg(long)]
    eps_target: Option<f64>,
    #[arg(long, default_value_t = OuterOptions::default().max_iters)]
    max_iters: usize,
    /// Keep every iterate in the solution file.
    #[arg(long)]
    trajectory: bool,
    /// Solution JSON (or CSV in sweep mode).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Solution files; the first is the reference column.
    #[arg(long = "solution", required = true)]
    solutions: Vec<PathBuf>,
    /// Output directory for the tables.
    #[arg(long)]
    out: PathBuf,
}

/// Solution file: the equilibrium plus the metrics computed from it.
#[derive(Serialize, Deserialize)]
pub struct SolutionFile {
    pub format: String,
    pub scenario_digest: String,
    pub solution: OuterSolution,
    pub report: SavingsReport,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

const EXIT_VALIDATION: u8 = 3;
const EXIT_CONVERGENCE: u8 = 4;
const EXIT_IO: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    use evgame::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::IncompleteTensor { .. } => EXIT_CONVERGENCE,
                E::Io(_) | E::DigestMismatch { .. } | E::CacheFormat(_) => EXIT_IO,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.is::<UsageError>() || cause.is::<serde_json::Error>() {
            return EXIT_VALIDATION;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Tensor(a) => cmd_tensor(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let scenario = Scenario::load(path).with_context(|| format!("reading {}", path.display()))?;
    validate(&scenario).into_result()?;
    Ok(scenario)
}

fn load_complete_tensor(path: &Path, scenario: &Scenario) -> Result<PayoffTensor> {
    if !path.exists() {
        bail!(evgame::Error::IncompleteTensor {
            missing: scenario.start_set_sizes().iter().product(),
            total: scenario.start_set_sizes().iter().product(),
        });
    }
    let tensor = cache_load(path, scenario).with_context(|| format!("reading {}", path.display()))?;
    if !tensor.is_complete() {
        bail!(evgame::Error::IncompleteTensor {
            missing: tensor.num_profiles() - tensor.num_filled(),
            total: tensor.num_profiles(),
        });
    }
    Ok(tensor)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<GenerationConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => GenerationConfig::preset(&args.preset)
            .ok_or_else(|| usage(format!("unknown preset {:?}", args.preset)))?,
    };
    let scenario = generate_instance(&config, args.seed)?;
    scenario
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;

    println!("scenario_digest={}", scenario.digest());
    println!("aggregator  min_slots  start_slots");
    for agg in &scenario.aggregators {
        println!(
            "{:>10}  {:>9}  {{1,...,{}}}",
            agg.id + 1,
            agg.min_slots,
            agg.latest_start(scenario.horizon_slots)
        );
    }
    println!("profiles={}", scenario.start_set_sizes().iter().product::<usize>());
    Ok(())
}

fn cmd_tensor(args: TensorArgs) -> Result<()> {
    if args.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let scenario = load_scenario(&args.scenario)?;
    let options = TensorOptions {
        inner: InnerOptions {
            eps_alg: args.eps_alg,
            max_sweeps: args.max_sweeps,
            ..InnerOptions::default()
        },
        workers: args.workers,
        chunk_size: args.chunk_size,
    };
    let started = Instant::now();
    let build = TensorBuilder::new(&scenario)
        .options(options)
        .cache(&args.cache)
        .on_progress(|done, total| eprintln!("tensor: {done}/{total}"))
        .build()?;
    let tensor = &build.tensor;
    println!("scenario_digest={}", tensor.scenario_digest);
    println!("profiles={}", tensor.num_profiles());
    println!("computed={}", build.computed);
    println!("elapsed_s={:.2}", started.elapsed().as_secs_f64());
    if !build.uncertified.is_empty() {
        for p in &build.uncertified {
            eprintln!("uncertified start profile {:?}", p.0);
        }
        bail!(evgame::Error::IncompleteTensor {
            missing: tensor.num_profiles() - tensor.num_filled(),
            total: tensor.num_profiles(),
        });
    }
    println!("tensor_digest={}", tensor.digest());
    Ok(())
}

fn parse_alphas(text: &str, n: usize) -> Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| usage(format!("bad alpha {v:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        len if len == n => Ok(values),
        len => Err(usage(format!("{len} alpha values for {n} aggregators"))),
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("--beta {beta} outside (0,1)")))
    }
}

struct Solved {
    solution: OuterSolution,
    report: SavingsReport,
}

fn solve_one(
    scenario: &Scenario,
    tensor: &PayoffTensor,
    table: &evgame::PayoffTable,
    model: &BehaviorModel,
    options: &OuterOptions,
) -> Result<Solved> {
    let init: Vec<MixedStrategy> = table.dims().iter().map(|&d| MixedStrategy::uniform(d)).collect();
    let solution = iterate_to_equilibrium(table, &init, model, options)?;
    if !solution.converged {
        eprintln!(
            "warning: epsilon {:.3e} above target {:.3e} after {} iterations",
            solution.epsilon, solution.eps_target, solution.iterations
        );
    }
    let baseline = uncoordinated_baseline(scenario)?;
    let outcome = expected_outcome(scenario, tensor, &solution)?;
    let report = savings_report(&baseline, &outcome)?;
    Ok(Solved { solution, report })
}

fn cmd_solve(args: SolveArgs) -> Result<()> {
    check_beta(args.beta)?;
    if let Some(eps) = args.eps_target {
        if !(eps >= 0.0) {
            return Err(usage(format!("--eps-target {eps} must be nonnegative")));
        }
    }
    let scenario = load_scenario(&args.scenario)?;
    let tensor = load_complete_tensor(&args.cache, &scenario)?;
    let table = tensor.table()?;
    let n = scenario.num_aggregators();
    let options = OuterOptions {
        beta: args.beta,
        max_iters: args.max_iters,
        eps_target: args.eps_target,
        record_trajectory: args.trajectory,
    };

    if let Some(step) = args.alpha_sweep {
        if !(step > 0.0 && step <= 1.0) {
            return Err(usage(format!("--alpha-sweep {step} outside (0,1]")));
        }
        let count = (1.0 / step + 1e-9).floor() as usize;
        let mut rows = Vec::with_capacity(count);
        for k in 1..=count {
            let alpha = if k == count { 1.0 } else { k as f64 * step };
            let model = BehaviorModel::pt_uniform(alpha, n)?;
            let solved = solve_one(&scenario, &tensor, &table, &model, &options)?;
            eprintln!(
                "alpha={alpha:.4} epsilon={:.3e} par_reduction={:.3}%",
                solved.solution.epsilon, solved.report.par_reduction_pct
            );
            rows.push((alpha, solved));
        }
        let sweep: Vec<_> = rows.iter().map(|(a, s)| (*a, &s.solution, &s.report)).collect();
        tables::write_sweep(&args.out, &scenario.digest(), &tensor.digest(), &sweep)?;
        println!("wrote {}", args.out.display());
        return Ok(());
    }

    let model = match args.model {
        Model::Eut => BehaviorModel::eut(n),
        Model::Pt => BehaviorModel::pt(parse_alphas(&args.alpha, n)?)?,
    };
    let solved = solve_one(&scenario, &tensor, &table, &model, &options)?;
    let file = SolutionFile {
        format: SOLUTION_FORMAT.to_string(),
        scenario_digest: scenario.digest(),
        solution: solved.solution,
        report: solved.report,
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;

    let s = &file.solution;
    println!("scenario_digest={}", file.scenario_digest);
    println!("tensor_digest={}", s.tensor_digest);
    println!(
        "epsilon={:.6e} target={:.6e} iterations={} converged={}",
        s.epsilon, s.eps_target, s.iterations, s.converged
    );
    tables::print_summary(&file);
    Ok(())
}

pub fn read_solution(path: &Path) -> Result<SolutionFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: SolutionFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if file.format != SOLUTION_FORMAT {
        return Err(usage(format!(
            "{}: unsupported solution format {:?}",
            path.display(),
            file.format
        )));
    }
    Ok(file)
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let scenario = load_scenario(&args.scenario)?;
    let tensor = load_complete_tensor(&args.cache, &scenario)?;
    let baseline = uncoordinated_baseline(&scenario)?;
    let mut columns = Vec::new();
    for path in &args.solutions {
        let file = read_solution(path)?;
        if file.scenario_digest != tensor.scenario_digest {
            bail!(evgame::Error::DigestMismatch {
                expected: tensor.scenario_digest.clone(),
                found: file.scenario_digest,
            });
        }
        let outcome = expected_outcome(&scenario, &tensor, &file.solution)
            .with_context(|| format!("evaluating {}", path.display()))?;
        let report = savings_report(&baseline, &outcome)?;
        columns.push(tables::Column {
            label: tables::model_label(&file.solution.model),
            solution_path: path.display().to_string(),
            outcome,
            report,
        });
    }
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let written = tables::write_report(&args.out, &scenario.grid.base_load_kwh, &baseline, &mut columns)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
