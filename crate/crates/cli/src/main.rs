use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptive_bp::autodiff::{load_checkpoint, save_checkpoint};
use adaptive_bp::config::RunConfig;
use adaptive_bp::graph::ModelGraph;
use adaptive_bp::importance::{early_stop_depth, evaluate_importance, ImportanceVector};
use adaptive_bp::model::{build_toy_decoder, Batch};
use adaptive_bp::optimizer::Optimizer;
use adaptive_bp::profiler::{profile_flops, BatchShape, FlopsProfile};
use adaptive_bp::selector::{dp_select, plan_json, quantize, SelectOptions};
use adaptive_bp::trainer::{train, train_from, TrainReport};
use adaptive_bp::verify::{self, Check, EndToEnd};
use adaptive_bp::Error;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

/// Selective backpropagation under a FLOPs budget.
#[derive(Parser)]
#[command(name = "adaptive-bp", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value by dotted path, e.g. `selector.rho=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Sets both `model.seed` and `task.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the per-tensor FLOPs table.
    Profile {
        /// Profile this graph instead of the configured toy decoder.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Select tensors for one batch under the configured budget.
    Plan {
        #[arg(long, requires = "importance")]
        graph: Option<PathBuf>,
        /// Raw per-tensor importance as a JSON array in backprop order.
        #[arg(long)]
        importance: Option<PathBuf>,
    },
    /// Train with the configured strategy.
    Train {
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run the oracle checks; exits with 4 if any fails.
    Verify {
        /// Also run the training-based checks (several minutes).
        #[arg(long)]
        all: bool,
    },
    /// Train once per `run.rhos` entry and tabulate the results.
    Sweep,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{context}: {source}")]
    Engine { context: &'static str, source: Error },
    #[error("{0} check(s) failed")]
    Verify(usize),
}

fn ctx(context: &'static str) -> impl Fn(Error) -> CliError {
    move |source| CliError::Engine { context, source }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Verify(_) => 4,
            CliError::Engine { source, .. } => match source {
                Error::Config { .. } | Error::Io { .. } | Error::Json { .. } | Error::Input(_) => 2,
                Error::InfeasibleBudget { .. } => 3,
                Error::Diverged { .. } | Error::NonFinite { .. } => 5,
                Error::Profile(_) | Error::TooLarge { .. } => 1,
            },
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(common.overrides.iter().map(String::as_str))?;
    if let Some(seed) = common.seed {
        config.model.seed = seed;
        config.task.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn batch_shape(config: &RunConfig) -> BatchShape {
    BatchShape {
        batch: config.run.batch_size,
        seq: config.model.n,
    }
}

fn run_profile(common: &Common, graph_path: Option<&Path>) -> CliResult {
    let config = load_config(common).map_err(ctx("profile"))?;
    let graph = match graph_path {
        Some(path) => ModelGraph::load(path),
        None => build_toy_decoder(&config.model).map(|(g, _)| g),
    }
    .map_err(ctx("profile"))?;
    let profile = profile_flops(&graph, batch_shape(&config)).map_err(ctx("profile"))?;
    create_dir(&common.out).map_err(ctx("profile"))?;
    profile
        .save(&graph, &common.out.join("profile.csv"), &common.out.join("profile.json"))
        .map_err(ctx("profile"))?;
    std::fs::write(common.out.join("graph.json"), graph.to_json() + "\n")
        .map_err(|source| Error::Io {
            path: common.out.join("graph.json"),
            source,
        })
        .map_err(ctx("profile"))?;
    println!(
        "{} tensors, T_fp = {}, T_full = {} (T_fp/T_full = {:.3})",
        graph.len(),
        profile.t_fp,
        profile.t_full,
        profile.t_fp as f64 / profile.t_full as f64
    );
    Ok(())
}

fn read_importance(path: &Path) -> Result<Vec<f64>, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

fn run_plan(common: &Common, graph_path: Option<&Path>, importance_path: Option<&Path>) -> CliResult {
    let config = load_config(common).map_err(ctx("plan"))?;
    let rho = config.selector.rho;
    let (graph, profile, iv): (ModelGraph, FlopsProfile, ImportanceVector) = match graph_path {
        Some(path) => {
            let graph = ModelGraph::load(path).map_err(ctx("plan"))?;
            let profile = profile_flops(&graph, batch_shape(&config)).map_err(ctx("plan"))?;
            let raw = read_importance(importance_path.expect("clap requires --importance")).map_err(ctx("plan"))?;
            (graph, profile, ImportanceVector::from_raw(raw))
        }
        None => {
            let (graph, params) = build_toy_decoder(&config.model).map_err(ctx("plan"))?;
            let profile = profile_flops(&graph, batch_shape(&config)).map_err(ctx("plan"))?;
            let iv = match importance_path {
                Some(path) => ImportanceVector::from_raw(read_importance(path).map_err(ctx("plan"))?),
                None => {
                    let batch: Batch = config
                        .task
                        .batch(0, config.run.batch_size, config.model.vocab, config.model.n)
                        .into();
                    let optimizer = Optimizer::new(config.optimizer, &params);
                    let depth = early_stop_depth(&profile, rho).map_err(ctx("plan"))?;
                    evaluate_importance(&graph, &params, &batch, &optimizer, depth)
                        .map_err(ctx("plan"))?
                        .0
                }
            };
            (graph, profile, iv)
        }
    };
    if iv.len() != graph.len() {
        return Err(ctx("plan")(Error::Input(format!(
            "{} importance values for {} tensors",
            iv.len(),
            graph.len()
        ))));
    }
    let qp = quantize(&profile, config.selector.t_q).map_err(ctx("plan"))?;
    let options = SelectOptions {
        convention: config.selector.dy_convention,
        prune: config.selector.prune,
    };
    let plan = dp_select(&iv, &profile, &qp, rho, options).map_err(ctx("plan"))?;
    create_dir(&common.out).map_err(ctx("plan"))?;
    write_json(&common.out.join("plan.json"), &plan_json(&plan, &graph, &profile)).map_err(ctx("plan"))?;
    println!(
        "{} of {} tensors selected, predicted reduction {:.1}%: {}",
        plan.mask.count(),
        graph.len(),
        100.0 * plan.reduction(&profile),
        plan.mask.forward_order_string()
    );
    Ok(())
}

fn summarize(report: &TrainReport) -> String {
    format!(
        "{:?} rho {}: eval accuracy {:.3}, loss {:.4}, FLOPs reduction {:.1}%, max step {:.3} T_full",
        report.strategy,
        report.rho,
        report.final_eval_accuracy,
        report.final_eval_loss,
        100.0 * report.realized_reduction,
        report.max_step_ratio
    )
}

fn run_train(common: &Common, init: Option<&Path>) -> CliResult {
    let config = load_config(common).map_err(ctx("train"))?;
    let outcome = match init {
        Some(path) => {
            let (graph, _) = build_toy_decoder(&config.model).map_err(ctx("train"))?;
            let params = load_checkpoint(&graph, path).map_err(ctx("train"))?;
            train_from(&config, graph, params)
        }
        None => train(&config),
    }
    .map_err(ctx("train"))?;
    create_dir(&common.out).map_err(ctx("train"))?;
    outcome.report.save(&common.out).map_err(ctx("train"))?;
    save_checkpoint(&outcome.graph, &outcome.params, &common.out.join("weights.bin")).map_err(ctx("train"))?;
    write_json(&common.out.join("config.json"), &config).map_err(ctx("train"))?;
    println!("{}", summarize(&outcome.report));
    Ok(())
}

fn run_verify(all: bool) -> CliResult {
    let mut checks: Vec<Check> = verify::oracle_suite();
    if all {
        checks.push(verify::budget_compliance(&[0.4, 0.5, 0.7], 1000));
        checks.push(verify::quantization_behavior(5));
        checks.push(verify::end_to_end(&EndToEnd::default()).0);
        checks.sort_by_key(|c| c.criterion);
    }
    for c in &checks {
        println!("{c}");
    }
    match checks.iter().filter(|c| !c.passed).count() {
        0 => Ok(()),
        n => Err(CliError::Verify(n)),
    }
}

/// Worker count for sweeps: `ADAPTIVE_BP_THREADS` when set and positive.
fn sweep_threads() -> usize {
    std::env::var("ADAPTIVE_BP_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

fn run_sweep(common: &Common) -> CliResult {
    let config = load_config(common).map_err(ctx("sweep"))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads())
        .build()
        .expect("thread pool starts");
    let reports: Vec<TrainReport> = pool
        .install(|| {
            config
                .run
                .rhos
                .par_iter()
                .map(|&rho| {
                    let mut c = config.clone();
                    c.selector.rho = rho;
                    let report = train(&c)?.report;
                    let dir = common.out.join(format!("rho_{rho}"));
                    create_dir(&dir)?;
                    report.save(&dir)?;
                    Ok(report)
                })
                .collect::<Result<Vec<_>, Error>>()
        })
        .map_err(ctx("sweep"))?;
    let mut table = String::from("rho,predicted_reduction,measured_reduction,final_eval_accuracy\n");
    for r in &reports {
        let predicted = r
            .epochs
            .iter()
            .map(|e| 1.0 - e.predicted_flops as f64 / r.t_full as f64)
            .sum::<f64>()
            / r.epochs.len().max(1) as f64;
        table.push_str(&format!(
            "{},{predicted:.6},{:.6},{:.6}\n",
            r.rho, r.realized_reduction, r.final_eval_accuracy
        ));
        println!("{}", summarize(r));
    }
    create_dir(&common.out).map_err(ctx("sweep"))?;
    let path = common.out.join("sweep.csv");
    std::fs::write(&path, table)
        .map_err(|source| Error::Io { path, source })
        .map_err(ctx("sweep"))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Profile { graph } => run_profile(&cli.common, graph.as_deref()),
        Command::Plan { graph, importance } => run_plan(&cli.common, graph.as_deref(), importance.as_deref()),
        Command::Train { init } => run_train(&cli.common, init.as_deref()),
        Command::Verify { all } => run_verify(*all),
        Command::Sweep => run_sweep(&cli.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
