//! Command-line front end: scenario generation, policy training, sweep
//! evaluation, single-instance solves, solver benchmarks and plot-data
//! extraction.  Exit codes: 0 success, 2 validation problem, 3 infeasible
//! instance, 4 I/O failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use aoi_lab::harness::{self, PlotAxis, RunSpec, SolverChoice};
use aoi_lab::policy::ModelConfig;
use aoi_lab::training::TrainConfig;
use aoi_lab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "aoi-lab",
    version,
    about = "Plans age-of-information-minimal UAV data-collection tours over clustered sensor networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenario files for a seeded sweep
    Gen(SweepArgs),
    /// Train the attention policy and write checkpoints + metrics
    Train(TrainArgs),
    /// Decode a trained checkpoint across a sweep and write eval.csv
    Eval(SweepArgs),
    /// Solve one instance with one solver and print the full breakdown
    Solve(SolveArgs),
    /// Run the configured solvers over a sweep with timing and write bench.csv
    Bench(SweepArgs),
    /// Reduce a results CSV to per-solver x/y series for plotting
    Plotdata(PlotArgs),
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Cluster counts to sweep (repeat the flag to add values)
    #[arg(long = "m", value_name = "M", default_values_t = [5usize])]
    m: Vec<usize>,
    /// SNR thresholds to sweep, dB
    #[arg(long = "gamma-th-db", value_name = "DB", default_values_t = [20.0])]
    gamma_th_db: Vec<f64>,
    /// Pin every cluster to this node count (repeat to sweep); default draws
    /// each cluster's count uniformly from {5,10,15,20,25,30}
    #[arg(long = "n-per-cluster", value_name = "N")]
    n_per_cluster: Vec<u32>,
    /// Hovering-point grid resolution per service disk
    #[arg(long = "l-sub", default_value_t = 5)]
    l_sub: usize,
    /// Heuristic inflation for the point search (≥ 1)
    #[arg(long, default_value_t = 1.2)]
    omega: f64,
    /// Solver to run (repeatable): twa-greedy, twa-sample, twa-beam, sa, ga,
    /// nn, random, exact.  Defaults: eval → the three decoders, bench → the
    /// four classical solvers
    #[arg(long = "solver", value_name = "NAME")]
    solver: Vec<String>,
    /// Sample count / beam width for the policy decoders
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Trained policy checkpoint (required by the twa-* solvers)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Instances per sweep cell
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Side length of the square deployment area, m
    #[arg(long = "area-side", default_value_t = 3000.0)]
    area_side: f64,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Solve this stored scenario file instead of generating an instance
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Clusters per training instance
    #[arg(long = "m", default_value_t = 5)]
    m: usize,
    /// Hovering-point grid resolution per service disk
    #[arg(long = "l-sub", default_value_t = 2)]
    l_sub: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "steps-per-epoch")]
    steps_per_epoch: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "learning-rate")]
    learning_rate: Option<f64>,
    /// Use the full-size model (512-dim, 6 encoder layers) instead of the
    /// small CPU-friendly one
    #[arg(long = "full-scale")]
    full_scale: bool,
    /// Output directory for checkpoints and the metric log
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Results CSV produced by eval or bench
    #[arg(long)]
    input: PathBuf,
    /// Sweep axis for the x values: m, gamma or n
    #[arg(long, default_value = "m")]
    axis: String,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

fn parse_solvers(names: &[String], default: &[SolverChoice]) -> Result<Vec<SolverChoice>> {
    if names.is_empty() {
        return Ok(default.to_vec());
    }
    names.iter().map(|n| n.parse()).collect()
}

fn spec_from(args: &SweepArgs, solvers: Vec<SolverChoice>) -> RunSpec {
    let node_policies = if args.n_per_cluster.is_empty() {
        vec![vec![5, 10, 15, 20, 25, 30]]
    } else {
        args.n_per_cluster.iter().map(|&n| vec![n]).collect()
    };
    RunSpec {
        seed: args.seed,
        solvers,
        width: args.width,
        omega: args.omega,
        m_list: args.m.clone(),
        gamma_th_db_list: args.gamma_th_db.clone(),
        node_policies,
        l_sub: args.l_sub,
        area_side: args.area_side,
        instances: args.instances,
        checkpoint: args.checkpoint.clone(),
        out_dir: args.out.clone(),
        ..RunSpec::new(args.out.clone())
    }
}

fn train_config_from(args: &TrainArgs) -> TrainConfig {
    let mut config = TrainConfig::desk(args.seed);
    config.model = if args.full_scale {
        ModelConfig::full_scale(args.l_sub)
    } else {
        ModelConfig {
            l_sub: args.l_sub,
            ..ModelConfig::desk(args.l_sub)
        }
    };
    config.env.l_sub = args.l_sub;
    config.m_train = args.m;
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.steps_per_epoch {
        config.steps_per_epoch = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    config.out_dir = Some(args.out.clone());
    config
}

fn run(cli: Cli) -> Result<()> {
    harness::configure_threads_from_env()?;
    match cli.command {
        Command::Gen(args) => {
            let spec = spec_from(&args, vec![SolverChoice::Nn]);
            let paths = harness::cmd_gen(&spec)?;
            println!("wrote {} scenario files to {}", paths.len(), spec.out_dir.display());
        }
        Command::Train(args) => {
            let config = train_config_from(&args);
            let outcome = harness::cmd_train(&config, |summary| {
                println!(
                    "epoch {:>3}/{} greedy-eval {:.3} baseline {:.3} {} {:.1}s",
                    summary.epoch + 1,
                    summary.epochs,
                    summary.eval_current_mean,
                    summary.eval_baseline_mean,
                    if summary.baseline_updated {
                        "baseline-updated"
                    } else {
                        "baseline-kept"
                    },
                    summary.seconds,
                );
            })?;
            println!(
                "training finished: {} baseline updates; checkpoints in {}",
                outcome.baseline_updates,
                args.out.display()
            );
        }
        Command::Eval(args) => {
            let solvers = parse_solvers(
                &args.solver,
                &[
                    SolverChoice::TwaGreedy,
                    SolverChoice::TwaSample,
                    SolverChoice::TwaBeam,
                ],
            )?;
            let spec = spec_from(&args, solvers);
            let (path, rows) = harness::cmd_eval(&spec)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::Solve(args) => {
            let solvers = parse_solvers(&args.sweep.solver, &[])?;
            let [choice] = solvers.as_slice() else {
                return Err(Error::param(
                    "solve needs exactly one --solver (e.g. --solver exact)",
                ));
            };
            let mut spec = spec_from(&args.sweep, vec![*choice]);
            spec.scenario_file = args.scenario.clone();
            let (row, tour, report) = harness::cmd_solve(&spec, *choice)?;
            let (fly_frac, hover_frac) = harness::fly_hover_split(&report);
            println!("instance {} solver={}", row.instance_id, row.solver);
            println!(
                "order: {}",
                tour.order
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            println!(
                "hovering-point index per cluster: {}",
                tour.point_choice
                    .iter()
                    .map(|p| p.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            println!(
                "total AoI {:.3} s; oldest packet {:.3} s; effective energy {:.1} J",
                row.total_aoi_s, row.oldest_aoi_s, row.effective_energy_j
            );
            println!(
                "fly {:.3} s ({:.1}%), hover {:.3} s ({:.1}%); wall {:.4} s",
                row.fly_time_s,
                100.0 * fly_frac,
                row.hover_time_s,
                100.0 * hover_frac,
                row.wall_seconds
            );
        }
        Command::Bench(args) => {
            let solvers = parse_solvers(
                &args.solver,
                &[
                    SolverChoice::Sa,
                    SolverChoice::Ga,
                    SolverChoice::Nn,
                    SolverChoice::Random,
                ],
            )?;
            let spec = spec_from(&args, solvers);
            let (path, rows) = harness::cmd_bench(&spec)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            println!("{:<12} {:>6} {:>16} {:>12}", "solver", "runs", "mean total AoI", "mean wall s");
            for (solver, runs, mean_cost, mean_wall) in harness::timing_summary(&rows) {
                println!("{solver:<12} {runs:>6} {mean_cost:>16.3} {mean_wall:>12.5}");
            }
        }
        Command::Plotdata(args) => {
            let axis: PlotAxis = args.axis.parse()?;
            let written = harness::cmd_plotdata(&args.input, axis, &args.out)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(harness::exit_code(&err));
    }
}
