//! Command-line entry points for training runs, sweeps, evaluation, and
//! plot-data aggregation. Exit codes: 0 success, 2 configuration error,
//! 3 divergence, 4 io/schema error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cory_core::nn::ParamStore;
use cory_core::rng::{site, RngFactory};
use cory_harness::config::{Method, RunConfig};
use cory_harness::sweeps::DEFAULT_ETAS;
use cory_harness::{emit_plot_data, frontier_sweep, lr_sweep, pass_at_k, run, HarnessError};

#[derive(Parser)]
#[command(
    name = "cory",
    version,
    about = "Cooperative duo RL fine-tuning lab for tiny token policies"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key=value config file; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single keys, e.g. --set method=ppo (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output root directory (overrides config and CORY_OUT).
    #[arg(long)]
    out: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training run and write metrics, checkpoints, and a report.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// KL-coefficient frontier sweep across methods and seeds.
    SweepEta {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated eta values.
        #[arg(long, default_value = "1e-5,1e-4,1e-3,1e-2")]
        etas: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value = "ppo,cory")]
        methods: String,
    },
    /// Learning-rate robustness grid.
    SweepLr {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated learning rates; overrides --factors.
        #[arg(long)]
        lrs: Option<String>,
        /// Multipliers applied to the configured learning rate.
        #[arg(long, default_value = "1,10")]
        factors: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value = "cory,ppo")]
        methods: String,
    },
    /// Evaluate a checkpoint with pass@k on the configured objective task.
    EvalPassk {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 200)]
        instances: usize,
    },
    /// Aggregate metrics files into a mean/std table.
    PlotData {
        /// Output TSV path.
        #[arg(long)]
        out: PathBuf,
        /// Input metrics files.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Print the effective configuration.
    ConfigPrint {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.set)?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, HarnessError> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad number {x:?}")))
        })
        .collect()
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>, HarnessError> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad seed {x:?}")))
        })
        .collect()
}

fn parse_methods(s: &str) -> Result<Vec<Method>, HarnessError> {
    s.split(',')
        .map(|m| match m.trim() {
            "ppo" => Ok(Method::Ppo),
            "cory" => Ok(Method::Cory),
            other => Err(HarnessError::Config(format!("unknown method {other:?}"))),
        })
        .collect()
}

fn print_aggregate(table: &cory_harness::SweepTable) {
    println!(
        "method\t{}\tseeds\tdiverged\ttask_reward\tsentence_kl\tneg_kl",
        table.parameter
    );
    for a in table.aggregate() {
        println!(
            "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            a.method, a.value, a.seeds, a.diverged, a.task_reward, a.sentence_kl, a.neg_kl
        );
    }
}

fn real_main() -> Result<bool, HarnessError> {
    let cli = Cli::parse();
    match cli.cmd {
        Command::Train { cfg } => {
            let config = load_config(&cfg)?;
            let report = run(&config)?;
            println!(
                "run {} ({} on {}): {} / {} iterations",
                report.run_name,
                report.method,
                report.task,
                report.iterations_completed,
                report.iterations_requested
            );
            for a in &report.agents {
                let fmt =
                    |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                println!(
                    "  agent {}: reward {} kl {} combined {} pass@1 {} eval {}",
                    a.agent,
                    fmt(a.final_task_reward),
                    fmt(a.final_sentence_kl),
                    fmt(a.final_combined),
                    fmt(a.pass_at_1),
                    fmt(a.eval_mean_reward),
                );
            }
            println!("  metrics: {}", report.metrics_path);
            if report.diverged {
                eprintln!(
                    "run diverged: {}",
                    report
                        .divergence
                        .as_deref()
                        .unwrap_or("non-finite gradient")
                );
                return Ok(true);
            }
            Ok(false)
        }
        Command::SweepEta {
            cfg,
            etas,
            seeds,
            methods,
        } => {
            let config = load_config(&cfg)?;
            let etas = if etas.is_empty() {
                DEFAULT_ETAS.to_vec()
            } else {
                parse_f64_list(&etas)?
            };
            let seeds = parse_u64_list(&seeds)?;
            let methods = parse_methods(&methods)?;
            let bases: Vec<RunConfig> = methods
                .iter()
                .map(|&m| {
                    let mut c = config.clone();
                    c.method = m;
                    c
                })
                .collect();
            let out_root = config.out_root().join("sweep-eta");
            std::fs::create_dir_all(&out_root)
                .map_err(HarnessError::io(out_root.display().to_string()))?;
            let table = frontier_sweep(&bases, &etas, &seeds, &out_root)?;
            let path = out_root.join("frontier.tsv");
            table.write_tsv(&path)?;
            print_aggregate(&table);
            println!("table: {}", path.display());
            Ok(false)
        }
        Command::SweepLr {
            cfg,
            lrs,
            factors,
            seeds,
            methods,
        } => {
            let config = load_config(&cfg)?;
            let lrs = match lrs {
                Some(s) => parse_f64_list(&s)?,
                None => parse_f64_list(&factors)?
                    .into_iter()
                    .map(|f| f * config.learning_rate)
                    .collect(),
            };
            let seeds = parse_u64_list(&seeds)?;
            let methods = parse_methods(&methods)?;
            let bases: Vec<RunConfig> = methods
                .iter()
                .map(|&m| {
                    let mut c = config.clone();
                    c.method = m;
                    c
                })
                .collect();
            let out_root = config.out_root().join("sweep-lr");
            std::fs::create_dir_all(&out_root)
                .map_err(HarnessError::io(out_root.display().to_string()))?;
            let table = lr_sweep(&bases, &lrs, &seeds, &out_root)?;
            let path = out_root.join("lr_grid.tsv");
            table.write_tsv(&path)?;
            print_aggregate(&table);
            println!("table: {}", path.display());
            Ok(false)
        }
        Command::EvalPassk {
            cfg,
            checkpoint,
            k,
            instances,
        } => {
            let config = load_config(&cfg)?;
            let task = config.task_spec()?;
            let model = ParamStore::load_checkpoint(&checkpoint).map_err(|e| HarnessError::Io {
                path: checkpoint.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            })?;
            let rngf = RngFactory::new(config.seed);
            let mut rng = rngf.stream(&[site::EVAL, 0]);
            let insts = task.eval_instances(instances, &mut rng);
            if insts.is_empty() {
                return Err(HarnessError::Config(
                    "pass@k needs an objective task (try --set task=arith)".into(),
                ));
            }
            let rate = pass_at_k(&model, &task, &insts, k, &rngf);
            println!("pass@{k} = {rate:.4} over {} instances", insts.len());
            Ok(false)
        }
        Command::PlotData { out, files } => {
            let table = emit_plot_data(&files)?;
            table.write_tsv(&out)?;
            println!("wrote {} rows to {}", table.rows.len(), out.display());
            Ok(false)
        }
        Command::ConfigPrint { cfg } => {
            let config = load_config(&cfg)?;
            print!("{}", config.printed());
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(3), // run completed but diverged
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
