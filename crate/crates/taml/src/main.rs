use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use taml::commands::{self, TASKS_FILE};
use taml::{CliError, ExperimentConfig};
use taml_core::metalearn::Method;

#[derive(Parser)]
#[command(name = "taml", about = "Task-adaptive meta-learning for multi-pair style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write training and held-out tasks as JSONL plus a text preview.
    GenTasks(Common),
    /// Train one method and write its checkpoint and log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
    /// Meta-test a checkpoint on the held-out tasks and write report.csv / report.md.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Defaults to the method's checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate tasks, train every method over several seeds and compare.
    Reproduce(Common),
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method `{s}` (expected baseline, maml or taml)"))
}

fn load(common: &Common, method: Option<Method>) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.display().to_string();
    }
    let out = PathBuf::from(&cfg.out_dir);
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenTasks(common) => {
            let (cfg, out) = load(&common, None)?;
            let all = commands::cmd_gen_tasks(&cfg, &out)?;
            let (n, sentences, class1) = taml::tasks::summary(&all);
            println!(
                "{n} tasks ({} training, {} held-out), {sentences} sentences, class-1 fraction {:.4} -> {}",
                cfg.train_tasks,
                cfg.heldout_tasks,
                class1 as f64 / sentences.max(1) as f64,
                out.join(TASKS_FILE).display()
            );
        }
        Command::Train { common, tasks, method } => {
            let (cfg, out) = load(&common, method)?;
            let tasks = tasks.unwrap_or_else(|| out.join(TASKS_FILE));
            let t = commands::cmd_train(&cfg, &tasks, &out)?;
            println!(
                "{} trained for {} iterations ({} gradient evaluations) -> {}",
                cfg.method.name(),
                t.learner.iteration(),
                t.learner.grad_evals(),
                t.checkpoint.display()
            );
        }
        Command::Eval {
            common,
            tasks,
            method,
            checkpoint,
        } => {
            let explicit = common.config.is_some();
            let (cfg, out) = load(&common, method)?;
            let tasks = tasks.unwrap_or_else(|| out.join(TASKS_FILE));
            let ckpt = checkpoint.unwrap_or_else(|| commands::checkpoint_path(&out, cfg.method));
            let report = commands::cmd_eval(explicit.then_some(&cfg), &ckpt, &tasks, &out)?;
            print!("{}", report.to_markdown());
        }
        Command::Reproduce(common) => {
            let (cfg, out) = load(&common, None)?;
            let start = Instant::now();
            let r = commands::cmd_reproduce(&cfg, &out)?;
            println!("{}", r.verdict.line());
            println!("{} rows in {:.1}s -> {}", r.report.rows.len(), start.elapsed().as_secs_f64(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
