//! The four subcommands.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taml_core::eval::{EvalReport, Evaluator};
use taml_core::experiment::{self, MasterStreams, Verdict};
use taml_core::metalearn::{Learner, Method, Streams};
use taml_core::taskgen::Task;

use crate::checkpoint::{Checkpoint, PSI_PREFIX, THETA_PREFIX};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::log::TrainingLog;
use crate::{tasks, write_file};

pub const TASKS_FILE: &str = "tasks.jsonl";
pub const PREVIEW_FILE: &str = "tasks.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";
const PREVIEW_SENTENCES: usize = 5;

pub fn checkpoint_path(out: &Path, method: Method) -> PathBuf {
    out.join(format!("checkpoint_{}.json", method.name()))
}

pub fn log_path(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(format!("train_{}_s{seed}.ndjson", method.name()))
}

/// Training tasks followed by held-out tasks.
pub fn cmd_gen_tasks(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Task>, CliError> {
    cfg.validate()?;
    let setup = cfg.setup();
    let all = experiment::generate_split(&setup, MasterStreams::split(cfg.seed).tasks)?;
    tasks::save(&all, &out.join(TASKS_FILE))?;
    write_file(&out.join(PREVIEW_FILE), &tasks::preview(&all, PREVIEW_SENTENCES))?;
    Ok(all)
}

fn check_tasks(cfg: &ExperimentConfig, all: &[Task]) -> Result<(), CliError> {
    let setup = cfg.setup();
    if all.len() < setup.train_tasks + setup.heldout_tasks {
        return Err(CliError::Config(format!(
            "task file has {} tasks, config needs {} training + {} held-out",
            all.len(),
            setup.train_tasks,
            setup.heldout_tasks
        )));
    }
    for t in all {
        if t.vocab != setup.family.vocab {
            return Err(CliError::Config(format!("task {} uses a different vocabulary", t.id)));
        }
        for ex in &t.examples {
            ex.source.validate(setup.model.vocab_size, setup.model.max_len)?;
            if let Some(target) = &ex.target {
                target.validate(setup.model.vocab_size, setup.model.max_len)?;
            }
        }
    }
    Ok(())
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub learner: Learner,
}

/// Trains `cfg.method` with seed `cfg.seed` on the training tasks of the file.
pub fn cmd_train(cfg: &ExperimentConfig, tasks_path: &Path, out: &Path) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let all = tasks::load(tasks_path)?;
    check_tasks(cfg, &all)?;
    let setup = cfg.setup();
    let train = &all[..setup.train_tasks];
    let mut learner = setup.learner(cfg.method, cfg.seed)?;

    let log = log_path(out, cfg.method, cfg.seed);
    std::fs::create_dir_all(out).map_err(|e| CliError::io(format!("cannot create {}", out.display()), e))?;
    let file = File::create(&log).map_err(|e| CliError::io(format!("cannot write {}", log.display()), e))?;
    let mut writer = TrainingLog::new(BufWriter::new(file), cfg.seed);
    let result = learner.train(train, |r| writer.record(r));
    writer
        .finish()
        .map_err(|e| CliError::io(format!("cannot write {}", log.display()), e))?;
    result?;

    let ckpt = Checkpoint::new(cfg, cfg.seed, learner.iteration(), &learner.theta, &learner.psi);
    let path = checkpoint_path(out, cfg.method);
    ckpt.save(&path)?;
    Ok(TrainOutcome {
        checkpoint: path,
        log,
        learner,
    })
}

/// Rebuilds the learner stored in a checkpoint.
pub fn load_learner(ckpt: &Checkpoint) -> Result<Learner, CliError> {
    let setup = ckpt.config.setup();
    let model = setup.model()?;
    let net = setup.inference_net()?;
    let mut init = ChaCha8Rng::seed_from_u64(0);
    let theta = ckpt.params(THETA_PREFIX, &model.init_params(&mut init))?;
    let psi = ckpt.params(PSI_PREFIX, &net.init_params(&mut init))?;
    Ok(Learner::from_params(
        ckpt.method,
        model,
        net,
        setup.meta,
        Streams::split(ckpt.seed),
        theta,
        psi,
    ))
}

/// Meta-tests a checkpoint on the held-out tasks and writes the reports.
///
/// With `cfg`, the checkpoint must have been trained under the same model
/// configuration.
pub fn cmd_eval(
    cfg: Option<&ExperimentConfig>,
    checkpoint: &Path,
    tasks_path: &Path,
    out: &Path,
) -> Result<EvalReport, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(c) = cfg {
        if c.model_identity().hash() != ckpt.config_hash {
            return Err(CliError::Config(format!(
                "checkpoint {} was trained under a different configuration",
                checkpoint.display()
            )));
        }
    }
    let run_cfg = &ckpt.config;
    let all = tasks::load(tasks_path)?;
    check_tasks(run_cfg, &all)?;
    let setup = run_cfg.setup();
    let heldout = &all[setup.train_tasks..setup.train_tasks + setup.heldout_tasks];
    let learner = load_learner(&ckpt)?;
    let streams = MasterStreams::split(run_cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(streams.eval);
    let evaluator = Evaluator::fit(heldout, setup.model.vocab_size, setup.classifier.clone(), &mut rng)?;
    let rows = experiment::evaluate(&learner, heldout, &evaluator, streams.eval, &format!("s{}", ckpt.seed))?;
    let mut report = EvalReport::new(rows);
    report
        .notes
        .push(format!("method {} seed {} config {}", ckpt.method.name(), ckpt.seed, ckpt.config_hash));
    write_report(&report, out)?;
    Ok(report)
}

pub fn write_report(report: &EvalReport, out: &Path) -> Result<(), CliError> {
    write_file(&out.join(REPORT_CSV), &report.to_csv())?;
    write_file(&out.join(REPORT_MD), &report.to_markdown())
}

pub struct ReproduceOutcome {
    pub report: EvalReport,
    pub verdict: Verdict,
}

/// The full desk comparison: tasks, every method over `cfg.seeds` seeds,
/// held-out evaluation, reports and training logs under `out`.
pub fn cmd_reproduce(cfg: &ExperimentConfig, out: &Path) -> Result<ReproduceOutcome, CliError> {
    cfg.validate()?;
    let setup = cfg.setup();
    let all = cmd_gen_tasks(cfg, out)?;
    let logs = out.join("logs");
    std::fs::create_dir_all(&logs).map_err(|e| CliError::io(format!("cannot create {}", logs.display()), e))?;
    let mut current: Option<(Method, u64, TrainingLog<BufWriter<File>>)> = None;
    let mut io_error: Option<CliError> = None;
    let result = experiment::reproduce_on(&setup, cfg.seed, &all, |method, seed, record| {
        let fresh = !matches!(&current, Some((m, s, _)) if *m == method && *s == seed);
        if fresh {
            if let Some((_, _, w)) = current.take() {
                if let Err(e) = w.finish() {
                    io_error.get_or_insert(CliError::io("cannot write training log", e));
                }
            }
            let path = log_path(&logs, method, seed);
            match File::create(&path) {
                Ok(f) => current = Some((method, seed, TrainingLog::new(BufWriter::new(f), seed))),
                Err(e) => {
                    io_error.get_or_insert(CliError::io(format!("cannot write {}", path.display()), e));
                }
            }
        }
        if let Some((_, _, w)) = current.as_mut() {
            w.record(record);
        }
    });
    if let Some((_, _, w)) = current.take() {
        w.finish().map_err(|e| CliError::io("cannot write training log", e))?;
    }
    let outcome = result?;
    if let Some(e) = io_error {
        return Err(e);
    }
    write_report(&outcome.report, out)?;
    Ok(ReproduceOutcome {
        report: outcome.report,
        verdict: outcome.verdict,
    })
}
