//! Desk experiment: task split, per-method training, held-out evaluation and
//! the trend verdict.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{median, task_label, ClassifierConfig, EvalReport, Evaluator, ReportRow};
use crate::infernet::{InferConfig, InferenceNet};
use crate::metalearn::{IterationRecord, Learner, MetaConfig, Method, Streams};
use crate::model::{ModelConfig, StyleModel};
use crate::taskgen::{generate_tasks, sample_episode, Task, TaskFamily};

#[derive(Clone, Debug, PartialEq)]
pub struct Setup {
    pub family: TaskFamily,
    pub model: ModelConfig,
    pub infer: InferConfig,
    pub meta: MetaConfig,
    pub classifier: ClassifierConfig,
    pub train_tasks: usize,
    pub heldout_tasks: usize,
    pub backbone_seed: u64,
    pub seeds: usize,
}

impl Default for Setup {
    fn default() -> Self {
        Self {
            family: TaskFamily::default(),
            model: ModelConfig::default(),
            infer: InferConfig::default(),
            meta: MetaConfig::default(),
            classifier: ClassifierConfig::default(),
            train_tasks: 8,
            heldout_tasks: 4,
            backbone_seed: 1234,
            seeds: 5,
        }
    }
}

impl Setup {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        self.model.validate()?;
        self.meta.validate()?;
        if self.model.vocab_size != self.family.vocab.size() || self.model.max_len < self.family.max_len {
            return Err(Error::Config(format!(
                "model expects vocab {} / length {}, tasks use vocab {} / length {}",
                self.model.vocab_size,
                self.model.max_len,
                self.family.vocab.size(),
                self.family.max_len
            )));
        }
        if self.train_tasks == 0 || self.heldout_tasks == 0 || self.seeds == 0 {
            return Err(Error::Config("train tasks, held-out tasks and seeds must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<StyleModel> {
        StyleModel::new(self.model.clone(), self.backbone_seed)
    }

    pub fn inference_net(&self) -> Result<InferenceNet> {
        InferenceNet::new(
            self.infer.clone(),
            self.model.max_len,
            self.model.d_emb,
            self.model.num_tensors(),
        )
    }

    pub fn learner(&self, method: Method, seed: u64) -> Result<Learner> {
        Learner::new(method, self.model()?, self.inference_net()?, self.meta.clone(), Streams::split(seed))
    }
}

/// Seeds for everything a master seed controls beyond one training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterStreams {
    pub tasks: u64,
    pub eval: u64,
}

impl MasterStreams {
    pub fn split(seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7461_736b_7365_6564);
        Self {
            tasks: rng.random(),
            eval: rng.random(),
        }
    }
}

/// `train_tasks + heldout_tasks` tasks, ids from zero; the first `train_tasks` train.
pub fn generate_split(setup: &Setup, tasks_seed: u64) -> Result<Vec<Task>> {
    let mut rng = ChaCha8Rng::seed_from_u64(tasks_seed);
    generate_tasks(&setup.family, 0, setup.train_tasks + setup.heldout_tasks, &mut rng)
}

/// Meta-tests `learner` on every held-out task.
///
/// The support/test split of a task depends only on `eval_seed` and the task
/// id, so all methods see the same splits.
pub fn evaluate(learner: &Learner, heldout: &[Task], evaluator: &Evaluator, eval_seed: u64, label_prefix: &str) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(heldout.len());
    for task in heldout {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed.wrapping_add(u64::from(task.id)));
        let ep = sample_episode(task, learner.cfg.support_fraction, learner.cfg.episode_retries, &mut rng)?;
        let test: Vec<_> = ep.query.iter().map(|e| e.source.clone()).collect();
        let out = learner.meta_test(&ep, &test, &mut rng)?;
        let inputs: Vec<_> = ep.query.iter().collect();
        let s = evaluator.score(task, &inputs, &out.transferred)?;
        rows.push(ReportRow {
            method: learner.method.name().into(),
            task: task_label(label_prefix, task.id, task.parallel),
            bleu: Some(s.bleu),
            ppl: Some(s.ppl),
            acc: Some(s.acc),
        });
    }
    Ok(rows)
}

/// Median over seeds of each method's held-out means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub bleu: f64,
    pub ppl: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub summaries: Vec<MethodSummary>,
    pub bleu_order: bool,
    pub taml_wins: usize,
}

impl Verdict {
    pub fn pass(&self) -> bool {
        self.bleu_order && self.taml_wins >= 2
    }

    pub fn line(&self) -> String {
        let mut s = String::from(if self.pass() { "PASS" } else { "FAIL" });
        for m in &self.summaries {
            s.push_str(&format!(
                " | {} bleu={:.3} ppl={:.4} acc={:.4}",
                m.method.name(),
                m.bleu,
                m.ppl,
                m.acc
            ));
        }
        s.push_str(&format!(
            " | bleu taml>=maml>=baseline: {} | taml beats baseline on {}/3",
            self.bleu_order, self.taml_wins
        ));
        s
    }
}

/// Per-seed means from rows labelled `s{seed}/...`, then medians per method.
pub fn verdict(report: &EvalReport) -> Result<Verdict> {
    let mut summaries = Vec::new();
    for method in Method::ALL {
        let rows: Vec<&ReportRow> = report.rows.iter().filter(|r| r.method == method.name()).collect();
        let mut seeds: Vec<&str> = rows.iter().map(|r| r.task.split('/').next().unwrap_or("")).collect();
        seeds.dedup();
        let mut per_seed = [Vec::new(), Vec::new(), Vec::new()];
        for seed in seeds {
            let sub: Vec<&&ReportRow> = rows.iter().filter(|r| r.task.split('/').next() == Some(seed)).collect();
            let mean = |f: fn(&ReportRow) -> Option<f64>| {
                let v: Vec<f64> = sub.iter().filter_map(|r| f(r)).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            };
            per_seed[0].push(mean(|r| r.bleu));
            per_seed[1].push(mean(|r| r.ppl));
            per_seed[2].push(mean(|r| r.acc));
        }
        let (Some(bleu), Some(ppl), Some(acc)) = (median(&per_seed[0]), median(&per_seed[1]), median(&per_seed[2])) else {
            return Err(Error::Config(format!("report has no rows for {}", method.name())));
        };
        summaries.push(MethodSummary { method, bleu, ppl, acc });
    }
    let (b, m, t) = (summaries[0], summaries[1], summaries[2]);
    let wins = [t.bleu > b.bleu, t.ppl < b.ppl, t.acc > b.acc];
    Ok(Verdict {
        bleu_order: t.bleu >= m.bleu && m.bleu >= b.bleu,
        taml_wins: wins.iter().filter(|&&w| w).count(),
        summaries,
    })
}

pub struct ReproduceOutcome {
    pub report: EvalReport,
    pub verdict: Verdict,
}

/// Generates tasks once, trains every method for `setup.seeds` seeds
/// (`master + i`) and evaluates on the held-out tasks.
///
/// `on_record` sees every training log record.
pub fn reproduce(setup: &Setup, master_seed: u64, on_record: impl FnMut(Method, u64, &IterationRecord)) -> Result<ReproduceOutcome> {
    setup.validate()?;
    let tasks = generate_split(setup, MasterStreams::split(master_seed).tasks)?;
    reproduce_on(setup, master_seed, &tasks, on_record)
}

/// [`reproduce`] on given tasks: the first `setup.train_tasks` train, the next
/// `setup.heldout_tasks` are held out.
pub fn reproduce_on(
    setup: &Setup,
    master_seed: u64,
    tasks: &[Task],
    mut on_record: impl FnMut(Method, u64, &IterationRecord),
) -> Result<ReproduceOutcome> {
    setup.validate()?;
    if tasks.len() < setup.train_tasks + setup.heldout_tasks {
        return Err(Error::Config(format!(
            "{} tasks given, {} training + {} held-out needed",
            tasks.len(),
            setup.train_tasks,
            setup.heldout_tasks
        )));
    }
    let streams = MasterStreams::split(master_seed);
    let (train, rest) = tasks.split_at(setup.train_tasks);
    let heldout = &rest[..setup.heldout_tasks];
    let mut eval_rng = ChaCha8Rng::seed_from_u64(streams.eval);
    let evaluator = Evaluator::fit(heldout, setup.model.vocab_size, setup.classifier.clone(), &mut eval_rng)?;
    let mut rows = Vec::new();
    for method in Method::ALL {
        for i in 0..setup.seeds as u64 {
            let seed = master_seed.wrapping_add(i);
            let mut learner = setup.learner(method, seed)?;
            learner.train(train, |r| on_record(method, seed, r))?;
            rows.extend(evaluate(&learner, heldout, &evaluator, streams.eval, &format!("s{seed}"))?);
        }
    }
    let mut report = EvalReport::new(rows);
    let verdict = verdict(&report)?;
    report.notes.push(format!("master seed {master_seed}; {} seeds per method", setup.seeds));
    report.notes.push(format!("verdict: {}", verdict.line()));
    Ok(ReproduceOutcome { report, verdict })
}
