//! Content preservation (BLEU), fluency (bigram perplexity) and style
//! strength (classifier accuracy) of transferred sentences.

pub mod bleu;
pub mod classifier;
pub mod lm;
pub mod report;

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::taskgen::{Example, Task};
use crate::text::{Sentence, Style};

pub use bleu::bleu;
pub use classifier::{accuracy, ClassifierConfig, TextClassifier};
pub use lm::{perplexity, BigramLM, DEFAULT_DISCOUNT};
pub use report::{median, task_label, EvalReport, ReportRow, TaskGroup};

/// Scores for one batch of transfers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub bleu: f64,
    pub ppl: f64,
    pub acc: f64,
}

/// Language models per target style and a style classifier, all fitted on
/// ground-truth sentences of the evaluation tasks.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub lms: [BigramLM; 2],
    pub classifier: TextClassifier,
}

/// Every source sentence and its ground-truth transfer.
pub fn ground_truth_corpus(tasks: &[Task]) -> Vec<Sentence> {
    let mut out = Vec::new();
    for t in tasks {
        for ex in &t.examples {
            out.push(ex.source.clone());
            out.push(t.ground_truth(ex));
        }
    }
    out
}

impl Evaluator {
    pub fn fit(tasks: &[Task], vocab_size: usize, clf: ClassifierConfig, rng: &mut impl Rng) -> Result<Self> {
        let corpus = ground_truth_corpus(tasks);
        if corpus.is_empty() {
            return Err(Error::EmptySet);
        }
        let style_lm = |s: Style| {
            let own: Vec<&[u32]> = corpus.iter().filter(|x| x.style == s).map(|x| &x.tokens[..]).collect();
            BigramLM::train(&own, vocab_size, DEFAULT_DISCOUNT)
        };
        let lms = [style_lm(Style::A)?, style_lm(Style::B)?];
        let mut classifier = TextClassifier::new(clf, vocab_size, rng)?;
        classifier.fit(&corpus, rng)?;
        Ok(Self { lms, classifier })
    }

    /// `outputs[i]` is the transfer of `inputs[i].source`; the BLEU reference is
    /// the ground truth for parallel tasks and the source otherwise.
    pub fn score(&self, task: &Task, inputs: &[&Example], outputs: &[Sentence]) -> Result<Scores> {
        if inputs.len() != outputs.len() {
            return Err(Error::LengthMismatch {
                hypotheses: outputs.len(),
                references: inputs.len(),
            });
        }
        let refs: Vec<&[u32]> = inputs
            .iter()
            .map(|ex| match (&ex.target, task.parallel) {
                (Some(t), true) => &t.tokens[..],
                _ => &ex.source.tokens[..],
            })
            .collect();
        let hyps: Vec<&[u32]> = outputs.iter().map(|s| &s.tokens[..]).collect();
        let bleu = bleu(&hyps, &refs)?;
        let mut lp = 0.0;
        let mut n = 0;
        for s in outputs {
            let (l, k) = self.lms[s.style.index()].sentence_log_prob(&s.tokens);
            lp += l;
            n += k;
        }
        let ppl = crate::math::exp(-lp / n as f64);
        let acc = accuracy(&self.classifier, outputs)?;
        Ok(Scores { bleu, ppl, acc })
    }
}
