//! Synthetic multi-pair style-transfer tasks.
//!
//! Each task is a substitution cipher: style-A marker `j` corresponds to
//! style-B marker `cipher[j]`, content tokens are shared by both styles. Tasks
//! differ in their cipher, their content distribution, their size, and whether
//! their training data is parallel.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{Sentence, Style, Vocab};

/// Parameters of the task distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskFamily {
    pub vocab: Vocab,
    pub max_len: usize,
    pub min_len: usize,
    /// Inclusive range of sentences per task.
    pub size_min: usize,
    pub size_max: usize,
    /// Fraction of style-A (class 1) sentences.
    pub imbalance: f64,
    /// Dirichlet concentration of per-task content distributions; smaller
    /// values give larger domain shift between tasks.
    pub concentration: f64,
    /// Dirichlet concentration of the per-task distribution over marker
    /// slots; both styles share it through the cipher.
    pub marker_concentration: f64,
    pub markers_min: usize,
    pub markers_max: usize,
}

impl Default for TaskFamily {
    fn default() -> Self {
        Self {
            vocab: Vocab::default(),
            max_len: 12,
            min_len: 4,
            size_min: 80,
            size_max: 400,
            imbalance: 0.75,
            concentration: 1.0,
            marker_concentration: 0.5,
            markers_min: 1,
            markers_max: 3,
        }
    }
}

impl TaskFamily {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("task family: {m}")));
        if self.vocab.content == 0 || self.vocab.markers == 0 {
            return bad("vocabulary needs content and marker tokens");
        }
        if self.min_len < 1 || self.min_len > self.max_len.saturating_sub(1) {
            return bad("sentence lengths must satisfy 1 <= min_len <= max_len - 1");
        }
        if self.markers_min < 1 || self.markers_min > self.markers_max || self.markers_max > self.min_len {
            return bad("marker counts must satisfy 1 <= markers_min <= markers_max <= min_len");
        }
        if self.size_min < 2 || self.size_min > self.size_max {
            return bad("task sizes must satisfy 2 <= size_min <= size_max");
        }
        if !(self.imbalance > 0.0 && self.imbalance < 1.0) {
            return bad("imbalance must lie in (0, 1)");
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite())
            || !(self.marker_concentration > 0.0 && self.marker_concentration.is_finite())
        {
            return bad("concentrations must be positive");
        }
        Ok(())
    }
}

/// One sentence of a task, paired with its transfer when the task is parallel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Sentence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Sentence>,
}

impl Example {
    pub fn style(&self) -> Style {
        self.source.style
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub id: u32,
    pub seed: u64,
    pub parallel: bool,
    pub imbalance: f64,
    pub vocab: Vocab,
    /// `cipher[j]` is the style-B marker index paired with style-A marker `j`.
    pub cipher: Vec<u32>,
    pub content_dist: Vec<f64>,
    /// `marker_dist[j]` is the probability of style-A marker `j`, and of its
    /// image `cipher[j]` in style-B sentences.
    pub marker_dist: Vec<f64>,
    pub examples: Vec<Example>,
}

impl Task {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Ground-truth transfer of `s` into the opposite style.
    pub fn apply_cipher(&self, s: &Sentence) -> Sentence {
        let inverse = self.inverse_cipher();
        let tokens = s
            .tokens
            .iter()
            .map(|&t| match self.vocab.marker_of(t) {
                Some((Style::A, j)) => self.vocab.marker(Style::B, self.cipher[j as usize]),
                Some((Style::B, j)) => self.vocab.marker(Style::A, inverse[j as usize]),
                None => t,
            })
            .collect();
        Sentence::new(tokens, s.style.flip())
    }

    fn inverse_cipher(&self) -> Vec<u32> {
        let mut inv = vec![0; self.cipher.len()];
        for (a, &b) in self.cipher.iter().enumerate() {
            inv[b as usize] = a as u32;
        }
        inv
    }

    /// Ground-truth transfer of every example's source sentence.
    pub fn ground_truth(&self, ex: &Example) -> Sentence {
        match &ex.target {
            Some(t) => t.clone(),
            None => self.apply_cipher(&ex.source),
        }
    }

    pub fn class_fraction(&self, style: Style) -> f64 {
        let n = self.examples.iter().filter(|e| e.style() == style).count();
        n as f64 / self.examples.len().max(1) as f64
    }
}

/// Draws one task. Deterministic in `(family, id, seed, parallel)`.
pub fn generate_task(family: &TaskFamily, id: u32, seed: u64, parallel: bool) -> Result<Task> {
    family.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = family.vocab;

    let mut cipher: Vec<u32> = (0..vocab.markers).collect();
    cipher.shuffle(&mut rng);

    let content_dist = dirichlet(family.concentration, vocab.content as usize, &mut rng)?;
    // Dirichlet draws can underflow to exact zeros at small concentrations.
    let weights: Vec<f64> = content_dist.iter().map(|p| p.max(1e-12)).collect();
    let content = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("content: {e}")))?;
    let marker_dist = dirichlet(family.marker_concentration, vocab.markers as usize, &mut rng)?;
    let weights: Vec<f64> = marker_dist.iter().map(|p| p.max(1e-12)).collect();
    let slot = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("markers: {e}")))?;

    let n = rng.random_range(family.size_min..=family.size_max);
    let mut task = Task {
        id,
        seed,
        parallel,
        imbalance: family.imbalance,
        vocab,
        cipher,
        content_dist,
        marker_dist,
        examples: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let style = if rng.random_bool(family.imbalance) {
            Style::A
        } else {
            Style::B
        };
        let len = rng.random_range(family.min_len..=family.max_len - 1);
        let n_markers = rng.random_range(family.markers_min..=family.markers_max);
        let mut tokens: Vec<u32> = (0..len)
            .map(|_| vocab.content_id(content.sample(&mut rng) as u32))
            .collect();
        for pos in index::sample(&mut rng, len, n_markers) {
            let j = slot.sample(&mut rng) as u32;
            let j = match style {
                Style::A => j,
                Style::B => task.cipher[j as usize],
            };
            tokens[pos] = vocab.marker(style, j);
        }
        let source = Sentence::new(tokens, style);
        let target = parallel.then(|| task.apply_cipher(&source));
        task.examples.push(Example { source, target });
    }
    Ok(task)
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
fn dirichlet(concentration: f64, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::Config(format!("dirichlet: {e}")))?;
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0) {
        return Ok(vec![1.0 / k as f64; k]);
    }
    for d in &mut draws {
        *d /= total;
    }
    Ok(draws)
}

/// `count` tasks with ids `first_id..`, alternating parallel/non-parallel,
/// seeded from `rng`.
pub fn generate_tasks(family: &TaskFamily, first_id: u32, count: usize, rng: &mut impl Rng) -> Result<Vec<Task>> {
    (0..count)
        .map(|i| generate_task(family, first_id + i as u32, rng.random(), i % 2 == 0))
        .collect()
}

/// A support/query split of one task.
#[derive(Clone, Debug)]
pub struct Episode {
    pub task_id: u32,
    pub parallel: bool,
    pub support: Vec<Example>,
    pub query: Vec<Example>,
}

impl Episode {
    /// N: support size.
    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    /// M: query size.
    pub fn query_len(&self) -> usize {
        self.query.len()
    }

    /// Support examples of one class.
    pub fn support_class(&self, style: Style) -> Vec<&Example> {
        self.support.iter().filter(|e| e.style() == style).collect()
    }

    pub fn support_sentences(&self, style: Style) -> Vec<&Sentence> {
        self.support
            .iter()
            .filter(|e| e.style() == style)
            .map(|e| &e.source)
            .collect()
    }
}

pub const DEFAULT_EPISODE_RETRIES: usize = 20;

/// Random disjoint split with `round(support_fraction * N)` support examples,
/// redrawn until both classes appear in the support set.
pub fn sample_episode(task: &Task, support_fraction: f64, retries: usize, rng: &mut impl Rng) -> Result<Episode> {
    if !(support_fraction > 0.0 && support_fraction < 1.0) {
        return Err(Error::Config(format!("support fraction {support_fraction} outside (0, 1)")));
    }
    let n = task.len();
    if n < 2 {
        return Err(Error::DegenerateEpisode(0));
    }
    let n_support = (libm::round(support_fraction * n as f64) as usize).clamp(1, n - 1);
    for _ in 0..retries.max(1) {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let (s, q) = order.split_at(n_support);
        let has = |st: Style| s.iter().any(|&i| task.examples[i].style() == st);
        if has(Style::A) && has(Style::B) {
            return Ok(Episode {
                task_id: task.id,
                parallel: task.parallel,
                support: s.iter().map(|&i| task.examples[i].clone()).collect(),
                query: q.iter().map(|&i| task.examples[i].clone()).collect(),
            });
        }
    }
    Err(Error::DegenerateEpisode(retries))
}
