//! Convolutional sentence classifier with max-over-time pooling.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::math;
use crate::metalearn::{Optimizer, OptimizerKind};
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::text::{Sentence, Style, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub d_emb: usize,
    pub widths: Vec<usize>,
    pub filters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            d_emb: 8,
            widths: alloc::vec![2, 3],
            filters: 8,
            epochs: 5,
            batch_size: 16,
            lr: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextClassifier {
    pub config: ClassifierConfig,
    pub vocab_size: usize,
    pub params: ParameterSet,
}

fn normal(rng: &mut impl Rng, sd: f64) -> f64 {
    sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

impl TextClassifier {
    /// Untrained classifier: embeddings N(0, 1), He-scaled filters, zero biases.
    pub fn new(config: ClassifierConfig, vocab_size: usize, rng: &mut impl Rng) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) || config.filters == 0 || config.d_emb == 0 {
            return Err(Error::Config("classifier needs positive widths, filters and embedding size".into()));
        }
        let mut p = ParameterSet::new();
        let e = config.d_emb;
        let emb = (0..vocab_size * e).map(|_| normal(rng, 1.0)).collect();
        p.push("emb", Tensor::from_parts(alloc::vec![vocab_size, e], emb));
        for &w in &config.widths {
            let fan_in = w * e;
            let sd = math::sqrt(2.0 / fan_in as f64);
            let k = (0..fan_in * config.filters).map(|_| normal(rng, sd)).collect();
            p.push(alloc::format!("conv{w}.w"), Tensor::from_parts(alloc::vec![fan_in, config.filters], k));
            p.push(alloc::format!("conv{w}.b"), Tensor::zeros(&[config.filters]));
        }
        let feat = config.widths.len() * config.filters;
        let sd = math::sqrt(1.0 / feat as f64);
        let w = (0..feat * 2).map(|_| normal(rng, sd)).collect();
        p.push("out.w", Tensor::from_parts(alloc::vec![feat, 2], w));
        p.push("out.b", Tensor::zeros(&[2]));
        Ok(Self {
            config,
            vocab_size,
            params: p,
        })
    }

    pub fn from_params(config: ClassifierConfig, vocab_size: usize, params: ParameterSet) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let reference = Self::new(config, vocab_size, &mut rng)?;
        reference.params.check_compatible(&params)?;
        Ok(Self { params, ..reference })
    }

    fn min_len(&self) -> usize {
        self.config.widths.iter().copied().max().unwrap_or(1)
    }

    /// Logits `[n, 2]` for a batch of sentences.
    pub fn logits_node(&self, g: &mut Graph, nodes: &[NodeId], sentences: &[&Sentence]) -> Result<NodeId> {
        if sentences.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let p = |name: &str| nodes[self.params.index_of(name).expect("classifier parameter")];
        let mut rows = Vec::with_capacity(sentences.len());
        for s in sentences {
            s.validate(self.vocab_size, usize::MAX)?;
            let mut ids: Vec<usize> = s.tokens.iter().map(|&t| t as usize).collect();
            while ids.len() < self.min_len() {
                ids.push(PAD as usize);
            }
            let x = g.gather(p("emb"), &ids)?;
            let mut pooled = Vec::with_capacity(self.config.widths.len());
            for &w in &self.config.widths {
                let u = g.unfold(x, w)?;
                let h = g.matmul(u, p(&alloc::format!("conv{w}.w")))?;
                let h = g.add(h, p(&alloc::format!("conv{w}.b")))?;
                let h = g.relu(h);
                pooled.push(g.max_rows(h)?);
            }
            let f = g.concat(&pooled)?;
            let n = g.value(f).len();
            rows.push(g.reshape(f, &[1, n])?);
        }
        let feats = g.concat(&rows)?;
        let out = g.matmul(feats, p("out.w"))?;
        g.add(out, p("out.b"))
    }

    /// Mean cross-entropy of a labeled batch.
    pub fn loss_node(&self, g: &mut Graph, nodes: &[NodeId], batch: &[&Sentence]) -> Result<NodeId> {
        let logits = self.logits_node(g, nodes, batch)?;
        let targets: Vec<usize> = batch.iter().map(|s| s.style.index()).collect();
        let w = alloc::vec![1.0 / batch.len() as f64; batch.len()];
        g.softmax_cross_entropy(logits, &targets, &w)
    }

    pub fn predict(&self, s: &Sentence) -> Result<Style> {
        let mut g = Graph::new();
        let nodes = self.params.bind(&mut g);
        let l = self.logits_node(&mut g, &nodes, &[s])?;
        let v = g.value(l).values();
        Ok(if v[1] > v[0] { Style::B } else { Style::A })
    }

    /// Adam on mini-batch cross-entropy; returns the mean loss of the last epoch.
    pub fn fit(&mut self, data: &[Sentence], rng: &mut impl Rng) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptySet);
        }
        if !Style::ALL.iter().all(|&c| data.iter().any(|s| s.style == c)) {
            return Err(Error::SingleClass);
        }
        let mut opt = Optimizer::new(OptimizerKind::Adam, self.config.lr, &self.params);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut last = 0.0;
        for _ in 0..self.config.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(self.config.batch_size.max(1)) {
                let batch: Vec<&Sentence> = chunk.iter().map(|&i| &data[i]).collect();
                let mut g = Graph::new();
                let nodes = self.params.bind(&mut g);
                let loss = self.loss_node(&mut g, &nodes, &batch)?;
                total += g.value(loss).item();
                batches += 1;
                let grads = self.params.gradients(&g.backward(loss)?, &nodes);
                opt.step(&mut self.params, &grads)?;
            }
            last = total / batches as f64;
        }
        Ok(last)
    }
}

/// Fraction of `sentences` classified as their own `style` field.
pub fn accuracy(clf: &TextClassifier, sentences: &[Sentence]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut hits = 0;
    for s in sentences {
        if clf.predict(s)? == s.style {
            hits += 1;
        }
    }
    Ok(hits as f64 / sentences.len() as f64)
}
