//! Frozen backbone and the trainable two-head style-transfer model.
//!
//! Every position is decoded independently: the backbone maps a token to a
//! feature vector, and the head selected by the routing style maps that feature
//! vector to vocabulary logits. Transfer routes a sentence through the head of
//! the opposite style.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::math;
use crate::params::ParameterSet;
use crate::taskgen::Example;
use crate::tensor::Tensor;
use crate::text::{Sentence, Style, PAD};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_emb: usize,
    pub d_feat: usize,
    /// Dense layers per head, including the final vocabulary projection.
    pub layers: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 24,
            max_len: 12,
            d_emb: 8,
            d_feat: 16,
            layers: 3,
            width: 32,
        }
    }
}

impl ModelConfig {
    /// Head sizes used with pretrained transformer backbones: six dense layers
    /// of width 256.
    pub fn large_heads(mut self) -> Self {
        self.layers = 6;
        self.width = 256;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.max_len == 0 || self.d_emb == 0 || self.d_feat == 0 || self.width == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.layers == 0 {
            return Err(Error::Config("a head needs at least one layer".into()));
        }
        Ok(())
    }

    /// Number of trainable tensors (weights and biases of both heads).
    pub fn num_tensors(&self) -> usize {
        2 * 2 * self.layers
    }
}

/// Frozen token encoder standing in for a pretrained transformer.
///
/// Fully determined by the seed and the dimensions; there is no API that
/// mutates it after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    seed: u64,
    embedding: Tensor,
    mix_weight: Tensor,
    mix_bias: Tensor,
    /// `tanh(embedding · mix + bias)` for every token id.
    features: Tensor,
}

impl Backbone {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, e, f) = (config.vocab_size, config.d_emb, config.d_feat);
        let mut normal = |n: usize, sd: f64| -> Vec<f64> {
            (0..n)
                .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        };
        let embedding = Tensor::new(vec![v, e], normal(v * e, 1.0))?;
        let mix_weight = Tensor::new(vec![e, f], normal(e * f, 1.0 / math::sqrt(e as f64)))?;
        let mix_bias = Tensor::new(vec![f], normal(f, 0.1))?;
        let mut feats = vec![0.0; v * f];
        for t in 0..v {
            for j in 0..f {
                let mut acc = mix_bias.values()[j];
                for k in 0..e {
                    acc += embedding.values()[t * e + k] * mix_weight.values()[k * f + j];
                }
                feats[t * f + j] = math::tanh(acc);
            }
        }
        Ok(Self {
            seed,
            embedding,
            mix_weight,
            mix_bias,
            features: Tensor::new(vec![v, f], feats)?,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn mix_weight(&self) -> &Tensor {
        &self.mix_weight
    }

    pub fn mix_bias(&self) -> &Tensor {
        &self.mix_bias
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn d_emb(&self) -> usize {
        self.embedding.shape()[1]
    }

    pub fn d_feat(&self) -> usize {
        self.features.shape()[1]
    }

    fn check_token(&self, t: u32) -> Result<usize> {
        let v = self.vocab_size();
        if (t as usize) < v {
            Ok(t as usize)
        } else {
            Err(Error::TokenOutOfRange { token: t, vocab: v })
        }
    }

    /// Feature row of a single token.
    pub fn token_features(&self, t: u32) -> Result<&[f64]> {
        let t = self.check_token(t)?;
        let f = self.d_feat();
        Ok(&self.features.values()[t * f..(t + 1) * f])
    }

    /// `[max_len, d_feat]` grid; rows past the sentence length are zero.
    pub fn sentence_features(&self, s: &Sentence, max_len: usize) -> Result<Tensor> {
        s.validate(self.vocab_size(), max_len)?;
        let f = self.d_feat();
        let mut out = vec![0.0; max_len * f];
        for (i, &t) in s.tokens.iter().enumerate() {
            out[i * f..(i + 1) * f].copy_from_slice(self.token_features(t)?);
        }
        Tensor::new(vec![max_len, f], out)
    }

    /// `[max_len, d_emb]` grid of raw embeddings; rows past the length are zero.
    pub fn sentence_embeddings(&self, s: &Sentence, max_len: usize) -> Result<Tensor> {
        s.validate(self.vocab_size(), max_len)?;
        let e = self.d_emb();
        let mut out = vec![0.0; max_len * e];
        for (i, &t) in s.tokens.iter().enumerate() {
            let t = self.check_token(t)?;
            out[i * e..(i + 1) * e].copy_from_slice(&self.embedding.values()[t * e..(t + 1) * e]);
        }
        Tensor::new(vec![max_len, e], out)
    }
}

/// An input sentence, the tokens it should produce, and the head that scores them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub input: Sentence,
    pub target: Vec<u32>,
    pub head: Style,
}

impl TrainingExample {
    /// Parallel pairs train the head of the target style; unpaired sentences
    /// are reconstructed through their own head.
    pub fn from_example(ex: &Example, parallel: bool) -> Result<Self> {
        match (&ex.target, parallel) {
            (Some(t), true) => {
                if t.len() != ex.source.len() {
                    return Err(Error::Config("parallel target length differs from source".into()));
                }
                Ok(Self {
                    input: ex.source.clone(),
                    target: t.tokens.clone(),
                    head: t.style,
                })
            }
            (None, true) => Err(Error::Config("parallel example without a target".into())),
            (_, false) => Ok(Self {
                input: ex.source.clone(),
                target: ex.source.tokens.clone(),
                head: ex.source.style,
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StyleModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
}

impl StyleModel {
    pub fn new(config: ModelConfig, backbone_seed: u64) -> Result<Self> {
        let backbone = Backbone::new(&config, backbone_seed)?;
        Ok(Self { config, backbone })
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let c = &self.config;
        (0..c.layers)
            .map(|i| {
                let fan_in = if i == 0 { c.d_feat } else { c.width };
                let fan_out = if i + 1 == c.layers { c.vocab_size } else { c.width };
                (fan_in, fan_out)
            })
            .collect()
    }

    /// He-initialized weights and zero biases for both heads, named
    /// `h{1,2}.l{i}.{w,b}`.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParameterSet {
        let mut p = ParameterSet::new();
        for style in Style::ALL {
            for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
                let sd = math::sqrt(2.0 / fan_in as f64);
                let w = (0..fan_in * fan_out)
                    .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect();
                p.push(
                    format!("h{}.l{i}.w", style.label()),
                    Tensor::from_parts(vec![fan_in, fan_out], w),
                );
                p.push(format!("h{}.l{i}.b", style.label()), Tensor::zeros(&[fan_out]));
            }
        }
        p
    }

    /// Errors unless `params` has this model's names and shapes.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.init_params(&mut rng).check_compatible(params)
    }

    fn head_range(&self, head: Style) -> core::ops::Range<usize> {
        let per = 2 * self.config.layers;
        head.index() * per..(head.index() + 1) * per
    }

    /// Logits node for `features` (`[n, d_feat]`) routed through `head`.
    pub fn head_forward(&self, g: &mut Graph, nodes: &[NodeId], features: NodeId, head: Style) -> Result<NodeId> {
        let r = self.head_range(head);
        let layer_nodes = &nodes[r];
        let mut h = features;
        for (i, wb) in layer_nodes.chunks(2).enumerate() {
            let z = g.matmul(h, wb[0])?;
            h = g.add(z, wb[1])?;
            if i + 1 < self.config.layers {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// `[max_len, vocab_size]` logits of `features` (a backbone grid) through
    /// the head selected by `style`.
    pub fn two_head_forward(&self, params: &ParameterSet, features: &Tensor, style: Style) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = params.bind(&mut g);
        let f = g.constant(features.clone());
        let out = self.head_forward(&mut g, &nodes, f, style)?;
        Ok(g.value(out).clone())
    }

    /// Mean token cross-entropy of `batch` as a graph node.
    ///
    /// Because decoding is per position, identical `(head, input token, target
    /// token)` triples contribute identical terms; they are merged into one
    /// weighted row each.
    pub fn task_loss_node(&self, g: &mut Graph, nodes: &[NodeId], batch: &[TrainingExample]) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut counts: BTreeMap<(Style, u32, u32), usize> = BTreeMap::new();
        let mut total = 0usize;
        for ex in batch {
            ex.input.validate(self.config.vocab_size, self.config.max_len)?;
            if ex.target.len() != ex.input.len() {
                return Err(Error::Config("target length differs from input length".into()));
            }
            for (&x, &y) in ex.input.tokens.iter().zip(&ex.target) {
                if y as usize >= self.config.vocab_size {
                    return Err(Error::TokenOutOfRange {
                        token: y,
                        vocab: self.config.vocab_size,
                    });
                }
                *counts.entry((ex.head, x, y)).or_insert(0) += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::EmptyBatch);
        }
        let d = self.backbone.d_feat();
        let mut loss: Option<NodeId> = None;
        for head in Style::ALL {
            let rows: Vec<_> = counts.iter().filter(|((h, _, _), _)| *h == head).collect();
            if rows.is_empty() {
                continue;
            }
            let mut feats = Vec::with_capacity(rows.len() * d);
            let mut targets = Vec::with_capacity(rows.len());
            let mut weights = Vec::with_capacity(rows.len());
            for ((_, x, y), &c) in &rows {
                feats.extend_from_slice(self.backbone.token_features(*x)?);
                targets.push(*y as usize);
                weights.push(c as f64 / total as f64);
            }
            let f = g.constant(Tensor::new(vec![rows.len(), d], feats)?);
            let logits = self.head_forward(g, nodes, f, head)?;
            let ce = g.softmax_cross_entropy(logits, &targets, &weights)?;
            loss = Some(match loss {
                Some(l) => g.add(l, ce)?,
                None => ce,
            });
        }
        loss.ok_or(Error::EmptyBatch)
    }

    pub fn task_loss(&self, params: &ParameterSet, batch: &[TrainingExample]) -> Result<f64> {
        let mut g = Graph::new();
        let nodes = params.bind(&mut g);
        let l = self.task_loss_node(&mut g, &nodes, batch)?;
        Ok(g.value(l).item())
    }

    pub fn loss_and_grad(&self, params: &ParameterSet, batch: &[TrainingExample]) -> Result<(f64, ParameterSet)> {
        let mut g = Graph::new();
        let nodes = params.bind(&mut g);
        let l = self.task_loss_node(&mut g, &nodes, batch)?;
        let grads = g.backward(l)?;
        Ok((g.value(l).item(), params.gradients(&grads, &nodes)))
    }

    /// Per-token logits `[tokens.len(), vocab_size]` through `head`.
    pub fn token_logits(&self, params: &ParameterSet, head: Style, tokens: &[u32]) -> Result<Tensor> {
        let d = self.backbone.d_feat();
        let mut feats = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            feats.extend_from_slice(self.backbone.token_features(t)?);
        }
        let mut g = Graph::new();
        let nodes = params.bind(&mut g);
        let f = g.constant(Tensor::new(vec![tokens.len(), d], feats)?);
        let out = self.head_forward(&mut g, &nodes, f, head)?;
        Ok(g.value(out).clone())
    }

    /// Label-flip inference: decode through the head of the opposite style.
    pub fn transfer(&self, params: &ParameterSet, s: &Sentence) -> Result<Sentence> {
        self.transfer_ensemble(core::slice::from_ref(params), s)
    }

    /// Like [`StyleModel::transfer`], averaging per-position softmax
    /// probabilities over several parameter sets before the argmax.
    pub fn transfer_ensemble(&self, params: &[ParameterSet], s: &Sentence) -> Result<Sentence> {
        s.validate(self.config.vocab_size, self.config.max_len)?;
        let out_style = s.style.flip();
        if s.is_empty() {
            return Ok(Sentence::new(Vec::new(), out_style));
        }
        let v = self.config.vocab_size;
        let mut probs = vec![0.0; s.len() * v];
        for p in params {
            let logits = self.token_logits(p, out_style, &s.tokens)?;
            accumulate_softmax(logits.values(), v, &mut probs, params.len() == 1);
        }
        let tokens = (0..s.len())
            .map(|i| argmax_non_pad(&probs[i * v..(i + 1) * v]))
            .collect();
        Ok(Sentence::new(tokens, out_style))
    }
}

/// Adds row-wise softmax of `logits` to `acc`; with `raw` the logits are copied
/// instead (the argmax is the same and ties stay exact).
fn accumulate_softmax(logits: &[f64], v: usize, acc: &mut [f64], raw: bool) {
    for (row, out) in logits.chunks(v).zip(acc.chunks_mut(v)) {
        if raw {
            out.copy_from_slice(row);
            continue;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| math::exp(x - m)).sum();
        for (o, &x) in out.iter_mut().zip(row) {
            *o += math::exp(x - m) / z;
        }
    }
}

/// First index of the maximum, never selecting PAD.
fn argmax_non_pad(row: &[f64]) -> u32 {
    let mut best = 1usize;
    for j in 2..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    debug_assert_ne!(best as u32, PAD);
    best as u32
}
