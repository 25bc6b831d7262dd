//! Interpolated Kneser-Ney bigram language model.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::text::{BOS, EOS};

pub const DEFAULT_DISCOUNT: f64 = 0.75;

/// Counts over `BOS w_1 .. w_n EOS` streams.
///
/// The continuation distribution is itself discounted and interpolated with
/// the uniform distribution over the vocabulary, so every probability is
/// positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BigramLM {
    vocab_size: usize,
    discount: f64,
    bigrams: BTreeMap<(u32, u32), u64>,
    context_total: BTreeMap<u32, u64>,
    context_types: BTreeMap<u32, u64>,
    /// Distinct left contexts of each token.
    continuation: BTreeMap<u32, u64>,
    bigram_types: u64,
}

impl BigramLM {
    pub fn train<S: AsRef<[u32]>>(corpus: &[S], vocab_size: usize, discount: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut counts = vec![0u64; vocab_size * vocab_size];
        for s in corpus {
            let s = s.as_ref();
            if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::TokenOutOfRange { token: t, vocab: vocab_size });
            }
            let mut prev = BOS;
            for &w in s.iter().chain(core::iter::once(&EOS)) {
                counts[prev as usize * vocab_size + w as usize] += 1;
                prev = w;
            }
        }
        Self::from_count_matrix(&counts, vocab_size, discount)
    }

    /// The model with no observations: uniform over predictable tokens.
    pub fn uniform(vocab_size: usize) -> Result<Self> {
        Self::from_count_matrix(&vec![0; vocab_size * vocab_size], vocab_size, DEFAULT_DISCOUNT)
    }

    fn from_count_matrix(counts: &[u64], vocab_size: usize, discount: f64) -> Result<Self> {
        if vocab_size < 3 {
            return Err(Error::Config(format!("vocabulary of {vocab_size} tokens is too small")));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::Config(format!("discount {discount} outside (0, 1)")));
        }
        let mut lm = Self {
            vocab_size,
            discount,
            bigrams: BTreeMap::new(),
            context_total: BTreeMap::new(),
            context_types: BTreeMap::new(),
            continuation: BTreeMap::new(),
            bigram_types: 0,
        };
        for v in 0..vocab_size {
            for w in 0..vocab_size {
                let c = counts[v * vocab_size + w];
                if c == 0 {
                    continue;
                }
                let (v, w) = (v as u32, w as u32);
                lm.bigrams.insert((v, w), c);
                *lm.context_total.entry(v).or_insert(0) += c;
                *lm.context_types.entry(v).or_insert(0) += 1;
                *lm.continuation.entry(w).or_insert(0) += 1;
                lm.bigram_types += 1;
            }
        }
        Ok(lm)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn count(&self, v: u32, w: u32) -> u64 {
        self.bigrams.get(&(v, w)).copied().unwrap_or(0)
    }

    pub fn context_count(&self, v: u32) -> u64 {
        self.context_total.get(&v).copied().unwrap_or(0)
    }

    pub fn outcomes(&self) -> impl Iterator<Item = u32> {
        0..self.vocab_size as u32
    }

    pub fn continuation_prob(&self, w: u32) -> f64 {
        let uniform = 1.0 / self.vocab_size as f64;
        if w as usize >= self.vocab_size {
            return 0.0;
        }
        if self.bigram_types == 0 {
            return uniform;
        }
        let n = self.bigram_types as f64;
        let c = self.continuation.get(&w).copied().unwrap_or(0) as f64;
        let kinds = self.continuation.len() as f64;
        (c - self.discount).max(0.0) / n + self.discount * kinds / n * uniform
    }

    /// `P(w | v)`.
    pub fn prob(&self, v: u32, w: u32) -> f64 {
        let total = self.context_count(v);
        let p_cont = self.continuation_prob(w);
        if total == 0 {
            return p_cont;
        }
        let total = total as f64;
        let types = self.context_types.get(&v).copied().unwrap_or(0) as f64;
        (self.count(v, w) as f64 - self.discount).max(0.0) / total + self.discount * types / total * p_cont
    }

    /// Sum of `ln P` over a sentence's predicted tokens and their number.
    pub fn sentence_log_prob(&self, s: &[u32]) -> (f64, usize) {
        let mut prev = BOS;
        let mut lp = 0.0;
        for &w in s.iter().chain(core::iter::once(&EOS)) {
            lp += math::ln(self.prob(prev, w));
            prev = w;
        }
        (lp, s.len() + 1)
    }

    /// Bigram counts as a `[V, V]` tensor plus the discount.
    pub fn to_params(&self) -> ParameterSet {
        let v = self.vocab_size;
        let mut counts = vec![0.0; v * v];
        for (&(a, b), &c) in &self.bigrams {
            counts[a as usize * v + b as usize] = c as f64;
        }
        let mut p = ParameterSet::new();
        p.push("bigram_counts", Tensor::from_parts(vec![v, v], counts));
        p.push("discount", Tensor::scalar(self.discount));
        p
    }

    pub fn from_params(p: &ParameterSet) -> Result<Self> {
        let missing = |n: &str| Error::ParamMismatch(format!("language model lacks `{n}`"));
        let counts = p.get("bigram_counts").ok_or_else(|| missing("bigram_counts"))?;
        let discount = p.get("discount").ok_or_else(|| missing("discount"))?;
        let &[v, v2] = counts.shape() else {
            return Err(Error::ParamMismatch("bigram counts must be square".into()));
        };
        if v != v2 || !discount.is_scalar() {
            return Err(Error::ParamMismatch("bigram counts must be square".into()));
        }
        let mut ints = Vec::with_capacity(v * v);
        for &c in counts.values() {
            if !(c >= 0.0 && libm::trunc(c) == c) {
                return Err(Error::ParamMismatch(format!("count {c} is not a natural number")));
            }
            ints.push(c as u64);
        }
        Self::from_count_matrix(&ints, v, discount.item())
    }

    /// Contexts observed at least once.
    pub fn contexts(&self) -> BTreeSet<u32> {
        self.context_total.keys().copied().collect()
    }
}

/// `exp(−mean ln P)` over every predicted token, EOS included.
pub fn perplexity<S: AsRef<[u32]>>(lm: &BigramLM, sentences: &[S]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut lp = 0.0;
    let mut n = 0;
    for s in sentences {
        let (l, k) = lm.sentence_log_prob(s.as_ref());
        lp += l;
        n += k;
    }
    Ok(math::exp(-lp / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    const V: usize = 8;

    #[test]
    fn abab_counts_and_probability() {
        let (a, b) = (4u32, 5u32);
        let lm = BigramLM::train(&[vec![a, b, a, b]], V, 0.75).unwrap();
        assert_eq!(lm.count(BOS, a), 1);
        assert_eq!(lm.count(a, b), 2);
        assert_eq!(lm.count(b, a), 1);
        assert_eq!(lm.count(b, EOS), 1);
        // Bigram types: (BOS,a) (a,b) (b,a) (b,EOS); continuation counts a:2 b:1 EOS:1.
        let uniform = 1.0 / 8.0;
        let p_cont_b = (1.0 - 0.75) / 4.0 + 0.75 * 3.0 / 4.0 * uniform;
        let expected = (2.0 - 0.75) / 2.0 + 0.75 * 1.0 / 2.0 * p_cont_b;
        assert!((lm.prob(a, b) - expected).abs() < 1e-15);
    }

    #[test]
    fn distributions_normalize() {
        let lm = BigramLM::train(&[vec![4u32], vec![4, 5, 6], vec![7, 7]], V, 0.75).unwrap();
        for v in 0..V as u32 {
            let s: f64 = lm.outcomes().map(|w| lm.prob(v, w)).sum();
            assert!((s - 1.0).abs() < 1e-12, "context {v}: {s}");
        }
    }

    #[test]
    fn duplicated_corpus_keeps_probabilities() {
        let c = vec![vec![4u32, 5, 6], vec![5, 5]];
        let mut d = c.clone();
        d.extend(c.clone());
        let a = BigramLM::train(&c, V, 0.75).unwrap();
        let b = BigramLM::train(&d, V, 0.75).unwrap();
        for v in 0..V as u32 {
            for w in a.outcomes() {
                let (x, y) = (a.prob(v, w), b.prob(v, w));
                if a.context_count(v) == 0 {
                    assert!((x - y).abs() < 1e-15);
                }
                assert!(x > 0.0 && y > 0.0);
            }
        }
    }

    #[test]
    fn uniform_model_has_vocabulary_perplexity() {
        let lm = BigramLM::uniform(V).unwrap();
        let ppl = perplexity(&lm, &[vec![4u32, 5, 6], vec![7]]).unwrap();
        assert!((ppl - V as f64).abs() < 1e-12);
    }

    #[test]
    fn deterministic_chain_perplexity() {
        let (a, b) = (4u32, 5u32);
        let lm = BigramLM::train(&[vec![a, b]], V, 0.75).unwrap();
        let lp = libm::log(lm.prob(BOS, a)) + libm::log(lm.prob(a, b)) + libm::log(lm.prob(b, EOS));
        let ppl = perplexity(&lm, &[vec![a, b]]).unwrap();
        assert!((ppl - libm::exp(-lp / 3.0)).abs() < 1e-12);
        // Every context was seen once with one successor: P = 0.25 + 0.75 * P_cont.
        let p_cont = 0.25 / 3.0 + 0.75 * 1.0 * (1.0 / 8.0);
        assert!((lm.prob(a, b) - (0.25 + 0.75 * p_cont)).abs() < 1e-15);
    }

    #[test]
    fn params_round_trip() {
        let lm = BigramLM::train(&[vec![4u32, 5, 6], vec![5, 5]], V, 0.75).unwrap();
        assert_eq!(BigramLM::from_params(&lm.to_params()).unwrap(), lm);
    }
}
