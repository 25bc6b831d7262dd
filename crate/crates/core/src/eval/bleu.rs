//! Corpus-level BLEU over token ids.

use alloc::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::math;

pub const MAX_ORDER: usize = 4;
/// Numerator used in place of a zero n-gram match count.
pub const SMOOTHING_EPS: f64 = 1e-9;

fn ngram_counts(tokens: &[u32], n: usize) -> BTreeMap<&[u32], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and hypothesis n-gram totals per order `1..=MAX_ORDER`.
pub fn modified_precisions<H, R>(hypotheses: &[H], references: &[R]) -> Result<[(usize, usize); MAX_ORDER]>
where
    H: AsRef<[u32]>,
    R: AsRef<[u32]>,
{
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut out = [(0, 0); MAX_ORDER];
    for (h, r) in hypotheses.iter().zip(references) {
        for (n, slot) in out.iter_mut().enumerate() {
            let hc = ngram_counts(h.as_ref(), n + 1);
            let rc = ngram_counts(r.as_ref(), n + 1);
            for (g, &c) in &hc {
                slot.0 += c.min(rc.get(g).copied().unwrap_or(0));
                slot.1 += c;
            }
        }
    }
    Ok(out)
}

/// BLEU in `[0, 100]` with one reference per hypothesis.
///
/// Zero match counts are replaced by [`SMOOTHING_EPS`]. An order absent from
/// both sides has precision 1; absent from the hypotheses only, `SMOOTHING_EPS`.
pub fn bleu<H, R>(hypotheses: &[H], references: &[R]) -> Result<f64>
where
    H: AsRef<[u32]>,
    R: AsRef<[u32]>,
{
    let precisions = modified_precisions(hypotheses, references)?;
    let c: usize = hypotheses.iter().map(|h| h.as_ref().len()).sum();
    let r: usize = references.iter().map(|x| x.as_ref().len()).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for (n, &(m, total)) in precisions.iter().enumerate() {
        if total == 0 && references.iter().all(|x| x.as_ref().len() <= n) {
            continue;
        }
        let num = if m == 0 { SMOOTHING_EPS } else { m as f64 };
        log_sum += math::ln(num / total.max(1) as f64);
    }
    let bp = if c < r { 1.0 - r as f64 / c as f64 } else { 0.0 };
    Ok(100.0 * math::exp(bp + log_sum / MAX_ORDER as f64))
}
