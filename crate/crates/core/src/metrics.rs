//! Corpus BLEU, distinct-n, and model perplexity.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::autograd::Tape;
use crate::corpus::EncodedExample;
use crate::error::{contract, Error, Result};
use crate::math::{exp, ln};
use crate::model::{joint_loss, ModelConfig};
use crate::params::{Bound, ParamSet};

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> impl Iterator<Item = Vec<&str>> {
    tokens.windows(n).map(|w| w.iter().map(AsRef::as_ref).collect())
}

/// Pooled n-gram statistics of a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped matches per order 1..=max_n.
    pub matches: Vec<u64>,
    /// Hypothesis n-grams per order 1..=max_n.
    pub totals: Vec<u64>,
    pub hyp_len: u64,
    pub ref_len: u64,
}

pub fn bleu_stats<S: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<R>],
    max_n: usize,
) -> Result<BleuStats> {
    if hypotheses.is_empty() {
        return Err(contract!("BLEU of an empty corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(contract!("{} hypotheses but {} references", hypotheses.len(), references.len()));
    }
    if max_n == 0 {
        return Err(contract!("BLEU order must be at least 1"));
    }
    let mut stats = BleuStats { matches: alloc::vec![0; max_n], totals: alloc::vec![0; max_n], hyp_len: 0, ref_len: 0 };
    for (hyp, reference) in hypotheses.iter().zip(references) {
        stats.hyp_len += hyp.len() as u64;
        stats.ref_len += reference.len() as u64;
        for n in 1..=max_n {
            let mut ref_counts: BTreeMap<Vec<&str>, u64> = BTreeMap::new();
            for g in ngrams(reference, n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut hyp_counts: BTreeMap<Vec<&str>, u64> = BTreeMap::new();
            for g in ngrams(hyp, n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            for (g, c) in &hyp_counts {
                stats.matches[n - 1] += (*c).min(ref_counts.get(g).copied().unwrap_or(0));
                stats.totals[n - 1] += c;
            }
        }
    }
    Ok(stats)
}

impl BleuStats {
    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len >= self.ref_len {
            1.0
        } else if self.hyp_len == 0 {
            0.0
        } else {
            exp(1.0 - self.ref_len as f64 / self.hyp_len as f64)
        }
    }

    /// BLEU-1..=max_n as fractions in `[0, 1]`.
    pub fn scores(&self) -> Vec<f64> {
        let bp = self.brevity_penalty();
        let mut out = Vec::with_capacity(self.matches.len());
        let mut log_sum = 0.0;
        let mut zero = false;
        for (k, (&m, &t)) in self.matches.iter().zip(&self.totals).enumerate() {
            if m == 0 || t == 0 {
                zero = true;
            }
            if zero {
                out.push(0.0);
                continue;
            }
            log_sum += ln(m as f64 / t as f64);
            out.push(bp * exp(log_sum / (k + 1) as f64));
        }
        out
    }
}

/// Corpus-level BLEU-1..=max_n, scaled to `[0, 100]`. Single reference,
/// no smoothing, case-sensitive over pre-tokenized input.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<R>],
    max_n: usize,
) -> Result<Vec<f64>> {
    Ok(bleu_stats(hypotheses, references, max_n)?.scores().into_iter().map(|s| 100.0 * s).collect())
}

/// `100 * distinct n-grams / total n-grams` over all hypotheses pooled.
pub fn distinct_n<S: AsRef<str>>(hypotheses: &[Vec<S>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(contract!("distinct-n order must be at least 1"));
    }
    let mut unique: BTreeSet<Vec<&str>> = BTreeSet::new();
    let mut total = 0usize;
    for h in hypotheses {
        for g in ngrams(h, n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric(alloc::format!("no {n}-grams in the hypotheses")));
    }
    Ok(100.0 * unique.len() as f64 / total as f64)
}

/// Negative log-likelihood of every target token of every example, in order.
pub fn token_nlls(params: &ParamSet, cfg: &ModelConfig, data: &[EncodedExample]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for ex in data {
        let tape = Tape::new();
        let bound = Bound::new(&tape, params);
        let loss = joint_loss(&bound, cfg, ex, 0.0)?;
        out.extend(loss.token_nll.iter().map(|&v| tape.item(v)));
    }
    Ok(out)
}

/// `exp` of the mean teacher-forced target NLL, pooled over all tokens.
pub fn perplexity(params: &ParamSet, cfg: &ModelConfig, data: &[EncodedExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(contract!("perplexity of an empty dataset"));
    }
    let nll = token_nlls(params, cfg, data)?;
    Ok(perplexity_from_nll(&nll))
}

pub fn perplexity_from_nll(nll: &[f64]) -> f64 {
    exp(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// Automatic evaluation of one system's generations.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// BLEU-1..4, scaled by 100.
    pub bleu: [f64; 4],
    pub distinct1: f64,
    pub distinct2: f64,
    pub perplexity: Option<f64>,
    pub hypotheses: usize,
    pub reference_tokens: usize,
}

pub fn evaluate<S: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<R>],
    perplexity: Option<f64>,
) -> Result<EvalReport> {
    let b = bleu(hypotheses, references, 4)?;
    Ok(EvalReport {
        bleu: [b[0], b[1], b[2], b[3]],
        distinct1: distinct_n(hypotheses, 1)?,
        distinct2: distinct_n(hypotheses, 2)?,
        perplexity,
        hypotheses: hypotheses.len(),
        reference_tokens: references.iter().map(Vec::len).sum(),
    })
}
