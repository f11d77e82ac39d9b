//! Bidirectional language model beneath the question generator.
//!
//! A forward cell reads the source left to right and predicts the next word
//! from each state; a backward cell reads right to left and predicts the
//! previous word. The concatenated states are the hidden representation
//! handed to the encoder.

use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{contract, Result};
use crate::model::run_lstm;
use crate::params::Bound;

/// Divisor of the two directional log-likelihood sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LmNormalizer {
    /// Each sum divided by `T - 1`, the two results added.
    #[default]
    PerDirection,
    /// Both sums pooled and divided by `2 (T - 1)`.
    Pooled,
}

#[derive(Debug, Clone)]
pub struct LmOutput {
    /// `[h_fwd_t; h_bwd_t]` for every position.
    pub hidden: Vec<Var>,
    /// `fwd_probs[t]` predicts token `t + 1`, for `t = 0 .. T-2`.
    pub fwd_probs: Vec<Var>,
    /// `bwd_probs[k]` predicts token `k`, computed from the state at `k + 1`.
    pub bwd_probs: Vec<Var>,
}

pub fn lm_forward(b: &Bound<'_, '_>, embeddings: &[Var]) -> Result<LmOutput> {
    let n = embeddings.len();
    if n < 2 {
        return Err(contract!("language model needs at least 2 tokens, got {n}"));
    }
    let t = b.tape();
    let dl = t.shape(b.get("lm.out_fwd"))[1];
    let fwd = run_lstm(b, "lm.fwd", embeddings, dl, false);
    let bwd = run_lstm(b, "lm.bwd", embeddings, dl, true);
    let w_f = b.get("lm.out_fwd");
    let w_b = b.get("lm.out_bwd");

    let hidden = fwd.iter().zip(&bwd).map(|(f, r)| t.concat(&[f.h, r.h])).collect();
    let mut fwd_probs = Vec::with_capacity(n - 1);
    for state in &fwd[..n - 1] {
        fwd_probs.push(t.softmax(t.matvec(w_f, state.h))?);
    }
    let mut bwd_probs = Vec::with_capacity(n - 1);
    for state in &bwd[1..] {
        bwd_probs.push(t.softmax(t.matvec(w_b, state.h))?);
    }
    Ok(LmOutput { hidden, fwd_probs, bwd_probs })
}

/// `-(1/(T-1)) sum_t ln p_fwd(w_{t+1}) - (1/(T-1)) sum_t ln p_bwd(w_{t-1})`
/// under [`LmNormalizer::PerDirection`].
///
/// Probabilities below `1e-12` are clamped; see [`Tape::clamped`].
pub fn lm_loss(tape: &Tape<'_>, out: &LmOutput, word_ids: &[usize], normalizer: LmNormalizer) -> Result<Var> {
    let n = word_ids.len();
    if n < 2 || out.fwd_probs.len() != n - 1 || out.bwd_probs.len() != n - 1 {
        return Err(contract!(
            "language-model output has {} / {} predictions for {n} tokens",
            out.fwd_probs.len(),
            out.bwd_probs.len()
        ));
    }
    let fwd: Vec<Var> = out.fwd_probs.iter().zip(&word_ids[1..]).map(|(&p, &w)| tape.nll(p, w)).collect();
    let bwd: Vec<Var> = out.bwd_probs.iter().zip(&word_ids[..n - 1]).map(|(&p, &w)| tape.nll(p, w)).collect();
    Ok(match normalizer {
        LmNormalizer::PerDirection => tape.add(tape.mean_scalars(&fwd), tape.mean_scalars(&bwd)),
        LmNormalizer::Pooled => {
            let all: Vec<Var> = fwd.into_iter().chain(bwd).collect();
            tape.mean_scalars(&all)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn probs(tape: &Tape<'_>, rows: &[&[f64]]) -> Vec<Var> {
        rows.iter().map(|r| tape.constant(Tensor::vector(r.to_vec()))).collect()
    }

    #[test]
    fn two_token_hand_case() {
        let tape = Tape::new();
        // w = [0, 1]: forward predicts w_2 = 1, backward predicts w_1 = 0
        let out = LmOutput {
            hidden: vec![],
            fwd_probs: probs(&tape, &[&[0.5, 0.5]]),
            bwd_probs: probs(&tape, &[&[0.25, 0.75]]),
        };
        let l = lm_loss(&tape, &out, &[0, 1], LmNormalizer::PerDirection).unwrap();
        assert!((tape.item(l) - 2.0794).abs() < 1e-4);
        let pooled = lm_loss(&tape, &out, &[0, 1], LmNormalizer::Pooled).unwrap();
        assert!((tape.item(pooled) - 2.0794 / 2.0).abs() < 1e-4);
    }

    #[test]
    fn uniform_three_tokens() {
        let tape = Tape::new();
        let u = [0.1; 10];
        let out = LmOutput { hidden: vec![], fwd_probs: probs(&tape, &[&u, &u]), bwd_probs: probs(&tape, &[&u, &u]) };
        let l = lm_loss(&tape, &out, &[4, 7, 2], LmNormalizer::PerDirection).unwrap();
        assert!((tape.item(l) - 4.6052).abs() < 1e-4);
    }

    #[test]
    fn perfect_predictions_give_zero() {
        let tape = Tape::new();
        let out = LmOutput {
            hidden: vec![],
            fwd_probs: probs(&tape, &[&[0.0, 1.0], &[1.0, 0.0]]),
            bwd_probs: probs(&tape, &[&[1.0, 0.0], &[0.0, 1.0]]),
        };
        let l = lm_loss(&tape, &out, &[0, 1, 0], LmNormalizer::PerDirection).unwrap();
        assert_eq!(tape.item(l), 0.0);
        assert!(tape.clamped().is_empty());
    }

    #[test]
    fn zero_probability_is_clamped_and_flagged() {
        let tape = Tape::new();
        let out = LmOutput {
            hidden: vec![],
            fwd_probs: probs(&tape, &[&[1.0, 0.0]]),
            bwd_probs: probs(&tape, &[&[1.0, 0.0]]),
        };
        let l = lm_loss(&tape, &out, &[0, 1], LmNormalizer::PerDirection).unwrap();
        assert!(tape.item(l).is_finite());
        assert_eq!(tape.clamped().len(), 1);
    }

    fn zero_lm(vocab: usize, word_dim: usize, dl: usize) -> ParamSet {
        let mut p = ParamSet::new();
        for dir in ["fwd", "bwd"] {
            p.insert(alloc::format!("lm.{dir}.w"), Tensor::zeros(&[4 * dl, word_dim + dl]));
            p.insert(alloc::format!("lm.{dir}.b"), Tensor::zeros(&[4 * dl]));
            p.insert(alloc::format!("lm.out_{dir}"), Tensor::zeros(&[vocab, dl]));
        }
        p
    }

    #[test]
    fn index_ranges_and_zero_weights() {
        let p = zero_lm(7, 3, 4);
        let tape = Tape::new();
        let b = Bound::new(&tape, &p);
        let e: Vec<Var> = (0..2).map(|i| tape.constant(Tensor::vector(vec![i as f64; 3]))).collect();
        let out = lm_forward(&b, &e).unwrap();
        assert_eq!(out.fwd_probs.len(), 1);
        assert_eq!(out.bwd_probs.len(), 1);
        assert_eq!(out.hidden.len(), 2);
        assert_eq!(tape.numel(out.hidden[0]), 8);
        for &v in out.fwd_probs.iter().chain(&out.bwd_probs) {
            for x in tape.to_vec(v) {
                assert!((x - 1.0 / 7.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_token_is_rejected() {
        let p = zero_lm(7, 3, 4);
        let tape = Tape::new();
        let b = Bound::new(&tape, &p);
        let e = [tape.constant(Tensor::vector(vec![0.0; 3]))];
        assert!(lm_forward(&b, &e).is_err());
    }
}
