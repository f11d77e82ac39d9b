//! Feature-enriched pointer-generator: stacked bidirectional encoder,
//! attention decoder, and the mixture of generation and copy distributions.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::corpus::{EncodedExample, UNK};
use crate::error::{contract, Result};
use crate::lm;
use crate::model::{embed_words, joint_loss, lstm_step, run_lstm, CellState, ModelConfig};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Top-layer states stacked as `[T, 2d]`.
    pub states: Var,
    /// Top-layer state of each position, `[2d]`.
    pub rows: Vec<Var>,
    /// Top-layer forward cell after the last token.
    pub final_fwd: CellState,
    /// Top-layer backward cell after the first token.
    pub final_bwd: CellState,
}

/// Per-token encoder input `[e_t; a_t; pos_t; ner_t; case_t; h_lm_t]`.
pub fn encoder_inputs(
    b: &Bound<'_, '_>,
    cfg: &ModelConfig,
    ex: &EncodedExample,
    words: &[Var],
    lm_hidden: Option<&[Var]>,
) -> Result<Vec<Var>> {
    let n = ex.src_len();
    if words.len() != n {
        return Err(contract!("{} word embeddings for {n} source tokens", words.len()));
    }
    if let Some(h) = lm_hidden {
        if h.len() != n {
            return Err(contract!("{} language-model states for {n} source tokens", h.len()));
        }
    }
    let t = b.tape();
    let answer = b.get("qg.embed.answer");
    let tables = cfg.use_features.then(|| (b.get("qg.embed.pos"), b.get("qg.embed.ner"), b.get("qg.embed.case")));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut parts = alloc::vec![words[i], t.gather_row(answer, ex.answer_tags[i] as usize)];
        if let Some((pos, ner, case)) = tables {
            parts.push(t.gather_row(pos, ex.pos_ids[i]));
            parts.push(t.gather_row(ner, ex.ner_ids[i]));
            parts.push(t.gather_row(case, ex.case_ids[i]));
        }
        if let Some(h) = lm_hidden {
            parts.push(h[i]);
        }
        out.push(t.concat(&parts));
    }
    Ok(out)
}

pub fn encode(
    b: &Bound<'_, '_>,
    cfg: &ModelConfig,
    ex: &EncodedExample,
    words: &[Var],
    lm_hidden: Option<&[Var]>,
) -> Result<EncoderOutput> {
    let t = b.tape();
    let mut inputs = encoder_inputs(b, cfg, ex, words, lm_hidden)?;
    let mut last = None;
    for layer in 0..cfg.encoder_layers {
        let fwd = run_lstm(b, &format!("qg.enc.{layer}.fwd"), &inputs, cfg.hidden, false);
        let bwd = run_lstm(b, &format!("qg.enc.{layer}.bwd"), &inputs, cfg.hidden, true);
        inputs = fwd.iter().zip(&bwd).map(|(f, r)| t.concat(&[f.h, r.h])).collect();
        last = Some((fwd[fwd.len() - 1], bwd[0]));
    }
    let (final_fwd, final_bwd) = last.ok_or_else(|| contract!("encoder needs at least one layer"))?;
    Ok(EncoderOutput { states: t.stack(&inputs), rows: inputs, final_fwd, final_bwd })
}

/// Decoder recurrent state and the attention context that accompanies it.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub cell: CellState,
    pub context: Var,
}

/// Linear bridge from the top encoder layer's final states; zero context.
pub fn initial_state(b: &Bound<'_, '_>, enc: &EncoderOutput) -> DecoderState {
    let t = b.tape();
    let linear = |which: &str, x: Var| {
        let w = b.get(&format!("qg.bridge.{which}.w"));
        let bias = b.get(&format!("qg.bridge.{which}.b"));
        t.add(t.matvec(w, x), bias)
    };
    let h = linear("h", t.concat(&[enc.final_fwd.h, enc.final_bwd.h]));
    let c = linear("c", t.concat(&[enc.final_fwd.c, enc.final_bwd.c]));
    let width = t.shape(enc.states)[1];
    DecoderState { cell: CellState { h, c }, context: t.constant(Tensor::zeros(&[width])) }
}

/// Encoder-side half of the alignment network, `H W_enc + b`, shared by all steps.
pub fn attention_keys(b: &Bound<'_, '_>, enc: &EncoderOutput) -> Var {
    let t = b.tape();
    t.add_row_broadcast(t.matmul(enc.states, b.get("qg.attn.enc")), b.get("qg.attn.b"))
}

/// Additive attention: `score_t = v . tanh(W_enc h_t + W_dec s + b)`.
/// Returns the weights and the context `sum_t alpha_t h_t`.
pub fn attention(b: &Bound<'_, '_>, keys: Var, enc: &EncoderOutput, s: Var) -> Result<(Var, Var)> {
    let t = b.tape();
    let query = t.matvec(b.get("qg.attn.dec"), s);
    let energy = t.tanh(t.add_row_broadcast(keys, query));
    let scores = t.matvec(energy, b.get("qg.attn.v"));
    let alpha = t.softmax(scores)?;
    let context = t.vecmat(alpha, enc.states);
    Ok((alpha, context))
}

/// `s_i = LSTM([w_{i-1}; c_{i-1}], s_{i-1})`, then attention with `s_i`.
pub fn decode_step(
    b: &Bound<'_, '_>,
    prev: &DecoderState,
    w_prev: Var,
    enc: &EncoderOutput,
    keys: Var,
) -> Result<(DecoderState, Var)> {
    let t = b.tape();
    let input = t.concat(&[w_prev, prev.context]);
    let cell = lstm_step(b, "qg.dec", input, prev.cell);
    let (alpha, context) = attention(b, keys, enc, cell.h)?;
    Ok((DecoderState { cell, context }, alpha))
}

/// The two component distributions over the extended vocabulary and the gate.
#[derive(Debug, Clone, Copy)]
pub struct OutputDistributions {
    /// Generation distribution, zero at every extended id.
    pub p_vocab: Var,
    /// Attention mass scattered onto the source tokens' extended ids.
    pub p_copy: Var,
    /// Generation probability, one element.
    pub p_gen: Var,
}

pub fn output_distributions(
    b: &Bound<'_, '_>,
    cfg: &ModelConfig,
    state: &DecoderState,
    alpha: Var,
    w_prev: Var,
    ex: &EncodedExample,
) -> Result<OutputDistributions> {
    let t = b.tape();
    let width = ex.extended_size();
    let sc = t.concat(&[state.cell.h, state.context]);
    let hidden = t.tanh(t.add(t.matvec(b.get("qg.out.ff1.w"), sc), b.get("qg.out.ff1.b")));
    let logits = t.add(t.matvec(b.get("qg.out.ff2.w"), hidden), b.get("qg.out.ff2.b"));
    let p_vocab = t.pad(t.softmax(logits)?, width);
    let p_copy = t.scatter_add(alpha, &ex.src_ext_ids, width);
    let p_gen = match cfg.p_gen_override {
        Some(p) => t.constant(Tensor::scalar(p)),
        None => {
            let gate_in = t.concat(&[state.context, state.cell.h, w_prev]);
            t.sigmoid(t.add(t.matvec(b.get("qg.pgen.w"), gate_in), b.get("qg.pgen.b")))
        }
    };
    Ok(OutputDistributions { p_vocab, p_copy, p_gen })
}

/// `P(w) = p_gen P_vocab(w) + (1 - p_gen) P_copy(w)`.
pub fn mix(t: &Tape<'_>, p_vocab: Var, p_copy: Var, p_gen: Var) -> Var {
    let keep = t.affine(p_gen, -1.0, 1.0);
    t.add(t.scale_by(p_vocab, p_gen), t.scale_by(p_copy, keep))
}

/// Embedding of the decoder input token; extended ids read the UNK row.
pub fn embed_target(b: &Bound<'_, '_>, ex: &EncodedExample, token: usize) -> Var {
    let id = if token >= ex.vocab_size { UNK } else { token };
    b.tape().gather_row(b.get("qg.embed.word"), id)
}

/// Negative log-likelihood of each target token with gold inputs.
pub fn teacher_forced_nll(
    b: &Bound<'_, '_>,
    cfg: &ModelConfig,
    ex: &EncodedExample,
    enc: &EncoderOutput,
) -> Result<Vec<Var>> {
    if ex.tgt_out.is_empty() || ex.tgt_in.len() != ex.tgt_out.len() {
        return Err(contract!("target input/output lengths {} / {}", ex.tgt_in.len(), ex.tgt_out.len()));
    }
    let t = b.tape();
    let keys = attention_keys(b, enc);
    let mut state = initial_state(b, enc);
    let mut out = Vec::with_capacity(ex.tgt_out.len());
    for (&input, &target) in ex.tgt_in.iter().zip(&ex.tgt_out) {
        let w_prev = embed_target(b, ex, input);
        let (next, alpha) = decode_step(b, &state, w_prev, enc, keys)?;
        let d = output_distributions(b, cfg, &next, alpha, w_prev, ex)?;
        let p = mix(t, d.p_vocab, d.p_copy, d.p_gen);
        out.push(t.nll(p, target));
        state = next;
    }
    Ok(out)
}

/// Mean target negative log-likelihood `E` under teacher forcing.
pub fn sequence_nll(b: &Bound<'_, '_>, cfg: &ModelConfig, ex: &EncodedExample) -> Result<Var> {
    Ok(joint_loss(b, cfg, ex, 0.0)?.e)
}

/// Step-by-step access to the decoder for one encoded source.
pub struct Decoder<'b, 't, 'p> {
    bound: &'b Bound<'t, 'p>,
    cfg: &'b ModelConfig,
    ex: &'b EncodedExample,
    enc: EncoderOutput,
    keys: Var,
}

/// Distribution emitted by one decoder step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: DecoderState,
    pub probs: Vec<f64>,
    pub p_vocab: Vec<f64>,
    pub p_copy: Vec<f64>,
    pub p_gen: f64,
    pub alpha: Vec<f64>,
}

impl<'b, 't, 'p> Decoder<'b, 't, 'p> {
    pub fn new(bound: &'b Bound<'t, 'p>, cfg: &'b ModelConfig, ex: &'b EncodedExample) -> Result<Self> {
        let words = embed_words(bound, &ex.src_ids);
        let hidden = if cfg.feeds_lm() { Some(lm::lm_forward(bound, &words)?.hidden) } else { None };
        let enc = encode(bound, cfg, ex, &words, hidden.as_deref())?;
        let keys = attention_keys(bound, &enc);
        Ok(Self { bound, cfg, ex, enc, keys })
    }

    pub fn example(&self) -> &EncodedExample {
        self.ex
    }

    pub fn encoder(&self) -> &EncoderOutput {
        &self.enc
    }

    pub fn start(&self) -> DecoderState {
        initial_state(self.bound, &self.enc)
    }

    /// Feeds `token` (an extended id) and returns the next distribution.
    pub fn step(&self, state: &DecoderState, token: usize) -> Result<StepOutput> {
        let t = self.bound.tape();
        let w_prev = embed_target(self.bound, self.ex, token);
        let (next, alpha) = decode_step(self.bound, state, w_prev, &self.enc, self.keys)?;
        let d = output_distributions(self.bound, self.cfg, &next, alpha, w_prev, self.ex)?;
        let p = mix(t, d.p_vocab, d.p_copy, d.p_gen);
        Ok(StepOutput {
            state: next,
            probs: t.to_vec(p),
            p_vocab: t.to_vec(d.p_vocab),
            p_copy: t.to_vec(d.p_copy),
            p_gen: t.item(d.p_gen),
            alpha: t.to_vec(alpha),
        })
    }
}

/// Builds a tape and [`Decoder`] for `ex`, then hands it to `f`.
pub fn with_decoder<R>(
    params: &ParamSet,
    cfg: &ModelConfig,
    ex: &EncodedExample,
    f: impl FnOnce(&Decoder<'_, '_, '_>) -> Result<R>,
) -> Result<R> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, params);
    let decoder = Decoder::new(&bound, cfg, ex)?;
    f(&decoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn mix_hand_case() {
        let t = Tape::new();
        let pv = t.constant(Tensor::vector(vec![0.5, 0.5, 0.0]));
        let pc = t.constant(Tensor::vector(vec![0.0, 0.2, 0.8]));
        let g = t.constant(Tensor::scalar(0.3));
        let p = t.to_vec(mix(&t, pv, pc, g));
        for (a, b) in p.iter().zip([0.15, 0.29, 0.56]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mix_endpoints() {
        let t = Tape::new();
        let pv = t.constant(Tensor::vector(vec![0.25, 0.75, 0.0]));
        let pc = t.constant(Tensor::vector(vec![0.0, 0.4, 0.6]));
        let one = t.constant(Tensor::scalar(1.0));
        let zero = t.constant(Tensor::scalar(0.0));
        assert_eq!(t.to_vec(mix(&t, pv, pc, one)), t.to_vec(pv));
        assert_eq!(t.to_vec(mix(&t, pv, pc, zero)), t.to_vec(pc));
    }
}
