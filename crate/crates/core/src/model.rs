//! Model configuration, parameter initialization, recurrent cells, and the
//! joint training objective `E + beta * E_lm`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::corpus::{AnswerTag, CaseTag, EncodedExample};
use crate::error::{contract, Error, Result};
use crate::lm::{self, LmNormalizer};
use crate::params::{tensor_rng, uniform, Bound, ParamSet};
use crate::qg;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub pos_tags: usize,
    pub ner_tags: usize,
    pub word_dim: usize,
    pub feature_dim: usize,
    /// Encoder (per direction) and decoder hidden size.
    pub hidden: usize,
    /// Language-model hidden size per direction.
    pub lm_hidden: usize,
    pub encoder_layers: usize,
    pub use_lm: bool,
    pub use_features: bool,
    /// When false the language model is still built and scored but its
    /// hidden states do not reach the encoder.
    pub lm_feeds_encoder: bool,
    pub attention_dim: usize,
    /// Width of the first layer of the vocabulary output network.
    pub output_dim: usize,
    pub lm_normalizer: LmNormalizer,
    pub init_scale: f64,
    /// Replaces the learned generation probability with a constant.
    pub p_gen_override: Option<f64>,
}

impl ModelConfig {
    /// Desk-scale defaults: 300-d words, 32-d features, 64-d recurrent states.
    pub fn new(vocab_size: usize, pos_tags: usize, ner_tags: usize) -> Self {
        Self {
            vocab_size,
            pos_tags,
            ner_tags,
            word_dim: 300,
            feature_dim: 32,
            hidden: 64,
            lm_hidden: 64,
            encoder_layers: 2,
            use_lm: true,
            use_features: true,
            lm_feeds_encoder: true,
            attention_dim: 64,
            output_dim: 64,
            lm_normalizer: LmNormalizer::PerDirection,
            init_scale: 0.1,
            p_gen_override: None,
        }
    }

    pub fn feeds_lm(&self) -> bool {
        self.use_lm && self.lm_feeds_encoder
    }

    /// Width of `[e_t; a_t; l_t; h_lm_t]` under this configuration.
    pub fn encoder_input_width(&self) -> usize {
        let mut w = self.word_dim + self.feature_dim;
        if self.use_features {
            w += 3 * self.feature_dim;
        }
        if self.feeds_lm() {
            w += 2 * self.lm_hidden;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("word_dim", self.word_dim),
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("lm_hidden", self.lm_hidden),
            ("encoder_layers", self.encoder_layers),
            ("attention_dim", self.attention_dim),
            ("output_dim", self.output_dim),
            ("pos_tags", self.pos_tags),
            ("ner_tags", self.ner_tags),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(contract!("model.{name} must be positive"));
        }
        if self.vocab_size <= crate::corpus::EOS {
            return Err(contract!("vocabulary must contain the four special tokens"));
        }
        if let Some(p) = self.p_gen_override {
            if !(0.0..=1.0).contains(&p) {
                return Err(contract!("generation probability override {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Name and shape of every tensor this configuration uses.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, wd, v) = (self.hidden, self.feature_dim, self.word_dim, self.vocab_size);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: String, shape: &[usize]| out.push((name, shape.to_vec()));

        add("qg.embed.word".into(), &[v, wd]);
        add("qg.embed.answer".into(), &[AnswerTag::COUNT, f]);
        if self.use_features {
            add("qg.embed.pos".into(), &[self.pos_tags, f]);
            add("qg.embed.ner".into(), &[self.ner_tags, f]);
            add("qg.embed.case".into(), &[CaseTag::COUNT, f]);
        }
        for layer in 0..self.encoder_layers {
            let input = if layer == 0 { self.encoder_input_width() } else { 2 * d };
            for dir in ["fwd", "bwd"] {
                add(format!("qg.enc.{layer}.{dir}.w"), &[4 * d, input + d]);
                add(format!("qg.enc.{layer}.{dir}.b"), &[4 * d]);
            }
        }
        for which in ["h", "c"] {
            add(format!("qg.bridge.{which}.w"), &[d, 2 * d]);
            add(format!("qg.bridge.{which}.b"), &[d]);
        }
        add("qg.dec.w".into(), &[4 * d, wd + 2 * d + d]);
        add("qg.dec.b".into(), &[4 * d]);
        let a = self.attention_dim;
        add("qg.attn.enc".into(), &[2 * d, a]);
        add("qg.attn.dec".into(), &[a, d]);
        add("qg.attn.b".into(), &[a]);
        add("qg.attn.v".into(), &[a]);
        add("qg.out.ff1.w".into(), &[self.output_dim, 3 * d]);
        add("qg.out.ff1.b".into(), &[self.output_dim]);
        add("qg.out.ff2.w".into(), &[v, self.output_dim]);
        add("qg.out.ff2.b".into(), &[v]);
        add("qg.pgen.w".into(), &[1, 3 * d + wd]);
        add("qg.pgen.b".into(), &[1]);
        if self.use_lm {
            let dl = self.lm_hidden;
            for dir in ["fwd", "bwd"] {
                add(format!("lm.{dir}.w"), &[4 * dl, wd + dl]);
                add(format!("lm.{dir}.b"), &[4 * dl]);
                add(format!("lm.out_{dir}"), &[v, dl]);
            }
        }
        out
    }
}

/// Fresh parameters; each tensor is drawn from its own name-keyed generator.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    for (name, shape) in cfg.tensor_shapes() {
        let t = uniform(&mut tensor_rng(seed, &name), &shape, cfg.init_scale);
        params.insert(name, t);
    }
    Ok(params)
}

/// Fails unless `params` holds exactly the tensors of `cfg`.
pub fn check_params(cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    let shapes = cfg.tensor_shapes();
    if shapes.len() != params.len() {
        return Err(contract!("configuration expects {} tensors, checkpoint has {}", shapes.len(), params.len()));
    }
    for (name, shape) in shapes {
        match params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => return Err(contract!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())),
            None => return Err(contract!("tensor `{name}` missing")),
        }
    }
    Ok(())
}

/// State of one LSTM cell.
#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

impl CellState {
    pub fn zeros(tape: &Tape<'_>, hidden: usize) -> Self {
        Self { h: tape.constant(Tensor::zeros(&[hidden])), c: tape.constant(Tensor::zeros(&[hidden])) }
    }
}

/// One LSTM step with weights `{prefix}.w` (`[4H, in + H]`, gate order
/// input, forget, candidate, output) and bias `{prefix}.b`.
pub fn lstm_step(b: &Bound<'_, '_>, prefix: &str, x: Var, prev: CellState) -> CellState {
    let t = b.tape();
    let w = b.get(&format!("{prefix}.w"));
    let bias = b.get(&format!("{prefix}.b"));
    let hidden = t.numel(prev.h);
    let xh = t.concat(&[x, prev.h]);
    let z = t.add(t.matvec(w, xh), bias);
    let i = t.sigmoid(t.slice(z, 0, hidden));
    let f = t.sigmoid(t.slice(z, hidden, hidden));
    let g = t.tanh(t.slice(z, 2 * hidden, hidden));
    let o = t.sigmoid(t.slice(z, 3 * hidden, hidden));
    let c = t.add(t.mul(f, prev.c), t.mul(i, g));
    let h = t.mul(o, t.tanh(c));
    CellState { h, c }
}

/// Runs a cell over `inputs`; states are returned in input order even when
/// reading right to left.
pub fn run_lstm(b: &Bound<'_, '_>, prefix: &str, inputs: &[Var], hidden: usize, reverse: bool) -> Vec<CellState> {
    let mut state = CellState::zeros(b.tape(), hidden);
    let mut out = alloc::vec![state; inputs.len()];
    let order: Vec<usize> = if reverse { (0..inputs.len()).rev().collect() } else { (0..inputs.len()).collect() };
    for idx in order {
        state = lstm_step(b, prefix, inputs[idx], state);
        out[idx] = state;
    }
    out
}

/// Word embeddings of the source (fixed-vocabulary ids).
pub fn embed_words(b: &Bound<'_, '_>, ids: &[usize]) -> Vec<Var> {
    let table = b.get("qg.embed.word");
    ids.iter().map(|&id| b.tape().gather_row(table, id)).collect()
}

/// Loss nodes of one example.
#[derive(Debug, Clone)]
pub struct JointLoss {
    /// Mean target negative log-likelihood `E`.
    pub e: Var,
    /// Language-model loss `E_lm`, when the language model exists.
    pub e_lm: Option<Var>,
    /// `E + beta * E_lm`.
    pub total: Var,
    /// Per-target-token negative log-likelihoods.
    pub token_nll: Vec<Var>,
}

/// Forward pass of the whole model on one example under teacher forcing.
pub fn joint_loss(b: &Bound<'_, '_>, cfg: &ModelConfig, ex: &EncodedExample, beta: f64) -> Result<JointLoss> {
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::Contract(format!("beta must be nonnegative, got {beta}")));
    }
    let t = b.tape();
    let words = embed_words(b, &ex.src_ids);
    let (e_lm, lm_hidden) = if cfg.use_lm {
        let out = lm::lm_forward(b, &words)?;
        let loss = lm::lm_loss(t, &out, &ex.src_ids, cfg.lm_normalizer)?;
        (Some(loss), if cfg.lm_feeds_encoder { Some(out.hidden) } else { None })
    } else {
        (None, None)
    };
    let enc = qg::encode(b, cfg, ex, &words, lm_hidden.as_deref())?;
    let token_nll = qg::teacher_forced_nll(b, cfg, ex, &enc)?;
    let e = t.mean_scalars(&token_nll);
    let total = match e_lm {
        Some(lm) => t.add(e, t.affine(lm, beta, 0.0)),
        None => e,
    };
    Ok(JointLoss { e, e_lm, total, token_nll })
}

/// Plain values of a [`JointLoss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub e: f64,
    pub e_lm: f64,
    pub total: f64,
}

impl JointLoss {
    pub fn values(&self, tape: &Tape<'_>) -> LossValues {
        LossValues { e: tape.item(self.e), e_lm: self.e_lm.map_or(0.0, |v| tape.item(v)), total: tape.item(self.total) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_widths() {
        let mut cfg = ModelConfig::new(20, 5, 5);
        cfg.use_lm = false;
        assert_eq!(cfg.encoder_input_width(), 428);
        cfg.use_lm = true;
        assert_eq!(cfg.encoder_input_width(), 556);
        cfg.use_features = false;
        assert_eq!(cfg.encoder_input_width(), 300 + 32 + 128);
        cfg.lm_feeds_encoder = false;
        assert_eq!(cfg.encoder_input_width(), 332);
    }

    #[test]
    fn init_is_keyed_by_name() {
        let mut base = ModelConfig::new(12, 3, 3);
        base.use_lm = false;
        let mut full = base.clone();
        full.use_lm = true;
        full.lm_feeds_encoder = false;
        let a = init_params(&base, 5).unwrap();
        let b = init_params(&full, 5).unwrap();
        for (name, t) in a.iter() {
            assert_eq!(b.get(name), Some(t), "{name}");
        }
        assert!(b.len() > a.len());
        check_params(&base, &a).unwrap();
        assert!(check_params(&full, &a).is_err());
    }

    #[test]
    fn zero_weight_lstm_is_input_independent() {
        let mut p = ParamSet::new();
        p.insert("c.w", Tensor::zeros(&[8, 5]));
        p.insert("c.b", Tensor::zeros(&[8]));
        let outputs: Vec<Vec<f64>> = [[1.0, -2.0, 3.0], [0.0, 9.0, -4.0]]
            .iter()
            .map(|x| {
                let tape = Tape::new();
                let b = Bound::new(&tape, &p);
                let x = tape.constant(Tensor::vector(x.to_vec()));
                let s = lstm_step(&b, "c", x, CellState::zeros(&tape, 2));
                tape.to_vec(s.h)
            })
            .collect();
        assert_eq!(outputs[0], outputs[1]);
        // h = sigmoid(0) * tanh(sigmoid(0) * tanh(0)) = 0
        assert_eq!(outputs[0], alloc::vec![0.0, 0.0]);
    }
}
