//! Self-verification suites over random tiny models: finite-difference
//! gradient checks, distribution normalization, and copy support.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::corpus::{encode_example, EncodedExample, Lexicon, RawTriple, TagSet, Vocabulary, BOS};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_params, ParamCheck};
use crate::lm;
use crate::math::abs;
use crate::model::{embed_words, init_params, joint_loss, ModelConfig};
use crate::params::{uniform, Bound};
use crate::qg::with_decoder;
use crate::tensor::Tensor;

/// Worst gradient disagreement seen for one primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub trials: usize,
}

type Objective = fn(&Tape<'_>, Var, &[usize], u64) -> Result<Var>;

struct Primitive {
    name: &'static str,
    /// Input length for the drawn dimensions.
    input: fn(&[usize]) -> usize,
    /// Inputs restricted to `[lo, hi]`.
    range: (f64, f64),
    objective: Objective,
}

fn matrix(t: &Tape<'_>, x: Var, offset: usize, rows: usize, cols: usize) -> Var {
    let parts: Vec<Var> = (0..rows).map(|r| t.slice(x, offset + r * cols, cols)).collect();
    t.stack(&parts)
}

/// `sum(y * w)` for a fixed pseudo-random `w`, so every output entry matters.
fn project(t: &Tape<'_>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(uniform(&mut rng, &t.shape(y), 1.0));
    t.sum(t.mul(y, w))
}

fn indices(seed: u64, count: usize, width: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..count).map(|_| rng.random_range(0..width)).collect()
}

fn primitives() -> Vec<Primitive> {
    fn p(name: &'static str, input: fn(&[usize]) -> usize, objective: Objective) -> Primitive {
        Primitive { name, input, range: (-1.5, 1.5), objective }
    }
    vec![
        p(
            "matmul",
            |d| d[0] * d[1] + d[1] * d[2],
            |t, x, d, s| {
                let a = matrix(t, x, 0, d[0], d[1]);
                let b = matrix(t, x, d[0] * d[1], d[1], d[2]);
                Ok(project(t, t.matmul(a, b), s))
            },
        ),
        p(
            "matvec",
            |d| d[0] * d[1] + d[1],
            |t, x, d, s| {
                let a = matrix(t, x, 0, d[0], d[1]);
                Ok(project(t, t.matvec(a, t.slice(x, d[0] * d[1], d[1])), s))
            },
        ),
        p(
            "vecmat",
            |d| d[0] + d[0] * d[1],
            |t, x, d, s| {
                let b = matrix(t, x, d[0], d[0], d[1]);
                Ok(project(t, t.vecmat(t.slice(x, 0, d[0]), b), s))
            },
        ),
        p("add", |d| 2 * d[0], |t, x, d, s| Ok(project(t, t.add(t.slice(x, 0, d[0]), t.slice(x, d[0], d[0])), s))),
        p("sub", |d| 2 * d[0], |t, x, d, s| Ok(project(t, t.sub(t.slice(x, 0, d[0]), t.slice(x, d[0], d[0])), s))),
        p("mul", |d| 2 * d[0], |t, x, d, s| Ok(project(t, t.mul(t.slice(x, 0, d[0]), t.slice(x, d[0], d[0])), s))),
        p("mul_shared", |d| d[0], |t, x, _, s| Ok(project(t, t.mul(x, x), s))),
        p(
            "add_row_broadcast",
            |d| d[0] * d[1] + d[1],
            |t, x, d, s| {
                let m = matrix(t, x, 0, d[0], d[1]);
                Ok(project(t, t.add_row_broadcast(m, t.slice(x, d[0] * d[1], d[1])), s))
            },
        ),
        p("affine", |d| d[0], |t, x, _, s| Ok(project(t, t.affine(x, -0.7, 0.3), s))),
        p("scale_by", |d| d[0] + 1, |t, x, d, s| Ok(project(t, t.scale_by(t.slice(x, 1, d[0]), t.slice(x, 0, 1)), s))),
        p(
            "concat",
            |d| d[0] + d[1],
            |t, x, d, s| Ok(project(t, t.concat(&[t.slice(x, d[0], d[1]), t.slice(x, 0, d[0])]), s)),
        ),
        p(
            "concat_rows",
            |d| d[0] * d[1] + d[0] * d[2],
            |t, x, d, s| {
                let a = matrix(t, x, 0, d[0], d[1]);
                let b = matrix(t, x, d[0] * d[1], d[0], d[2]);
                Ok(project(t, t.concat(&[a, b]), s))
            },
        ),
        p("stack", |d| d[0] * d[1], |t, x, d, s| Ok(project(t, matrix(t, x, 0, d[0], d[1]), s))),
        p("slice", |d| d[0] + d[1] + d[2], |t, x, d, s| Ok(project(t, t.slice(x, d[0], d[1]), s))),
        p(
            "gather_row",
            |d| d[0] * d[1],
            |t, x, d, s| {
                let m = matrix(t, x, 0, d[0], d[1]);
                let i = indices(s, 1, d[0])[0];
                Ok(project(t, t.gather_row(m, i), s))
            },
        ),
        p("sigmoid", |d| d[0], |t, x, _, s| Ok(project(t, t.sigmoid(x), s))),
        p("tanh", |d| d[0], |t, x, _, s| Ok(project(t, t.tanh(x), s))),
        p("softmax", |d| d[0], |t, x, _, s| Ok(project(t, t.softmax(x)?, s))),
        p(
            "scatter_add",
            |d| d[0],
            |t, x, d, s| {
                let idx = indices(s, d[0], d[1]);
                Ok(project(t, t.scatter_add(x, &idx, d[1]), s))
            },
        ),
        p("pad", |d| d[0], |t, x, d, s| Ok(project(t, t.pad(x, d[0] + d[1]), s))),
        Primitive {
            name: "nll",
            input: |d| d[0],
            range: (0.1, 1.0),
            objective: |t, x, d, s| Ok(t.nll(x, indices(s, 1, d[0])[0])),
        },
        p("pick", |d| d[0], |t, x, d, s| Ok(t.affine(t.pick(x, indices(s, 1, d[0])[0]), 2.0, 0.0))),
        p("sum", |d| d[0], |t, x, _, _| Ok(t.sum(t.mul(x, x)))),
        p("mean", |d| d[0], |t, x, _, _| Ok(t.mean(t.tanh(x)))),
        p(
            "mean_axis_rows",
            |d| d[0] * d[1],
            |t, x, d, s| Ok(project(t, t.mean_axis(matrix(t, x, 0, d[0], d[1]), 0), s)),
        ),
        p(
            "mean_axis_cols",
            |d| d[0] * d[1],
            |t, x, d, s| Ok(project(t, t.mean_axis(matrix(t, x, 0, d[0], d[1]), 1), s)),
        ),
        p(
            "sum_scalars",
            |d| d[0],
            |t, x, d, _| {
                let parts: Vec<Var> = (0..d[0]).map(|i| t.mul(t.pick(x, i), t.pick(x, (i + 1) % d[0]))).collect();
                Ok(t.sum_scalars(&parts))
            },
        ),
        p(
            "mean_scalars",
            |d| d[0],
            |t, x, d, _| {
                let parts: Vec<Var> = (0..d[0]).map(|i| t.tanh(t.pick(x, i))).collect();
                Ok(t.mean_scalars(&parts))
            },
        ),
    ]
}

/// Finite-difference check of every tape primitive on `trials` random draws
/// of dimensions in `1..=7`.
pub fn primitive_grad_suite(seed: u64, trials: usize, eps: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut out = Vec::new();
    for (k, prim) in primitives().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let dims = [rng.random_range(1..=7usize), rng.random_range(1..=7usize), rng.random_range(1..=7usize)];
            let n = (prim.input)(&dims);
            let data = (0..n).map(|_| rng.random_range(prim.range.0..=prim.range.1)).collect();
            let x = Tensor::vector(data);
            let s = seed ^ ((k as u64) << 32) ^ trial as u64;
            let err = grad_check(|t, v| (prim.objective)(t, v, &dims, s), &x, eps)
                .map_err(|e| crate::Error::NumericDomain(format!("{}: {e}", prim.name)))?;
            worst = worst.max(err);
        }
        out.push(PrimitiveCheck { name: prim.name, max_relative_error: worst, trials });
    }
    Ok(out)
}

/// `w0 .. w7` plus the specials (12 ids), tags `A`, `B`.
pub fn tiny_lexicon() -> Lexicon {
    let words: Vec<String> = (0..8).map(|i| format!("w{i}")).collect();
    Lexicon {
        words: Vocabulary::from_words(words).expect("nonempty"),
        pos: TagSet::from_tags(["A", "B"]),
        ner: TagSet::from_tags(["A", "B"]),
    }
}

/// Small dimensions everywhere, larger initial weights so gradients are not tiny.
pub fn tiny_config(lex: &Lexicon) -> ModelConfig {
    let mut cfg = ModelConfig::new(lex.words.len(), lex.pos.len(), lex.ner.len());
    cfg.word_dim = 4;
    cfg.feature_dim = 3;
    cfg.hidden = 5;
    cfg.lm_hidden = 4;
    cfg.attention_dim = 4;
    cfg.output_dim = 4;
    cfg.init_scale = 0.5;
    cfg
}

/// Random triple over the tiny lexicon's words and the out-of-vocabulary
/// words `x0 .. x3`, with a sentence of `2..=max_len` tokens.
pub fn random_triple(rng: &mut impl Rng, max_len: usize) -> RawTriple {
    let pool: Vec<String> = (0..8).map(|i| format!("w{i}")).chain((0..4).map(|i| format!("x{i}"))).collect();
    let tags = ["A", "B", "C"];
    let n = rng.random_range(2..=max_len.max(2));
    let pick = |rng: &mut _| pool.choose(rng).expect("nonempty pool").clone();
    let sentence: Vec<String> = (0..n).map(|_| pick(rng)).collect();
    let pos = (0..n).map(|_| tags.choose(rng).unwrap().to_string()).collect();
    let ner = (0..n).map(|_| tags.choose(rng).unwrap().to_string()).collect();
    let start = rng.random_range(0..n);
    let end = rng.random_range(start + 1..=n);
    let q = rng.random_range(1..=max_len.max(1));
    let question = (0..q).map(|_| pick(rng)).collect();
    RawTriple { sentence, pos, ner, answer_start: start, answer_end: end, question }
}

pub fn random_example(rng: &mut impl Rng, lex: &Lexicon, max_len: usize) -> EncodedExample {
    encode_example(&random_triple(rng, max_len), lex).expect("random triples are well formed")
}

/// Gradient magnitude below which central differences at `eps = 1e-5` on
/// an O(1) loss are dominated by rounding of the loss itself.
pub const RESOLUTION_FLOOR: f64 = 1e-6;

/// Worst disagreement for one loss over the checked examples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossCheck {
    /// Relative error over every coordinate.
    pub strict: f64,
    /// Relative error over coordinates with gradient magnitude at least [`RESOLUTION_FLOOR`].
    pub resolved: f64,
    /// Absolute error over the remaining coordinates.
    pub unresolved_abs: f64,
}

impl LossCheck {
    fn absorb(&mut self, c: &ParamCheck) {
        let (rel, absolute) = c.split_at(RESOLUTION_FLOOR);
        self.strict = self.strict.max(c.max_relative_error);
        self.resolved = self.resolved.max(rel);
        self.unresolved_abs = self.unresolved_abs.max(absolute);
    }
}

/// Gradient checks of the three losses.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossGradCheck {
    pub e: LossCheck,
    pub e_lm: LossCheck,
    pub e_total: LossCheck,
    pub coordinates: usize,
}

/// Checks `E`, `E_lm`, and `E + beta E_lm` against central differences on
/// random tiny models (sentences of at most 5 tokens).
pub fn model_grad_suite(seed: u64, examples: usize, beta: f64, eps: f64) -> Result<LossGradCheck> {
    let lex = tiny_lexicon();
    let cfg = tiny_config(&lex);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = LossGradCheck::default();
    for i in 0..examples {
        let params = init_params(&cfg, seed.wrapping_add(i as u64))?;
        let ex = random_example(&mut rng, &lex, 5);
        let e = grad_check_params(&params, |b| Ok(joint_loss(b, &cfg, &ex, beta)?.e), eps)?;
        let e_lm = grad_check_params(&params, |b| Ok(joint_loss(b, &cfg, &ex, beta)?.e_lm.expect("lm on")), eps)?;
        let total = grad_check_params(&params, |b| Ok(joint_loss(b, &cfg, &ex, beta)?.total), eps)?;
        report.e.absorb(&e);
        report.e_lm.absorb(&e_lm);
        report.e_total.absorb(&total);
        report.coordinates += e.coordinates;
    }
    Ok(report)
}

/// Worst deviation from a proper distribution over the visited model states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationCheck {
    pub states: usize,
    pub distributions: usize,
    /// Largest `|sum - 1|`.
    pub max_sum_error: f64,
    /// Smallest entry seen in any distribution.
    pub min_entry: f64,
}

impl NormalizationCheck {
    fn record(&mut self, p: &[f64]) {
        let sum: f64 = p.iter().sum();
        self.max_sum_error = self.max_sum_error.max(abs(sum - 1.0));
        self.min_entry = p.iter().copied().fold(self.min_entry, f64::min);
        self.distributions += 1;
    }
}

/// Visits `states` decoder states of random tiny models fed random tokens
/// and records every attention vector, component distribution, mixture, and
/// language-model softmax.
pub fn normalization_suite(seed: u64, states: usize) -> Result<NormalizationCheck> {
    let lex = tiny_lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = NormalizationCheck { states: 0, distributions: 0, max_sum_error: 0.0, min_entry: f64::INFINITY };
    let mut model = 0u64;
    while report.states < states {
        let mut cfg = tiny_config(&lex);
        cfg.init_scale = rng.random_range(0.1..2.0);
        let params = init_params(&cfg, seed.wrapping_add(model))?;
        model += 1;
        let ex = random_example(&mut rng, &lex, 7);
        {
            let tape = Tape::new();
            let b = Bound::new(&tape, &params);
            let words = embed_words(&b, &ex.src_ids);
            let out = lm::lm_forward(&b, &words)?;
            for &p in out.fwd_probs.iter().chain(&out.bwd_probs) {
                tape.with_values(p, |v| report.record(v));
            }
        }
        let steps = (states - report.states).min(10);
        with_decoder(&params, &cfg, &ex, |d| {
            let mut state = d.start();
            let mut token = BOS;
            for _ in 0..steps {
                let out = d.step(&state, token)?;
                report.record(&out.alpha);
                report.record(&out.p_vocab);
                report.record(&out.p_copy);
                report.record(&out.probs);
                report.states += 1;
                token = rng.random_range(0..ex.extended_size());
                state = out.state;
            }
            Ok(())
        })?;
    }
    Ok(report)
}

/// Examples where, with the generation gate forced to 0, the support of
/// `P(w)` differed from the set of source extended ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CopySupportCheck {
    pub examples: usize,
    pub mismatches: Vec<usize>,
}

pub fn copy_support_suite(seed: u64, examples: usize) -> Result<CopySupportCheck> {
    let lex = tiny_lexicon();
    let mut cfg = tiny_config(&lex);
    cfg.p_gen_override = Some(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = Vec::new();
    for i in 0..examples {
        let params = init_params(&cfg, seed.wrapping_add(i as u64))?;
        let ex = random_example(&mut rng, &lex, 7);
        let expected: BTreeSet<usize> = ex.src_ext_ids.iter().copied().collect();
        let support = with_decoder(&params, &cfg, &ex, |d| {
            let out = d.step(&d.start(), BOS)?;
            Ok(out.probs.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, _)| i).collect::<BTreeSet<_>>())
        })?;
        if support != expected {
            mismatches.push(i);
        }
    }
    Ok(CopySupportCheck { examples, mismatches })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_examples_include_copies() {
        let lex = tiny_lexicon();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let exs: Vec<_> = (0..50).map(|_| random_example(&mut rng, &lex, 5)).collect();
        assert!(exs.iter().all(|e| (2..=5).contains(&e.src_len())));
        assert!(exs.iter().any(|e| !e.oov_list.is_empty()));
        assert_eq!(lex.words.len(), 12);
    }
}
