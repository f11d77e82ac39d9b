//! Beam search and greedy decoding over the extended vocabulary.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::corpus::{decode_ids, EncodedExample, Vocabulary, BOS, EOS, UNK};
use crate::error::{contract, Result};
use crate::math::{argmax, ln};
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::qg::{with_decoder, Decoder, DecoderState};

/// Anything that turns a fed token into a next-token distribution.
pub trait StepModel {
    type State: Clone;

    fn initial(&self) -> Result<Self::State>;

    /// Feeds `token` and returns the new state with the distribution over
    /// the next token.
    fn step(&self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

impl StepModel for Decoder<'_, '_, '_> {
    type State = DecoderState;

    fn initial(&self) -> Result<DecoderState> {
        Ok(self.start())
    }

    fn step(&self, state: &DecoderState, token: usize) -> Result<(DecoderState, Vec<f64>)> {
        let out = Decoder::step(self, state, token)?;
        Ok((out.state, out.probs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Never emit UNK.
    pub suppress_unk: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { beam_size: 12, max_len: 30, suppress_unk: false }
    }
}

impl SearchConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self { beam_size: 1, max_len, suppress_unk: false }
    }
}

#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    /// Emitted extended ids, including a final EOS when finished by it.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Log-probability of each emitted token.
    pub step_log_probs: Vec<f64>,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// Length-normalized log-probability.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            self.log_prob
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    pub fn ended_by_eos(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

fn check(cfg: &SearchConfig) -> Result<()> {
    if cfg.beam_size == 0 || cfg.max_len == 0 {
        return Err(contract!("beam size and max length must be at least 1"));
    }
    Ok(())
}

fn allowed(cfg: &SearchConfig, token: usize, p: f64) -> bool {
    p > 0.0 && !(cfg.suppress_unk && token == UNK)
}

/// Always takes the most probable next token (lowest id on ties).
pub fn greedy_decode<M: StepModel>(model: &M, cfg: &SearchConfig) -> Result<Hypothesis<M::State>> {
    check(cfg)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        step_log_probs: Vec::new(),
        state: model.initial()?,
        finished: false,
    };
    let mut last = BOS;
    for _ in 0..cfg.max_len {
        let (state, mut probs) = model.step(&hyp.state, last)?;
        for (i, p) in probs.iter_mut().enumerate() {
            if !allowed(cfg, i, *p) {
                *p = f64::NEG_INFINITY;
            }
        }
        let token = argmax(&probs);
        let lp = ln(probs[token]);
        hyp.tokens.push(token);
        hyp.step_log_probs.push(lp);
        hyp.log_prob += lp;
        hyp.state = state;
        last = token;
        if token == EOS {
            break;
        }
    }
    hyp.finished = true;
    Ok(hyp)
}

struct Candidate {
    parent: usize,
    token: usize,
    log_prob: f64,
    step_lp: f64,
}

fn by_log_prob(a: &Candidate, b: &Candidate) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then(a.parent.cmp(&b.parent)).then(a.token.cmp(&b.token))
}

fn by_score<S>(a: &Hypothesis<S>, b: &Hypothesis<S>) -> Ordering {
    b.score().total_cmp(&a.score()).then(b.log_prob.total_cmp(&a.log_prob)).then(a.tokens.cmp(&b.tokens))
}

fn settled<S>(finished: &mut [Hypothesis<S>], live: &[Hypothesis<S>], k: usize, max_len: usize) -> bool {
    if finished.len() < k {
        return false;
    }
    finished.sort_by(by_score);
    let bar = finished[k - 1].score();
    let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
    best_live / (max_len as f64) < bar
}

/// Beam search. Each step keeps the `beam_size` best expansions by total
/// log-probability; an expansion ending in EOS leaves the beam and joins the
/// finished pool. Search stops when the beam empties, `max_len` tokens were
/// emitted, or no live hypothesis can still reach the pool's top
/// `beam_size`: a hypothesis at log-probability `L` scores at most
/// `L / max_len` however it continues. Finished hypotheses are ranked by
/// length-normalized log-probability.
pub fn beam_search<M: StepModel>(model: &M, cfg: &SearchConfig) -> Result<Vec<Hypothesis<M::State>>> {
    check(cfg)?;
    let k = cfg.beam_size;
    let mut live = alloc::vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        step_log_probs: Vec::new(),
        state: model.initial()?,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis<M::State>> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut states = Vec::with_capacity(live.len());
        let mut candidates: Vec<Candidate> = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let last = hyp.tokens.last().copied().unwrap_or(BOS);
            let (state, probs) = model.step(&hyp.state, last)?;
            let mut local: Vec<Candidate> = probs
                .iter()
                .enumerate()
                .filter(|&(i, &p)| allowed(cfg, i, p))
                .map(|(token, &p)| {
                    let step_lp = ln(p);
                    Candidate { parent, token, log_prob: hyp.log_prob + step_lp, step_lp }
                })
                .collect();
            // only a hypothesis's own top k can survive the global cut
            if local.len() > k {
                local.select_nth_unstable_by(k - 1, by_log_prob);
                local.truncate(k);
            }
            candidates.extend(local);
            states.push(state);
        }
        candidates.sort_by(by_log_prob);
        candidates.truncate(k);

        let mut next = Vec::with_capacity(k);
        for c in candidates {
            let parent = &live[c.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(c.token);
            let mut step_log_probs = parent.step_log_probs.clone();
            step_log_probs.push(c.step_lp);
            let hyp = Hypothesis {
                tokens,
                log_prob: c.log_prob,
                step_log_probs,
                state: states[c.parent].clone(),
                finished: c.token == EOS,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() || settled(&mut finished, &live, k, cfg.max_len) {
            break;
        }
    }
    for mut hyp in live {
        if hyp.tokens.len() == cfg.max_len {
            hyp.finished = true;
            finished.push(hyp);
        }
    }
    finished.sort_by(by_score);
    finished.truncate(k);
    Ok(finished)
}

/// Surface tokens of a decoded id sequence, EOS removed.
pub fn resolve_copies(tokens: &[usize], ex: &EncodedExample, vocab: &Vocabulary) -> Result<Vec<String>> {
    let limit = ex.extended_size();
    if let Some(&bad) = tokens.iter().find(|&&id| id >= limit) {
        return Err(contract!("token id {bad} outside extended vocabulary of size {limit}"));
    }
    let kept: Vec<usize> = tokens.iter().copied().filter(|&id| id != EOS).collect();
    decode_ids(&kept, ex, vocab)
}

/// A finished hypothesis detached from its decoder state.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub step_log_probs: Vec<f64>,
    pub score: f64,
}

impl<S> From<Hypothesis<S>> for Decoded {
    fn from(h: Hypothesis<S>) -> Self {
        let score = h.score();
        Self { tokens: h.tokens, log_prob: h.log_prob, step_log_probs: h.step_log_probs, score }
    }
}

/// Ranked beam-search hypotheses for one example.
pub fn decode_example(
    params: &ParamSet,
    cfg: &ModelConfig,
    ex: &EncodedExample,
    search: &SearchConfig,
) -> Result<Vec<Decoded>> {
    with_decoder(params, cfg, ex, |d| Ok(beam_search(d, search)?.into_iter().map(Decoded::from).collect()))
}

/// Greedy decode of one example.
pub fn decode_greedy(params: &ParamSet, cfg: &ModelConfig, ex: &EncodedExample, max_len: usize) -> Result<Decoded> {
    with_decoder(params, cfg, ex, |d| Ok(greedy_decode(d, &SearchConfig::greedy(max_len))?.into()))
}

/// Best question for every example as surface tokens.
pub fn generate(
    params: &ParamSet,
    cfg: &ModelConfig,
    examples: &[EncodedExample],
    vocab: &Vocabulary,
    search: &SearchConfig,
) -> Result<Vec<Vec<String>>> {
    examples
        .iter()
        .map(|ex| {
            let best = decode_example(params, cfg, ex, search)?.swap_remove(0);
            resolve_copies(&best.tokens, ex, vocab)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Distribution depends only on the tokens emitted so far.
    struct Table<F: Fn(&[usize]) -> Vec<f64>>(F);

    impl<F: Fn(&[usize]) -> Vec<f64>> StepModel for Table<F> {
        type State = Vec<usize>;
        fn initial(&self) -> Result<Vec<usize>> {
            Ok(Vec::new())
        }
        fn step(&self, state: &Vec<usize>, token: usize) -> Result<(Vec<usize>, Vec<f64>)> {
            let mut s = state.clone();
            if token != BOS {
                s.push(token);
            }
            let p = (self.0)(&s);
            Ok((s, p))
        }
    }

    const A: usize = 4;
    const B: usize = 5;

    fn two_step(prefix: &[usize]) -> Vec<f64> {
        let mut p = vec![0.0; 6];
        if prefix.is_empty() {
            p[A] = 0.6;
            p[B] = 0.4;
        } else {
            p[EOS] = 1.0;
        }
        p
    }

    #[test]
    fn two_step_ranking() {
        let hyps =
            beam_search(&Table(two_step), &SearchConfig { beam_size: 2, max_len: 5, suppress_unk: false }).unwrap();
        assert_eq!(hyps.len(), 2);
        assert_eq!(hyps[0].tokens, vec![A, EOS]);
        assert!((hyps[0].log_prob - ln(0.6)).abs() < 1e-12);
        assert_eq!(hyps[1].tokens, vec![B, EOS]);
        assert!((hyps[1].log_prob - ln(0.4)).abs() < 1e-12);
    }

    #[test]
    fn immediate_eos_gives_empty_question() {
        let m = Table(|_: &[usize]| {
            let mut p = vec![0.0; 6];
            p[EOS] = 1.0;
            p
        });
        let hyps = beam_search(&m, &SearchConfig::default()).unwrap();
        assert_eq!(hyps.len(), 1);
        assert_eq!(hyps[0].tokens, vec![EOS]);
        assert_eq!(hyps[0].log_prob, 0.0);
    }

    #[test]
    fn beam_one_is_greedy() {
        let m = Table(|prefix: &[usize]| {
            let mut p = [0.05; 8];
            let favourite = 4 + (prefix.len() * 3) % 4;
            p[favourite] = 0.4;
            p[EOS] = if prefix.len() >= 4 { 0.5 } else { 0.01 };
            let s: f64 = p.iter().sum();
            p.iter().map(|x| x / s).collect()
        });
        let cfg = SearchConfig { beam_size: 1, max_len: 10, suppress_unk: false };
        let beam = beam_search(&m, &cfg).unwrap();
        let greedy = greedy_decode(&m, &cfg).unwrap();
        assert_eq!(beam.len(), 1);
        assert_eq!(beam[0].tokens, greedy.tokens);
        assert_eq!(beam[0].log_prob.to_bits(), greedy.log_prob.to_bits());
    }

    #[test]
    fn max_length_finishes_hypotheses() {
        let m = Table(|_: &[usize]| vec![0.0, 0.0, 0.0, 0.1, 0.9]);
        let hyps = beam_search(&m, &SearchConfig { beam_size: 3, max_len: 3, suppress_unk: false }).unwrap();
        assert!(hyps.iter().all(|h| h.finished));
        assert_eq!(hyps[0].tokens, vec![4, 4, 4]);
        assert!(!hyps[0].ended_by_eos());
        let g = greedy_decode(&m, &SearchConfig::greedy(3)).unwrap();
        assert_eq!(g.tokens, vec![4, 4, 4]);
    }

    #[test]
    fn unk_suppression() {
        let m = Table(
            |prefix: &[usize]| {
                if prefix.is_empty() {
                    vec![0.0, 0.7, 0.0, 0.0, 0.3]
                } else {
                    vec![0.0, 0.0, 0.0, 1.0, 0.0]
                }
            },
        );
        let cfg = SearchConfig { beam_size: 2, max_len: 4, suppress_unk: true };
        let hyps = beam_search(&m, &cfg).unwrap();
        assert!(hyps.iter().all(|h| !h.tokens.contains(&UNK)));
        assert_eq!(greedy_decode(&m, &cfg).unwrap().tokens, vec![4, EOS]);
    }

    #[test]
    fn rejects_zero_sizes() {
        let cfg = SearchConfig { beam_size: 0, max_len: 3, suppress_unk: false };
        assert!(beam_search(&Table(two_step), &cfg).is_err());
        assert!(greedy_decode(&Table(two_step), &SearchConfig::greedy(0)).is_err());
    }

    fn example_with_oov(vocab: &Vocabulary) -> EncodedExample {
        EncodedExample {
            src_ids: vec![UNK],
            src_ext_ids: vec![vocab.len()],
            oov_list: vec!["zorblat".into()],
            answer_tags: vec![crate::corpus::AnswerTag::Begin],
            pos_ids: vec![0],
            ner_ids: vec![0],
            case_ids: vec![0],
            tgt_in: vec![BOS],
            tgt_out: vec![EOS],
            vocab_size: vocab.len(),
        }
    }

    #[test]
    fn copies_resolve_to_source_words() {
        let vocab = Vocabulary::from_words(["a", "what", "is", "it", "?"]).unwrap();
        let ex = example_with_oov(&vocab);
        let what = vocab.id("what").unwrap();
        let q = vocab.id("?").unwrap();
        assert_eq!(resolve_copies(&[what, q], &ex, &vocab).unwrap(), vec!["what", "?"]);
        assert_eq!(resolve_copies(&[vocab.len()], &ex, &vocab).unwrap(), vec!["zorblat"]);
        assert_eq!(resolve_copies(&[what, vocab.len(), q, EOS], &ex, &vocab).unwrap(), vec!["what", "zorblat", "?"]);
        assert!(resolve_copies(&[vocab.len() + 1], &ex, &vocab).is_err());
    }
}
