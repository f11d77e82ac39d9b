use std::collections::BTreeSet;

use proptest::prelude::*;
use qgen_core::autograd::Tape;
use qgen_core::checks::{copy_support_suite, normalization_suite, random_triple, tiny_config, tiny_lexicon};
use qgen_core::corpus::{build_vocabulary, decode_ids, encode_example, Lexicon, RawTriple};
use qgen_core::lm::{lm_forward, lm_loss};
use qgen_core::math::softmax;
use qgen_core::metrics::{bleu, distinct_n, perplexity, token_nlls};
use qgen_core::model::{embed_words, init_params};
use qgen_core::params::Bound;
use qgen_core::qg::sequence_nll;
use qgen_core::search::{beam_search, decode_example, SearchConfig};
use qgen_core::train::average_checkpoints;
use qgen_core::{ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn triple(seed: u64, max_len: usize) -> RawTriple {
    random_triple(&mut ChaCha8Rng::seed_from_u64(seed), max_len)
}

#[test]
fn every_distribution_is_normalized() {
    let r = normalization_suite(21, 1000).unwrap();
    assert_eq!(r.states, 1000);
    assert!(r.max_sum_error <= 1e-9, "{r:?}");
    assert!(r.min_entry >= 0.0, "{r:?}");
}

#[test]
fn copy_only_support_is_the_source() {
    let r = copy_support_suite(4, 100).unwrap();
    assert!(r.mismatches.is_empty(), "{r:?}");
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-30.0f64..30.0, 1..12), shift in -50.0f64..50.0) {
        let p = softmax(&logits).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn encoding_round_trips_source_surfaces(seed in any::<u64>()) {
        let lex = tiny_lexicon();
        let t = triple(seed, 7);
        let ex = encode_example(&t, &lex).unwrap();
        prop_assert_eq!(decode_ids(&ex.src_ext_ids, &ex, &lex.words).unwrap(), t.sentence.clone());
        prop_assert!(ex.src_ext_ids.iter().all(|&i| i < ex.extended_size()));
        let lens = [ex.src_ids.len(), ex.answer_tags.len(), ex.pos_ids.len(), ex.ner_ids.len(), ex.case_ids.len()];
        prop_assert!(lens.iter().all(|&n| n == t.sentence.len()));
    }

    #[test]
    fn vocabulary_build_is_deterministic(seeds in prop::collection::vec(any::<u64>(), 1..8), cap in 1usize..20) {
        let corpus: Vec<RawTriple> = seeds.iter().map(|&s| triple(s, 6)).collect();
        let a = build_vocabulary(&corpus, cap).unwrap();
        let mut reversed = corpus.clone();
        reversed.reverse();
        prop_assert_eq!(&a, &build_vocabulary(&corpus, cap).unwrap());
        prop_assert_eq!(&a, &build_vocabulary(&reversed, cap).unwrap());
        prop_assert!(a.len() <= cap + 4);
    }

    #[test]
    fn distinct_ignores_hypothesis_order(seeds in prop::collection::vec(any::<u64>(), 1..10), n in 1usize..3) {
        let hyps: Vec<Vec<String>> = seeds.iter().map(|&s| triple(s, 6).question).collect();
        let mut rev = hyps.clone();
        rev.reverse();
        prop_assert_eq!(distinct_n(&hyps, n).ok(), distinct_n(&rev, n).ok());
    }

    #[test]
    fn bleu_is_bounded_and_perfect_on_itself(seeds in prop::collection::vec(any::<u64>(), 1..10)) {
        let refs: Vec<Vec<String>> = seeds.iter().map(|&s| triple(s, 6).question).collect();
        let hyps: Vec<Vec<String>> = seeds.iter().map(|&s| triple(s ^ 1, 6).question).collect();
        for b in bleu(&hyps, &refs, 4).unwrap() {
            prop_assert!((0.0..=100.0).contains(&b));
        }
        if refs.iter().map(Vec::len).sum::<usize>() >= 4 && refs.iter().all(|r| r.len() >= 4) {
            for b in bleu(&refs, &refs, 4).unwrap() {
                prop_assert!((b - 100.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn averaging_ignores_input_order(values in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..7), rot in 0usize..7) {
        let sets: Vec<ParamSet> = values.iter().map(|v| {
            let mut p = ParamSet::new();
            p.insert("w", Tensor::vector(v.clone()));
            p
        }).collect();
        let refs: Vec<&ParamSet> = sets.iter().collect();
        let mut rotated = refs.clone();
        rotated.rotate_left(rot % refs.len());
        let a = average_checkpoints(&refs).unwrap();
        let b = average_checkpoints(&rotated).unwrap();
        prop_assert_eq!(a.get("w").unwrap().data(), b.get("w").unwrap().data());
    }
}

#[test]
fn averaging_spec_case() {
    let sets: Vec<ParamSet> = (0..5)
        .map(|i| {
            let mut p = ParamSet::new();
            p.insert("w", Tensor::scalar(i as f64));
            p
        })
        .collect();
    let refs: Vec<&ParamSet> = sets.iter().collect();
    assert_eq!(average_checkpoints(&refs).unwrap().get("w").unwrap().data(), &[2.0]);
}

fn swap_directions(p: &ParamSet) -> ParamSet {
    let mut q = p.clone();
    for (a, b) in [("lm.fwd.w", "lm.bwd.w"), ("lm.fwd.b", "lm.bwd.b"), ("lm.out_fwd", "lm.out_bwd")] {
        let (ta, tb) = (p.get(a).unwrap().clone(), p.get(b).unwrap().clone());
        *q.get_mut(a).unwrap() = tb;
        *q.get_mut(b).unwrap() = ta;
    }
    q
}

fn lm_value(params: &ParamSet, ids: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let lex = tiny_lexicon();
    let cfg = tiny_config(&lex);
    let tape = Tape::new();
    let b = Bound::new(&tape, params);
    let out = lm_forward(&b, &embed_words(&b, ids)).unwrap();
    let loss = lm_loss(&tape, &out, ids, cfg.lm_normalizer).unwrap();
    (tape.item(loss), out.fwd_probs.iter().map(|&p| tape.to_vec(p)).collect())
}

#[test]
fn reversing_the_input_swaps_directions() {
    let lex = tiny_lexicon();
    let cfg = tiny_config(&lex);
    for seed in 0..20u64 {
        let params = init_params(&cfg, seed).unwrap();
        let ex = encode_example(&triple(seed, 7), &lex).unwrap();
        let ids = ex.src_ids.clone();
        let mut rev = ids.clone();
        rev.reverse();
        let (forward, _) = lm_value(&params, &ids);
        let (backward, _) = lm_value(&swap_directions(&params), &rev);
        assert!((forward - backward).abs() <= 1e-12 * forward.abs().max(1.0), "{forward} vs {backward}");
    }
}

#[test]
fn forward_predictions_ignore_later_tokens() {
    let lex = tiny_lexicon();
    let cfg = tiny_config(&lex);
    let params = init_params(&cfg, 3).unwrap();
    let ids = vec![4, 9, 6, 11, 5, 7];
    let (_, base) = lm_value(&params, &ids);
    for cut in 1..ids.len() {
        let mut changed = ids.clone();
        for id in &mut changed[cut..] {
            *id = if *id == 8 { 10 } else { 8 };
        }
        let (_, p) = lm_value(&params, &changed);
        // prediction t reads tokens 0..=t
        assert_eq!(&p[..cut], &base[..cut], "cut {cut}");
        if cut < p.len() {
            assert_ne!(p[cut], base[cut]);
        }
    }
}

#[test]
fn perplexity_is_exp_of_pooled_nll() {
    let lex = tiny_lexicon();
    let cfg = tiny_config(&lex);
    let params = init_params(&cfg, 6).unwrap();
    let data: Vec<_> = (0..6).map(|s| encode_example(&triple(s, 6), &lex).unwrap()).collect();
    let mut pooled = Vec::new();
    for ex in &data {
        let tape = Tape::new();
        let b = Bound::new(&tape, &params);
        let e = tape.item(sequence_nll(&b, &cfg, ex).unwrap());
        let per_token = token_nlls(&params, &cfg, std::slice::from_ref(ex)).unwrap();
        let mean = per_token.iter().sum::<f64>() / per_token.len() as f64;
        assert!((mean - e).abs() <= 1e-12, "{mean} vs {e}");
        pooled.extend(per_token);
    }
    let expected = (pooled.iter().sum::<f64>() / pooled.len() as f64).exp();
    let ppl = perplexity(&params, &cfg, &data).unwrap();
    assert!((ppl - expected).abs() <= 1e-9 * expected, "{ppl} vs {expected}");
    assert!(ppl >= 1.0);
}

#[test]
fn beam_results_are_ranked_bounded_and_replayable() {
    let lex = tiny_lexicon();
    let cfg = tiny_config(&lex);
    for seed in 0..10u64 {
        let params = init_params(&cfg, seed).unwrap();
        let ex = encode_example(&triple(seed + 50, 6), &lex).unwrap();
        for k in [1, 3, 5] {
            let search = SearchConfig { beam_size: k, max_len: 6, suppress_unk: false };
            let hyps = decode_example(&params, &cfg, &ex, &search).unwrap();
            assert!(!hyps.is_empty() && hyps.len() <= k);
            assert!(hyps.windows(2).all(|w| w[0].score >= w[1].score));
            for h in &hyps {
                let replay: f64 = h.step_log_probs.iter().sum();
                assert!((replay - h.log_prob).abs() <= 1e-9);
                assert_eq!(h.step_log_probs.len(), h.tokens.len());
            }
        }
    }
}

/// Next-token distributions read from a fixed table keyed by the prefix.
struct Table(fn(&[usize]) -> Vec<(usize, f64)>, usize);

impl qgen_core::search::StepModel for Table {
    type State = Vec<usize>;

    fn initial(&self) -> qgen_core::Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn step(&self, state: &Vec<usize>, token: usize) -> qgen_core::Result<(Vec<usize>, Vec<f64>)> {
        let mut prefix = state.clone();
        if token != qgen_core::corpus::BOS {
            prefix.push(token);
        }
        let mut p = vec![0.0; self.1];
        for (i, v) in (self.0)(&prefix) {
            p[i] = v;
        }
        Ok((prefix, p))
    }
}

fn best_raw(hyps: &[qgen_core::search::Hypothesis<Vec<usize>>]) -> f64 {
    hyps.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn a_wider_beam_can_lose_the_greedy_path() {
    const EOS: usize = 3;
    let (a, b) = (4, 5);
    let table = Table(
        |prefix| match prefix {
            [] => vec![(4, 0.55), (5, 0.45)],
            [4] => (6..11).map(|c| (c, 0.2)).collect(),
            [4, _] => vec![(EOS, 1.0)],
            [5] => vec![(6, 0.5), (7, 0.5)],
            [5, _] => (6..11).map(|c| (c, 0.2)).collect(),
            _ => vec![(EOS, 1.0)],
        },
        11,
    );
    let narrow = beam_search(&table, &SearchConfig { beam_size: 1, max_len: 5, suppress_unk: false }).unwrap();
    let wide = beam_search(&table, &SearchConfig { beam_size: 2, max_len: 5, suppress_unk: false }).unwrap();
    assert_eq!(narrow[0].tokens[0], a);
    assert!(wide.iter().all(|h| h.tokens[0] == b));
    assert!((best_raw(&narrow) - 0.11f64.ln()).abs() < 1e-12);
    assert!((best_raw(&wide) - 0.045f64.ln()).abs() < 1e-12);
}

/// Pseudo-random distribution over `{EOS, 4, 5}` for every prefix.
fn hashed(prefix: &[usize]) -> Vec<(usize, f64)> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &t in prefix {
        h = (h ^ t as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let w: Vec<f64> = (0..3).map(|i| 1.0 + ((h >> (i * 16)) & 0xffff) as f64 / 4096.0).collect();
    let z: f64 = w.iter().sum();
    vec![(3, w[0] / z), (4, w[1] / z), (5, w[2] / z)]
}

fn exhaustive_best(prefix: &mut Vec<usize>, lp: f64, max_len: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for (t, p) in hashed(prefix) {
        let lp = lp + p.ln();
        if t == 3 || prefix.len() + 1 == max_len {
            best = best.max(lp);
        } else {
            prefix.push(t);
            best = best.max(exhaustive_best(prefix, lp, max_len));
            prefix.pop();
        }
    }
    best
}

#[test]
fn an_exhaustive_beam_finds_the_best_sequence() {
    for max_len in 1..=5 {
        let table = Table(hashed, 6);
        let wide = beam_search(&table, &SearchConfig { beam_size: 1000, max_len, suppress_unk: false }).unwrap();
        let optimum = exhaustive_best(&mut Vec::new(), 0.0, max_len);
        assert!((best_raw(&wide) - optimum).abs() < 1e-12, "len {max_len}");
        for k in 1..6 {
            let h = beam_search(&table, &SearchConfig { beam_size: k, max_len, suppress_unk: false }).unwrap();
            assert!(best_raw(&h) <= optimum + 1e-12);
        }
    }
}

#[test]
fn copied_words_are_only_source_words() {
    let lex: Lexicon = tiny_lexicon();
    let mut cfg = tiny_config(&lex);
    cfg.p_gen_override = Some(0.0);
    let params = init_params(&cfg, 12).unwrap();
    for seed in 0..10 {
        let t = triple(seed, 6);
        let ex = encode_example(&t, &lex).unwrap();
        let search = SearchConfig { beam_size: 3, max_len: 6, suppress_unk: false };
        let best = decode_example(&params, &cfg, &ex, &search).unwrap().swap_remove(0);
        let src: BTreeSet<usize> = ex.src_ext_ids.iter().copied().collect();
        assert!(best.tokens.iter().all(|tok| src.contains(tok) || *tok == 3));
    }
}
