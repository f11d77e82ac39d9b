use qgen_core::autograd::Tape;
use qgen_core::checks::{model_grad_suite, primitive_grad_suite, random_example, tiny_config, tiny_lexicon};
use qgen_core::corpus::{encode_example, Lexicon, RawTriple, TagSet, Vocabulary};
use qgen_core::gradcheck::grad_check_params;
use qgen_core::lm::{lm_forward, lm_loss};
use qgen_core::model::{embed_words, init_params, joint_loss};
use qgen_core::params::Bound;
use qgen_core::qg::{attention, attention_keys, encode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-3;

#[test]
fn every_primitive_matches_finite_differences() {
    let report = primitive_grad_suite(11, 8, EPS).unwrap();
    assert!(report.len() >= 20);
    for p in &report {
        assert!(p.max_relative_error < TOL, "{}: {}", p.name, p.max_relative_error);
    }
}

#[test]
fn joint_losses_match_finite_differences() {
    let r = model_grad_suite(5, 3, 0.6, EPS).unwrap();
    for c in [r.e, r.e_lm, r.e_total] {
        assert!(c.resolved < TOL, "{r:?}");
        assert!(c.unresolved_abs < 1e-9, "{r:?}");
    }
}

#[test]
fn language_model_loss_on_three_tokens() {
    let lex = Lexicon {
        words: Vocabulary::from_words(["a", "b", "c"]).unwrap(),
        pos: TagSet::from_tags(["X"]),
        ner: TagSet::from_tags(["X"]),
    };
    let mut cfg = tiny_config(&lex);
    assert_eq!(cfg.vocab_size, 7);
    cfg.lm_hidden = 4;
    let params = init_params(&cfg, 2).unwrap();
    let ids = [4, 6, 5];
    let check = grad_check_params(
        &params,
        |b| {
            let out = lm_forward(b, &embed_words(b, &ids))?;
            lm_loss(b.tape(), &out, &ids, cfg.lm_normalizer)
        },
        EPS,
    )
    .unwrap();
    assert!(check.max_relative_error < TOL, "{check:?}");
}

#[test]
fn attention_matches_finite_differences() {
    let lex = tiny_lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..3 {
        let mut cfg = tiny_config(&lex);
        cfg.use_lm = false;
        let params = init_params(&cfg, seed).unwrap();
        let ex = random_example(&mut rng, &lex, 5);
        let check = grad_check_params(
            &params,
            |b| {
                let t = b.tape();
                let words = embed_words(b, &ex.src_ids);
                let enc = encode(b, &cfg, &ex, &words, None)?;
                let keys = attention_keys(b, &enc);
                let s = t.tanh(t.slice(enc.rows[0], 0, cfg.hidden));
                let (alpha, context) = attention(b, keys, &enc, s)?;
                Ok(t.add(t.sum(t.mul(context, context)), t.pick(alpha, 0)))
            },
            EPS,
        )
        .unwrap();
        assert!(check.max_relative_error < TOL, "{check:?}");
    }
}

#[test]
fn backward_is_bit_reproducible() {
    let lex = tiny_lexicon();
    let cfg = tiny_config(&lex);
    let params = init_params(&cfg, 4).unwrap();
    let ex = random_example(&mut ChaCha8Rng::seed_from_u64(1), &lex, 5);
    let run = || {
        let tape = Tape::new();
        let b = Bound::new(&tape, &params);
        let loss = joint_loss(&b, &cfg, &ex, 0.6).unwrap();
        let g = b.gradients(&tape.backward(loss.total).unwrap());
        g.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let first = run();
    assert!(!first.is_empty());
    assert_eq!(first, run());
}

#[test]
fn loss_on_example_with_copied_and_unknown_targets() {
    let lex = tiny_lexicon();
    let cfg = tiny_config(&lex);
    let params = init_params(&cfg, 9).unwrap();
    let t = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let raw = RawTriple {
        sentence: t("w1 x0 w2"),
        pos: t("A A B"),
        ner: t("B A A"),
        answer_start: 1,
        answer_end: 2,
        question: t("w3 x0 x9"),
    };
    let ex = encode_example(&raw, &lex).unwrap();
    let check = grad_check_params(&params, |b| Ok(joint_loss(b, &cfg, &ex, 0.6)?.total), EPS).unwrap();
    assert!(check.max_relative_error < TOL, "{check:?}");
}
