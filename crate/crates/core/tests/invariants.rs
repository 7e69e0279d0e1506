use std::collections::BTreeMap;

use cyclegen::corpus::{reserved_tokens, tokenize, Vocab, BLANK_ID};
use cyclegen::formats::FormatId;
use cyclegen::metrics::{distinct_n, rouge_l, self_bleu, sentence_bleu};
use cyclegen::model::mmd;
use cyclegen::nn::Tensor;
use cyclegen::noise;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocab() -> Vocab {
    let mut tokens: Vec<String> = reserved_tokens().into_iter().map(String::from).collect();
    tokens.extend((0..20).map(|i| format!("w{i}")));
    Vocab::from_tokens(tokens)
}

/// Payloads mixing content words with KG markup.
fn payload() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            4 => (0..20u32).prop_map(|i| format!("w{i}")),
            1 => prop::sample::select(vec!["[HEAD]", "[TYPE]", "[TAIL]"]).prop_map(String::from),
        ],
        1..30,
    )
    .prop_map(|w| w.join(" "))
}

fn structural(v: &Vocab, s: &[u32]) -> Vec<u32> {
    s.iter().copied().filter(|&t| v.is_structural(t)).collect()
}

fn counts(s: &[u32]) -> BTreeMap<u32, usize> {
    let mut m = BTreeMap::new();
    for &t in s {
        *m.entry(t).or_default() += 1;
    }
    m
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..12).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn swap_is_a_bounded_permutation(text in payload(), window in 0usize..5, seed: u64) {
        let v = vocab();
        let s = v.payload_ids(&text);
        let out = noise::swap(&s, window, &v, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(counts(&out), counts(&s));
        for (i, (&a, &b)) in s.iter().zip(&out).enumerate() {
            if v.is_structural(a) {
                prop_assert_eq!(a, b, "marker moved at {}", i);
            }
        }
        if window == 0 {
            prop_assert_eq!(out, s);
        }
    }

    #[test]
    fn token_noises_keep_markup(text in payload(), p in 0.0f64..1.0, seed: u64) {
        let v = vocab();
        let s = v.payload_ids(&text);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let d = noise::drop(&s, p, &v, &mut rng);
        prop_assert!(d.len() <= s.len());
        prop_assert_eq!(structural(&v, &d), structural(&v, &s));
        if s.iter().any(|&t| !v.is_structural(t)) {
            prop_assert!(d.iter().any(|&t| !v.is_structural(t)));
        }

        let b = noise::blank(&s, p, &v, &mut rng);
        prop_assert_eq!(b.len(), s.len());
        for (&x, &y) in s.iter().zip(&b) {
            prop_assert!(x == y || (y == BLANK_ID && !v.is_structural(x)));
        }

        let r = noise::repeat(&s, p, &v, &mut rng);
        prop_assert!(r.len() >= s.len() && r.len() <= 2 * s.len());
        prop_assert_eq!(structural(&v, &r), structural(&v, &s));
    }

    #[test]
    fn rule_pseudo_record_draws_from_the_text(text in words().prop_filter("3+ tokens", |t| t.split(' ').count() >= 3), seed: u64) {
        let (orig, rec) = noise::rule_noise_text_to_data(&text, FormatId::Kg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&orig, &text);
        let vocab: Vec<String> = tokenize(&text);
        for tok in tokenize(&rec) {
            prop_assert!(tok.starts_with('[') || vocab.contains(&tok), "{} not in {}", tok, text);
        }
    }

    #[test]
    fn text_metrics_are_bounded(h in words(), r in words()) {
        let bleu = sentence_bleu(&h, &[&r]);
        let rouge = rouge_l(&h, &[&r]);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&bleu));
        prop_assert!((0.0..=100.0 + 1e-9).contains(&rouge));
        prop_assert!((rouge_l(&h, &[&h]) - 100.0).abs() < 1e-9);
        let d = distinct_n(&[&h, &r], 2);
        prop_assert!((0.0..=1.0).contains(&d));
        let sb = self_bleu(&[&h, &h, &h]).unwrap();
        if h.split(' ').count() >= 4 {
            prop_assert!((sb - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mmd_is_symmetric(rows in 2usize..8, cols in 1usize..5, seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0));
        let b = Tensor::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0));
        let s = cols as f64;
        prop_assert!((mmd(&a, &b, s) - mmd(&b, &a, s)).abs() < 1e-12);
    }
}
