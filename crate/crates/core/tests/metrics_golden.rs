mod support;

use proptest::prelude::*;
use twostage_core::evalft::{
    beam_search, chunks, entity_f1, exhaustive_best, lcs_len, perplexity, rouge, sciem, GenConfig,
};

use support::{
    beam_matches_exhaustive, beam_model, prf1 as f1, rouge_golden, split_labels, ENTITY_GOLDEN,
    SCIEM_GOLDEN,
};

#[test]
fn entity_f1_golden_cases() {
    for (k, &(pred, gold, c, np, ng)) in ENTITY_GOLDEN.iter().enumerate() {
        let (p, g) = (split_labels(pred), split_labels(gold));
        assert_eq!(chunks(&p).unwrap().len(), np, "case {k} predicted chunks");
        assert_eq!(chunks(&g).unwrap().len(), ng, "case {k} gold chunks");
        let got = entity_f1(&[p], &[g]).unwrap();
        let (pr, re, f) = f1(c, np, ng);
        assert_eq!(
            (got.precision, got.recall, got.f1),
            (pr, re, f),
            "case {k}: {pred} vs {gold}"
        );
    }
}

#[test]
fn entity_f1_is_micro_averaged_over_the_golden_set() {
    let pred: Vec<_> = ENTITY_GOLDEN.iter().map(|c| split_labels(c.0)).collect();
    let gold: Vec<_> = ENTITY_GOLDEN.iter().map(|c| split_labels(c.1)).collect();
    let (c, p, g) = ENTITY_GOLDEN
        .iter()
        .fold((0, 0, 0), |(c, p, g), x| (c + x.2, p + x.3, g + x.4));
    let got = entity_f1(&pred, &gold).unwrap();
    let (pr, re, f) = f1(c, p, g);
    assert_eq!((got.precision, got.recall, got.f1), (pr, re, f));
}

#[test]
fn entity_f1_rejects_bad_input() {
    let l = split_labels;
    assert!(entity_f1(&[l("B-X")], &[l("B-X O")]).is_err());
    assert!(entity_f1(&[l("B-X")], &[]).is_err());
    assert!(entity_f1(&[l("X-FOO")], &[l("O")]).is_err());
    assert!(entity_f1(&[l("B-")], &[l("O")]).is_err());
}

#[test]
fn sciem_golden_cases() {
    for &(p, g, want) in &SCIEM_GOLDEN {
        assert_eq!(sciem(p, g), want, "{p:?} vs {g:?}");
        assert_eq!(sciem(g, p), want);
    }
}

#[test]
fn rouge_golden_cases() {
    for (p, g, r1, r2, rl) in rouge_golden() {
        let got = rouge(p, g);
        for (name, a, b) in [
            ("1", got.rouge1, r1),
            ("2", got.rouge2, r2),
            ("L", got.rouge_l, rl),
        ] {
            assert!(
                (a - b).abs() < 1e-12,
                "rouge-{name} {p:?} vs {g:?}: {a} != {b}"
            );
        }
    }
}

#[test]
fn lcs_and_perplexity_basics() {
    assert_eq!(lcs_len(b"ABCBDAB", b"BDCABA"), 4);
    assert_eq!(lcs_len::<u8>(b"", b"abc"), 0);
    assert!((perplexity(2.0 * 10f64.ln(), 2).unwrap() - 10.0).abs() < 1e-12);
    assert!(perplexity(1.0, 0).is_err());
}

#[test]
fn wide_beam_equals_exhaustive_search() {
    for seed in 0..5 {
        assert!(beam_matches_exhaustive(seed), "seed {seed}");
    }
}

#[test]
fn greedy_never_beats_exhaustive() {
    for seed in 0..5 {
        let m = beam_model(seed);
        let src = [6, 7, 6];
        let best = exhaustive_best(&m, &src, 3).unwrap();
        let greedy = beam_search(
            &m,
            &src,
            &GenConfig {
                beam_size: 1,
                max_len: 3,
            },
        )
        .unwrap();
        assert!(greedy.score <= best.score);
    }
}

fn bio() -> impl Strategy<Value = Vec<String>> {
    let tag = prop_oneof![
        Just("O".to_string()),
        prop::sample::select(vec!["A", "B"]).prop_map(|t| format!("B-{t}")),
        prop::sample::select(vec!["A", "B"]).prop_map(|t| format!("I-{t}")),
    ];
    prop::collection::vec(tag, 1..12)
}

proptest! {
    #[test]
    fn chunks_tile_non_outside_tokens(labels in bio()) {
        let cs = chunks(&labels).unwrap();
        let covered: usize = cs.iter().map(|c| c.2 - c.1 + 1).sum();
        prop_assert_eq!(covered, labels.iter().filter(|l| *l != "O").count());
        prop_assert!(cs.windows(2).all(|w| w[0].2 < w[1].1));
    }

    #[test]
    fn swapping_prediction_and_gold_swaps_precision_and_recall(a in bio(), seed in any::<u64>()) {
        let mut b = a.clone();
        let n = b.len();
        b[(seed as usize) % n] = "O".into();
        let x = entity_f1(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        let y = entity_f1(&[b], &[a]).unwrap();
        prop_assert_eq!(x.precision, y.recall);
        prop_assert_eq!(x.recall, y.precision);
        prop_assert_eq!(x.f1, y.f1);
    }

    #[test]
    fn rouge_is_bounded_and_perfect_on_identity(words in prop::collection::vec("[a-c]", 1..8)) {
        let s = words.join(" ");
        let r = rouge(&s, &s);
        prop_assert_eq!(r.rouge1, 1.0);
        prop_assert_eq!(r.rouge_l, 1.0);
        let r = rouge(&s, "a b c");
        for v in [r.rouge1, r.rouge2, r.rouge_l] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
