mod common;

use common::{posteriors, random_log_probs};
use earkey::decode::{
    beam_decode, collapse, greedy_decode, labels_to_string, lexicon_topn, DecodeRecord, Hypothesis,
    Lexicon,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn exhaustive_beam_finds_maximum_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let t = rng.random_range(1..=4);
        let lp = random_log_probs(&mut rng, t, 3);
        let post = posteriors(&lp);
        let (best, p) = post.iter().fold(
            (None, -1.0),
            |acc, (l, &p)| if p > acc.1 { (Some(l), p) } else { acc },
        );
        let width = 3usize.pow(t as u32);
        let hyps = beam_decode(&lp, width, 1).unwrap();
        assert_eq!(hyps[0].letters, labels_to_string(best.unwrap()));
        assert!((hyps[0].log_prob - p.ln()).abs() < 1e-9);
    }
}

#[test]
fn wider_beams_never_lose_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let t = rng.random_range(2..=8);
        let k = rng.random_range(3..=5);
        let lp = random_log_probs(&mut rng, t, k);
        let mut prev = f64::NEG_INFINITY;
        for width in 1..=12 {
            let top = beam_decode(&lp, width, 1).unwrap()[0].log_prob;
            assert!(top >= prev - 1e-12, "width {width}: {top} < {prev}");
            prev = top;
        }
    }
}

#[test]
fn record_serializes_as_json_line() {
    let rec = DecodeRecord {
        utterance_id: "u01/s1/ear/0".into(),
        hypotheses: vec![Hypothesis {
            letters: "ear".into(),
            log_prob: -0.5,
            rank: 1,
        }],
        top_words: vec!["ear".into()],
    };
    let line = serde_json::to_string(&rec).unwrap();
    assert!(!line.contains('\n'));
    assert_eq!(
        line,
        r#"{"utterance_id":"u01/s1/ear/0","hypotheses":[{"letters":"ear","log_prob":-0.5}],"top_words":["ear"]}"#
    );
}

proptest! {
    #[test]
    fn greedy_on_one_hot_paths_is_the_collapse(path in prop::collection::vec(0usize..27, 0..30)) {
        let lp: Vec<Vec<f64>> = path
            .iter()
            .map(|&c| (0..27).map(|j| if j == c { -0.01 } else { -9.0 }).collect())
            .collect();
        prop_assert_eq!(greedy_decode(&lp).unwrap(), labels_to_string(&collapse(&path, 26)));
    }

    #[test]
    fn beam_output_is_bounded_and_sorted(seed in 0u64..1000, width in 1usize..10, t in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = random_log_probs(&mut rng, t, 4);
        let hyps = beam_decode(&lp, width, width).unwrap();
        prop_assert!(hyps.len() <= width);
        for pair in hyps.windows(2) {
            prop_assert!(pair[0].log_prob >= pair[1].log_prob);
            prop_assert!(pair[0].letters != pair[1].letters);
        }
        for (i, h) in hyps.iter().enumerate() {
            prop_assert!(h.log_prob <= 0.0);
            prop_assert_eq!(h.rank, i + 1);
        }
    }

    #[test]
    fn lexicon_ranking_is_total_and_deterministic(
        letters in prop::collection::vec("[a-z]{0,6}", 0..4),
        n in 1usize..60,
    ) {
        let hyps: Vec<Hypothesis> = letters
            .iter()
            .enumerate()
            .map(|(i, l)| Hypothesis { letters: l.clone(), log_prob: -(i as f64), rank: i + 1 })
            .collect();
        let lex = Lexicon::builtin();
        let a = lexicon_topn(&hyps, &lex, n).unwrap();
        prop_assert_eq!(a.len(), n.min(lex.len()));
        prop_assert_eq!(a, lexicon_topn(&hyps, &lex, n).unwrap());
    }
}
