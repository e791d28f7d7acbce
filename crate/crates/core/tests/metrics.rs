use halluprobe::metrics::*;
use proptest::prelude::*;

fn sentence() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..8, 0..12)
}

fn configs() -> Vec<BleuConfig> {
    vec![
        BleuConfig::standard(),
        BleuConfig::adjusted(),
        BleuConfig::unigram(),
        BleuConfig::adjusted().with_brevity_penalty(false),
        BleuConfig::standard().with_smoothing(Smoothing::AddOne),
    ]
}

proptest! {
    #[test]
    fn relabeling_tokens_keeps_scores(hyp in sentence(), reference in sentence(), shift in 1u32..50) {
        // Any injective relabeling preserves n-gram identity.
        let relabel = |s: &[u32]| s.iter().map(|t| t * 7 + shift).collect::<Vec<_>>();
        for cfg in configs() {
            let a = bleu(&hyp, &reference, &cfg).unwrap();
            let b = bleu(&relabel(&hyp), &relabel(&reference), &cfg).unwrap();
            prop_assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn single_pair_corpus_is_sentence_bleu(hyp in sentence(), reference in sentence()) {
        for cfg in configs() {
            let s = bleu(&hyp, &reference, &cfg).unwrap();
            let c = corpus_bleu([(hyp.as_slice(), reference.as_slice())], &cfg).unwrap();
            prop_assert_eq!(s.value, c.value);
        }
    }

    #[test]
    fn scores_lie_in_unit_interval(hyp in sentence(), reference in sentence()) {
        for cfg in configs() {
            let v = bleu(&hyp, &reference, &cfg).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn identical_nonempty_sentences_score_one(s in prop::collection::vec(0u32..8, 1..12)) {
        for cfg in configs() {
            prop_assert_eq!(bleu(&s, &s, &cfg).unwrap().value, 1.0);
        }
    }

    #[test]
    fn accuracy_counts_matching_positions(pairs in prop::collection::vec((1u32..5, 1u32..5), 1..20)) {
        let (pred, reference): (Vec<u32>, Vec<u32>) = pairs.iter().cloned().unzip();
        let acc = word_accuracy(&pred, &reference, 0).unwrap();
        prop_assert_eq!(acc.total, pairs.len());
        prop_assert_eq!(acc.correct, pairs.iter().filter(|(p, r)| p == r).count());
    }
}
