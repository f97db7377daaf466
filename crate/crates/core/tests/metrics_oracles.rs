mod common;

use docnmt::metrics::{bleu_stats, corpus_bleu, doc_bleu, pronoun_f1};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "he", "her"]), 1..8).prop_map(|w| w.join(" "))
}

#[test]
fn pronoun_f1_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let n = rand::Rng::gen_range(&mut rng, 1..4);
        let h = common::random_pronoun_sentences(&mut rng, n);
        let r = common::random_pronoun_sentences(&mut rng, n);
        let got = pronoun_f1(&h, &r).unwrap();
        let (m, ht, rt) = common::pronoun_oracle_counts(&h, &r);
        assert_eq!((got.matched, got.hyp_total, got.ref_total), (m, ht, rt), "{h:?} {r:?}");
        let (p, rc, f) = common::pronoun_oracle(&h, &r);
        assert_eq!((got.precision, got.recall, got.f1), (p, rc, f));
    }
}

proptest! {
    #[test]
    fn bleu_ignores_segment_order(pairs in prop::collection::vec((sentence(), sentence()), 1..10), rot in 0usize..10) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let rotate = |v: &[String]| [&v[k..], &v[..k]].concat();
        prop_assert_eq!(bleu_stats(&h, &r).unwrap(), bleu_stats(&rotate(&h), &rotate(&r)).unwrap());
    }

    #[test]
    fn bleu_bounded(pairs in prop::collection::vec((sentence(), sentence()), 1..10)) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
        let b = corpus_bleu(&h, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!((corpus_bleu(&r, &r).unwrap() - 1.0).abs() < 1e-12 || r.iter().all(|s| s.split(' ').count() < 4));
    }

    #[test]
    fn doc_bleu_of_single_sentence_documents(pairs in prop::collection::vec((sentence(), sentence()), 1..10)) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
        let hd: Vec<Vec<String>> = h.iter().map(|s| vec![s.clone()]).collect();
        let rd: Vec<Vec<String>> = r.iter().map(|s| vec![s.clone()]).collect();
        prop_assert!((doc_bleu(&hd, &rd).unwrap() - corpus_bleu(&h, &r).unwrap()).abs() <= 1e-12);
    }
}
