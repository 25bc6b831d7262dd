mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taml_core::eval::{accuracy, bleu, ground_truth_corpus, perplexity, BigramLM, ClassifierConfig, TextClassifier};
use taml_core::taskgen::{generate_tasks, TaskFamily};
use taml_core::text::{Sentence, Style};

fn desk_corpus() -> (Vec<Sentence>, usize) {
    let family = TaskFamily::default();
    let tasks = generate_tasks(&family, 0, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    (ground_truth_corpus(&tasks), family.vocab.size())
}

#[test]
fn kn_matches_direct_oracle_on_small_corpora() {
    let (gap, norm) = common::kn_oracle_gaps(200, 1);
    assert!(gap < 1e-12, "{gap:e}");
    assert!(norm < 1e-9, "{norm:e}");
}

#[test]
fn kn_normalizes_over_the_desk_vocabulary() {
    let (corpus, v) = desk_corpus();
    let toks: Vec<&[u32]> = corpus.iter().map(|s| &s.tokens[..]).collect();
    let lm = BigramLM::train(&toks, v, 0.75).unwrap();
    for ctx in 0..v as u32 {
        let total: f64 = lm.outcomes().map(|w| lm.prob(ctx, w)).sum();
        assert!((total - 1.0).abs() < 1e-9, "context {ctx}: {total}");
    }
}

#[test]
fn training_text_is_more_fluent_than_its_shuffle() {
    let (corpus, v) = desk_corpus();
    let toks: Vec<Vec<u32>> = corpus.iter().map(|s| s.tokens.clone()).collect();
    let lm = BigramLM::train(&toks, v, 0.75).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shuffled: Vec<Vec<u32>> = toks
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.shuffle(&mut rng);
            s
        })
        .collect();
    assert!(perplexity(&lm, &toks).unwrap() <= perplexity(&lm, &shuffled).unwrap());
}

#[test]
fn classifier_separates_styles_and_ignores_order_of_evaluation() {
    let (corpus, v) = desk_corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut clf = TextClassifier::new(ClassifierConfig::default(), v, &mut rng).unwrap();
    clf.fit(&corpus, &mut rng).unwrap();
    let acc = accuracy(&clf, &corpus).unwrap();
    assert!(acc >= 0.98, "{acc}");
    let mut shuffled = corpus.clone();
    shuffled.shuffle(&mut rng);
    assert_eq!(accuracy(&clf, &shuffled).unwrap(), acc);
}

#[test]
fn untrained_classifier_is_near_chance_on_balanced_data() {
    let (corpus, v) = desk_corpus();
    let a = corpus.iter().filter(|s| s.style == Style::A);
    let b = corpus.iter().filter(|s| s.style == Style::B);
    let n = a.clone().count().min(b.clone().count());
    let balanced: Vec<Sentence> = a.take(n).chain(b.take(n)).cloned().collect();
    let mean: f64 = (0..8)
        .map(|seed| {
            let clf = TextClassifier::new(ClassifierConfig::default(), v, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            accuracy(&clf, &balanced).unwrap()
        })
        .sum::<f64>()
        / 8.0;
    assert!((mean - 0.5).abs() < 0.15, "{mean}");
}

proptest! {
    #[test]
    fn bleu_of_a_corpus_against_itself_is_100(corpus in prop::collection::vec(prop::collection::vec(0u32..20, 1..12), 1..8)) {
        prop_assert_eq!(bleu(&corpus, &corpus).unwrap(), 100.0);
    }

    #[test]
    fn bleu_below_100_for_any_changed_token(corpus in prop::collection::vec(prop::collection::vec(0u32..20, 1..12), 1..8), i in any::<prop::sample::Index>()) {
        let mut h = corpus.clone();
        let row = i.index(h.len());
        let col = i.index(h[row].len());
        h[row][col] += 20;
        prop_assert!(bleu(&h, &corpus).unwrap() < 100.0);
    }

    #[test]
    fn kn_sums_to_one_for_any_context(corpus in prop::collection::vec(prop::collection::vec(4u32..12, 1..8), 1..7), ctx in 0u32..12) {
        let lm = BigramLM::train(&corpus, 12, 0.75).unwrap();
        let total: f64 = lm.outcomes().map(|w| lm.prob(ctx, w)).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        let oracle = common::DirectKn::new(&corpus, 12, 0.75);
        for w in 0..12 {
            prop_assert!((lm.prob(ctx, w) - oracle.p(ctx, w)).abs() < 1e-12);
        }
    }
}
