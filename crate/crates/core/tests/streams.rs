//! Tokenizer, mixture streams and probe-set construction properties.

use std::collections::{BTreeMap, BTreeSet};

use forge::corpus::{decode, draw_stream, encode, Capability, Document, MixtureSpec, Repetition, TokenizedSample};
use forge::probeset::{dedup_semantic, ScorerChain, ScorerKind, ScorerSpec};
use forge::synth::{generate, SynthSpec};
use proptest::prelude::*;

fn sources(lengths: &[Vec<usize>]) -> BTreeMap<String, Vec<TokenizedSample>> {
    lengths
        .iter()
        .enumerate()
        .map(|(s, lens)| {
            let samples = lens.iter().enumerate().map(|(i, &n)| TokenizedSample { doc_id: (s * 1000 + i) as u64, tokens: vec![65; n] }).collect();
            (format!("src{s}"), samples)
        })
        .collect()
}

fn doc(id: u64, text: &str) -> Document {
    Document { doc_id: id, source_id: "s".into(), text: text.into(), domain_tags: BTreeSet::new(), quality_scores: BTreeMap::new() }
}

proptest! {
    #[test]
    fn tokenizer_round_trips_arbitrary_text(s in any::<String>()) {
        prop_assert_eq!(decode(&encode(&s)), s);
    }

    #[test]
    fn realized_shares_stay_within_one_sample(
        lengths in prop::collection::vec(prop::collection::vec(2usize..60, 1..30), 2..5),
        raw in prop::collection::vec(0.0f64..1.0, 5),
        budget in 500u64..20_000,
        seed in any::<u64>(),
    ) {
        let corpora = sources(&lengths);
        let mut w: BTreeMap<String, f64> = corpora.keys().zip(&raw).map(|(k, &x)| (k.clone(), x + 0.01)).collect();
        let total: f64 = w.values().sum();
        w.values_mut().for_each(|x| *x /= total);
        let spec = MixtureSpec::new(w.clone(), budget, seed).unwrap();
        let stream = draw_stream(&corpora, &spec, Repetition::EpochWrap).unwrap();
        let longest = lengths.iter().flatten().copied().max().unwrap() as f64;
        let mut tokens: BTreeMap<&str, usize> = BTreeMap::new();
        for item in &stream {
            *tokens.entry(item.source_id).or_default() += item.sample.len();
        }
        for (source, weight) in &w {
            let share = *tokens.get(source.as_str()).unwrap_or(&0) as f64 / budget as f64;
            prop_assert!((share - weight).abs() <= longest / budget as f64 + 1e-12, "{} share {} weight {}", source, share, weight);
        }
        let again = draw_stream(&corpora, &spec, Repetition::EpochWrap).unwrap();
        prop_assert_eq!(stream, again);
    }

    #[test]
    fn dedup_is_idempotent(texts in prop::collection::vec("[ab ]{0,6}(cat|dog) [xyz]{8,20}", 1..20), threshold in 0.3f64..0.95) {
        let docs: Vec<Document> = texts.iter().enumerate().map(|(i, t)| doc(i as u64, t)).collect();
        let once = dedup_semantic(&docs, threshold);
        let twice = dedup_semantic(&once, threshold);
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.iter().all(|d| docs.contains(d)));
    }
}

#[test]
fn weights_off_by_more_than_tolerance_are_rejected() {
    let w = |a: f64, b: f64| BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)]);
    assert!(MixtureSpec::new(w(0.5, 0.504), 100, 0).is_ok());
    assert!(MixtureSpec::new(w(0.5, 0.51), 100, 0).is_err());
    assert!(MixtureSpec::new(w(1.2, -0.2), 100, 0).is_err());
}

#[test]
fn chain_stages_shrink_and_are_deterministic() {
    let mut spec = SynthSpec::default();
    spec.sources.iter_mut().for_each(|s| s.docs = 60);
    let docs = generate(&spec);
    let chain = ScorerChain::from_specs(
        &[
            ScorerSpec::threshold("fluency", 4.0, 5.0),
            ScorerSpec::judge("informativeness", ScorerKind::RelevanceJudge, 0.5, None),
            ScorerSpec::judge("domain", ScorerKind::DomainJudge, 0.5, Some(Capability::Math)),
        ],
        Some(0.8),
    )
    .unwrap();
    for (name, corpus) in &docs {
        let kept = chain.apply(corpus).unwrap();
        assert!(kept.len() <= corpus.len(), "{name}");
        let ids: BTreeSet<u64> = corpus.iter().map(|d| d.doc_id).collect();
        assert!(kept.iter().all(|d| ids.contains(&d.doc_id)), "{name}");
        assert_eq!(kept, chain.apply(corpus).unwrap(), "{name}");
    }
}

#[test]
fn threshold_and_top_fraction_do_not_commute() {
    // Two strong docs fail the quality gate, so applying the top-fraction
    // judge first keeps a set the gate then empties.
    let mut docs: Vec<Document> = (0..4).map(|i| doc(i, &format!("doc {i}"))).collect();
    for (d, (q, r)) in docs.iter_mut().zip([(0.9, 0.1), (0.9, 0.2), (0.1, 0.9), (0.1, 0.8)]) {
        d.quality_scores.insert("q".into(), q);
        d.quality_scores.insert("r".into(), r);
    }
    let gate = ScorerSpec::threshold("q", 0.5, 1.0);
    let judge = ScorerSpec::judge("r", ScorerKind::RelevanceJudge, 0.5, None);
    let gate_first = forge::probeset::score_topfraction(&forge::probeset::score_threshold(&docs, &gate).unwrap(), &judge).unwrap();
    let judge_first = forge::probeset::score_threshold(&forge::probeset::score_topfraction(&docs, &judge).unwrap(), &gate).unwrap();
    assert_eq!(gate_first.iter().map(|d| d.doc_id).collect::<Vec<_>>(), vec![1]);
    assert!(judge_first.is_empty());
}
