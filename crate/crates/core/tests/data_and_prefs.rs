use std::collections::BTreeSet;

use tabpo_core::confusion::{build_preference_dataset, ConfusionModel, Family, PrefConfig, PrefError};
use tabpo_core::synth::{generate_corpus, stratified_split, Corpus, TaskSpec};

fn small_spec() -> TaskSpec {
    TaskSpec {
        n_examples: 400,
        ..TaskSpec::default()
    }
}

#[test]
fn corpus_generation_is_deterministic() {
    let (cb1, a) = generate_corpus(&small_spec()).unwrap();
    let (cb2, b) = generate_corpus(&small_spec()).unwrap();
    assert_eq!(cb1, cb2);
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    let (_, c) = generate_corpus(&TaskSpec {
        seed: 8,
        ..small_spec()
    })
    .unwrap();
    assert_ne!(a.to_jsonl(), c.to_jsonl());
}

#[test]
fn corpus_file_round_trip() {
    let (_, corpus) = generate_corpus(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    corpus.write_jsonl(&path).unwrap();
    let back = Corpus::read_jsonl(&path).unwrap();
    assert_eq!(back.examples, corpus.examples);
}

#[test]
fn split_partitions_the_corpus() {
    let (_, corpus) = generate_corpus(&small_spec()).unwrap();
    let parts = stratified_split(&corpus, [0.8, 0.1, 0.1], 3).unwrap();
    let ids: Vec<BTreeSet<&str>> = parts.iter().map(|p| p.examples.iter().map(|e| e.id.as_str()).collect()).collect();
    assert_eq!(ids.iter().map(|s| s.len()).sum::<usize>(), corpus.len());
    assert!(ids[0].is_disjoint(&ids[1]) && ids[0].is_disjoint(&ids[2]) && ids[1].is_disjoint(&ids[2]));
    let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
    assert!((sizes[0] as f64 - 320.0).abs() <= 8.0, "{sizes:?}");
    // Every code present in the corpus reaches the training split.
    for code in corpus.code_frequencies.keys() {
        assert!(parts[0].code_frequencies.contains_key(code), "{code}");
    }
}

#[test]
fn preference_dataset_is_deterministic_and_follows_quotas() {
    let (cb, corpus) = generate_corpus(&small_spec()).unwrap();
    let cm = ConfusionModel::default();
    let cfg = PrefConfig {
        n_triples: 200,
        seed: 4,
        ..PrefConfig::default()
    };
    let a = build_preference_dataset(&corpus.examples, &cm, &cb, &cfg).unwrap();
    let b = build_preference_dataset(&corpus.examples, &cm, &cb, &cfg).unwrap();
    assert_eq!(a, b);
    let quotas = cfg.quotas();
    for f in Family::ALL {
        let n = a.triples.iter().filter(|t| t.family == f).count();
        assert_eq!(n, quotas[&f], "{f:?}");
    }
    for t in &a.triples {
        assert_ne!(t.chosen, t.rejected);
        assert!(!t.rejected.is_empty());
    }
}

#[test]
fn deletion_is_a_strict_subset() {
    let (cb, corpus) = generate_corpus(&small_spec()).unwrap();
    let cfg = PrefConfig {
        mixture: [0.0, 1.0, 0.0],
        standin_fraction: 0.0,
        n_triples: 50,
        ..PrefConfig::default()
    };
    let ds = build_preference_dataset(&corpus.examples, &ConfusionModel::default(), &cb, &cfg).unwrap();
    assert!(ds.triples.iter().all(|t| t.rejected.is_strict_subset_of(&t.chosen)));
}

#[test]
fn invalid_mixture_is_rejected() {
    let (cb, corpus) = generate_corpus(&small_spec()).unwrap();
    let cfg = PrefConfig {
        mixture: [0.0, 0.0, 0.0],
        ..PrefConfig::default()
    };
    assert!(matches!(
        build_preference_dataset(&corpus.examples, &ConfusionModel::default(), &cb, &cfg),
        Err(PrefError::InvalidConfig(_))
    ));
}
