use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tabpo_core::confusion::{build_preference_dataset, ConfusionModel, PrefConfig};
use tabpo_core::eval::{evaluate_parsed, EvalOptions};
use tabpo_core::objectives::{tabpo_batch_loss_and_grad, LogisticPreference, ObjectiveConfig, WeightConfig};
use tabpo_core::parallel::ExecMode;
use tabpo_core::policy::{ModelConfig, Policy};
use tabpo_core::schema::LabelSet;
use tabpo_core::synth::{generate_corpus, TaskSpec};
use tabpo_core::trainer::{predict, prepare_triples};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn fixture() -> (Policy, tabpo_core::synth::Corpus, tabpo_core::schema::Codebook) {
    let spec = TaskSpec {
        n_examples: 256,
        ..TaskSpec::default()
    };
    let (codebook, corpus) = generate_corpus(&spec).expect("corpus");
    let policy = Policy::init(ModelConfig {
        context_window: 24,
        embed_dim: 8,
        hidden_dim: 48,
        prompt_buckets: 512,
        ..ModelConfig::default()
    })
    .expect("policy");
    (policy, corpus, codebook)
}

fn bench_preference_batch(c: &mut Criterion) {
    let (policy, corpus, codebook) = fixture();
    let cfg = PrefConfig {
        mixture: [0.0, 1.0, 1.0],
        standin_fraction: 0.0,
        n_triples: 32,
        ..PrefConfig::default()
    };
    let cm = ConfusionModel::default();
    let triples = build_preference_dataset(&corpus.examples, &cm, &codebook, &cfg).expect("triples").triples;
    let objective = ObjectiveConfig::default();
    let pairs = prepare_triples(
        &policy,
        &triples,
        &corpus.code_frequencies,
        &objective,
        &WeightConfig::default(),
        ExecMode::Parallel,
    )
    .expect("pairs");
    let mut group = c.benchmark_group("preference_batch_grad");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| tabpo_batch_loss_and_grad(&policy, black_box(&pairs), &objective, &LogisticPreference, mode))
        });
    }
    group.finish();
}

fn bench_predict(c: &mut Criterion) {
    let (policy, corpus, _) = fixture();
    let examples = &corpus.examples[..32];
    let mut group = c.benchmark_group("greedy_predict");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| predict(&policy, black_box(examples), 64, mode))
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let (_, corpus, _) = fixture();
    // Predictions drop the last tuple of every gold set.
    let pairs: Vec<(LabelSet, Option<LabelSet>)> = corpus
        .examples
        .iter()
        .cycle()
        .take(4096)
        .map(|e| {
            let mut t = e.gold.tuples().to_vec();
            t.pop();
            (e.gold.clone(), Some(LabelSet::new(t).expect("subset")))
        })
        .collect();
    let opts = EvalOptions::default();
    let mut group = c.benchmark_group("evaluate_metrics");
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| evaluate_parsed(black_box(&pairs), &opts, mode))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_preference_batch, bench_predict, bench_metrics);
criterion_main!(benches);
