use tabpo_core::config::RunConfig;
use tabpo_core::objectives::{tabpo_batch_loss_and_grad, LogisticPreference, ObjectiveConfig, WeightConfig};
use tabpo_core::parallel::ExecMode;
use tabpo_core::pipeline::{prepare_data, run_arms, run_sft_stage, standard_arms, summarize, toggle_grid};
use tabpo_core::policy::Policy;
use tabpo_core::trainer::{predict, prepare_triples};

fn tiny() -> RunConfig {
    RunConfig::with_overrides(
        "",
        &[
            "model.context_window=8".into(),
            "model.embed_dim=4".into(),
            "model.hidden_dim=8".into(),
            "model.prompt_buckets=32".into(),
            "train.sft_steps=10".into(),
            "train.steps=4".into(),
            "train.batch_size=2".into(),
            "train.sft_batch_size=2".into(),
            "train.max_new_tokens=48".into(),
            "data.task.n_examples=60".into(),
            "data.ratios=[0.6, 0.2, 0.2]".into(),
            "data.prefs.n_triples=12".into(),
        ],
    )
    .unwrap()
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let cfg = tiny();
    let data = prepare_data(&cfg).unwrap();
    let policy = Policy::init(cfg.model.clone()).unwrap();
    let triples = tabpo_core::pipeline::build_triples(&cfg, &data, &Default::default(), 1, None).unwrap();
    let objective = ObjectiveConfig::default();
    let pairs = prepare_triples(
        &policy,
        &triples,
        &data.train.code_frequencies,
        &objective,
        &WeightConfig::default(),
        ExecMode::Sequential,
    )
    .unwrap();
    let seq = tabpo_batch_loss_and_grad(&policy, &pairs, &objective, &LogisticPreference, ExecMode::Sequential).unwrap();
    let par = tabpo_batch_loss_and_grad(&policy, &pairs, &objective, &LogisticPreference, ExecMode::Parallel).unwrap();
    assert_eq!(seq.0.to_bits(), par.0.to_bits());
    assert_eq!(seq.1, par.1);
    let examples = &data.test.examples;
    assert_eq!(
        predict(&policy, examples, 32, ExecMode::Sequential),
        predict(&policy, examples, 32, ExecMode::Parallel)
    );
}

#[test]
fn arms_run_end_to_end_and_summarize() {
    let cfg = tiny();
    let data = prepare_data(&cfg).unwrap();
    let sft = run_sft_stage(&cfg, &data).unwrap();
    assert_eq!(sft.log.records.len(), cfg.train.sft_steps);
    let arms = standard_arms(&cfg.objective);
    assert_eq!(arms.len(), 10);
    let runs = run_arms(&cfg, &data, &sft, &arms, &[1, 2], |_| {}).unwrap();
    assert_eq!(runs.len(), 20);
    for r in &runs {
        assert_eq!(r.log.records.len(), cfg.train.steps);
        assert!(r.log.records.iter().all(|s| s.loss.is_finite()));
        assert!((0.0..=1.0).contains(&r.separation));
    }
    let grid: Vec<String> = toggle_grid(&cfg.objective).into_iter().map(|a| a.name).collect();
    let rows = summarize(&runs);
    let grid_rows = rows.iter().filter(|r| grid.contains(&r.arm)).count();
    assert_eq!(grid_rows, 8 * 3);
    assert!(rows.iter().all(|r| r.runs == 2));
}

#[test]
fn same_seed_same_run() {
    let cfg = tiny();
    let data = prepare_data(&cfg).unwrap();
    let a = run_sft_stage(&cfg, &data).unwrap();
    let b = run_sft_stage(&cfg, &data).unwrap();
    assert_eq!(a.policy.to_bytes(), b.policy.to_bytes());
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
}
