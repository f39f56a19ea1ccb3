mod errors;
mod manifest;
mod records;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use tabpo_core::config::{apply_override, ConfigError, RunConfig};
use tabpo_core::confusion::{
    build_preference_dataset, extract_confusion_model, read_preferences, triples_to_jsonl, Family, MatchMode,
    PrefConfig,
};
use tabpo_core::eval::{confusion_report, confusion_csv, evaluate_parsed, parse_predictions, EvalOptions, LabelCounting};
use tabpo_core::parallel::ExecMode;
use tabpo_core::pipeline::{self, ArmRun};
use tabpo_core::policy::Policy;
use tabpo_core::schema::Example;
use tabpo_core::synth::{generate_corpus, stratified_split, Corpus, TaskSpec};
use tabpo_core::trainer::{predict, run_sft, run_tabpo, RunLog};

use manifest::{Run, OUT_DIR_ENV};
use records::{
    codebook_path, join_predictions, parent_dir, parse_array3, parse_list, predictions_jsonl, read_codebook,
    read_predictions, require, slug, PredictionRecord,
};

#[derive(Debug, Parser)]
#[command(name = "tabpo", version, about = "Preference optimization for schema-constrained annotation")]
struct Cli {
    /// Output directory; falls back to $TABPO_OUT_DIR, then a per-command default.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Dotted `key=value` override applied to the loaded config or task spec.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Execution mode for data-parallel work.
    #[arg(long, global = true, value_enum)]
    exec: Option<Exec>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Exec {
    Sequential,
    Parallel,
}

impl Exec {
    fn mode(self) -> ExecMode {
        match self {
            Exec::Sequential => ExecMode::Sequential,
            Exec::Parallel => ExecMode::Parallel,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its codebook.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified train/validation/test split of a corpus.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Supervised fine-tuning on the training split.
    Sft {
        #[arg(long)]
        config: PathBuf,
        /// Training split; regenerated from the config's data section when absent.
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Greedy predictions for every example of a split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        max_new_tokens: usize,
    },
    /// Confusion model and preference triples from gold vs predicted outputs.
    BuildPrefs {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value = "0.5,0.25,0.25")]
        mixture: String,
        #[arg(long, default_value_t = 0.4)]
        standin_frac: f64,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Examples to perturb; defaults to the gold split.
        #[arg(long)]
        examples: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Cap on perturbed tuples per confusion triple.
        #[arg(long)]
        max_perturbed: Option<usize>,
        #[arg(long, default_value_t = tabpo_core::confusion::DEFAULT_MATCH_THRESHOLD)]
        jaccard_threshold: f64,
    },
    /// Preference optimization starting from an SFT checkpoint.
    Tabpo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sft_checkpoint: PathBuf,
        #[arg(long)]
        prefs: PathBuf,
        /// Split providing code frequencies; regenerated from the config when absent.
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Code, sub-code and span metrics plus confusion tables.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "multiset")]
        label_counting: Counting,
        #[arg(long, default_value_t = tabpo_core::confusion::DEFAULT_MATCH_THRESHOLD)]
        jaccard_threshold: f64,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Shared SFT, then every objective arm for every seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Counting {
    Multiset,
    Set,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Split { .. } => "split",
            Command::Sft { .. } => "sft",
            Command::Predict { .. } => "predict",
            Command::BuildPrefs { .. } => "build-prefs",
            Command::Tabpo { .. } => "tabpo",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
        }
    }
}

struct Ctx {
    out_dir: Option<PathBuf>,
    set: Vec<String>,
    exec: Option<Exec>,
}

impl Ctx {
    fn dir_or(&self, fallback: impl Into<PathBuf>) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| fallback.into())
    }

    fn mode(&self) -> ExecMode {
        self.exec.map(Exec::mode).unwrap_or_default()
    }

    fn load_config(&self, path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(require(path)?).with_context(|| format!("reading {}", path.display()))?;
        let mut overrides = self.set.clone();
        if let Some(e) = self.exec {
            overrides.push(format!("train.exec={}", exec_name(e.mode())));
        }
        Ok(RunConfig::with_overrides(&text, &overrides)?)
    }
}

fn exec_name(mode: ExecMode) -> &'static str {
    match mode {
        ExecMode::Sequential => "sequential",
        ExecMode::Parallel => "parallel",
    }
}

fn config_json(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn pretty<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    Ok(Corpus::read_jsonl(require(path)?)?)
}

fn load_policy(path: &Path) -> Result<Policy> {
    Ok(Policy::load(require(path)?)?)
}

fn gen_data(ctx: &Ctx, run: &mut Run, spec: Option<&PathBuf>) -> Result<()> {
    let mut table: toml::Table = match spec {
        None => toml::Table::new(),
        Some(p) => {
            run.input(p);
            let text = fs::read_to_string(require(p)?).with_context(|| format!("reading {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "json") {
                let v: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?;
                toml::Table::try_from(v).map_err(|e| ConfigError::Parse(e.to_string()))?
            } else {
                text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?
            }
        }
    };
    for o in &ctx.set {
        apply_override(&mut table, o)?;
    }
    let spec: TaskSpec = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    run.seed = Some(spec.seed);
    run.config = Some(serde_json::to_value(&spec)?);
    let (codebook, corpus) = generate_corpus(&spec)?;
    run.write_named("task_spec.toml", toml::to_string(&spec)?.as_bytes())?;
    run.write_named("codebook.json", &pretty(&codebook)?)?;
    run.write_named("corpus.jsonl", corpus.to_jsonl().as_bytes())?;
    run.write_named("corpus_stats.json", &pretty(&corpus.stats())?)?;
    Ok(())
}

fn split(run: &mut Run, corpus_path: &Path, ratios: &str, seed: u64) -> Result<()> {
    let ratios = parse_array3(ratios)?;
    run.input(corpus_path);
    run.seed = Some(seed);
    run.config = Some(json!({ "ratios": ratios, "seed": seed }));
    let corpus = read_corpus(corpus_path)?;
    let parts = stratified_split(&corpus, ratios, seed)?;
    let mut stats = BTreeMap::new();
    for (name, part) in ["train", "val", "test"].iter().zip(&parts) {
        run.write_named(&format!("{name}.jsonl"), part.to_jsonl().as_bytes())?;
        stats.insert(*name, part.stats());
    }
    run.write_named("split_stats.json", &pretty(&stats)?)?;
    let codebook = parent_dir(corpus_path).join("codebook.json");
    let target = run.path("codebook.json");
    if codebook.exists() && fs::canonicalize(&codebook).ok() != fs::canonicalize(&target).ok() {
        run.write(target, &fs::read(&codebook)?)?;
    }
    Ok(())
}

/// Training split from a file, or regenerated from the config's data section.
fn training_split(run: &mut Run, cfg: &RunConfig, train: Option<&PathBuf>) -> Result<Corpus> {
    match train {
        Some(p) => {
            run.input(p);
            read_corpus(p)
        }
        None => Ok(pipeline::prepare_data(cfg)?.train),
    }
}

fn write_policy(run: &mut Run, name: &str, policy: &Policy, log: &RunLog) -> Result<()> {
    run.write_named(&format!("{name}.ckpt"), &policy.to_bytes())?;
    run.write_named(&format!("{name}_log.jsonl"), log.to_jsonl().as_bytes())?;
    Ok(())
}

fn sft(ctx: &Ctx, run: &mut Run, config: &Path, train: Option<&PathBuf>) -> Result<()> {
    run.input(config);
    let cfg = ctx.load_config(config)?;
    run.seed = Some(cfg.train.seed);
    run.config = Some(config_json(&cfg)?);
    let data = training_split(run, &cfg, train)?;
    let (policy, log) = run_sft(&cfg.training(), &data.examples)?;
    run.write_named("config.toml", cfg.to_toml().as_bytes())?;
    write_policy(run, "sft", &policy, &log)
}

fn predict_cmd(ctx: &Ctx, run: &mut Run, checkpoint: &Path, split: &Path, out: &Path, max_new_tokens: usize) -> Result<()> {
    run.input(checkpoint);
    run.input(split);
    run.config = Some(json!({ "max_new_tokens": max_new_tokens }));
    let policy = load_policy(checkpoint)?;
    let corpus = read_corpus(split)?;
    let preds = predict(&policy, &corpus.examples, max_new_tokens, ctx.mode());
    let records: Vec<PredictionRecord> = corpus
        .examples
        .iter()
        .zip(preds)
        .map(|(e, p)| PredictionRecord {
            id: e.id.clone(),
            prediction: p,
        })
        .collect();
    run.write(out.to_path_buf(), predictions_jsonl(&records).as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn build_prefs(
    ctx: &Ctx,
    run: &mut Run,
    gold: &Path,
    pred: &Path,
    cfg: PrefConfig,
    examples: Option<&PathBuf>,
    codebook: Option<&PathBuf>,
    threshold: f64,
) -> Result<()> {
    cfg.validate()?;
    let cb_path = codebook_path(codebook, gold);
    for p in [gold, pred, cb_path.as_path()] {
        run.input(p);
    }
    run.seed = Some(cfg.seed);
    run.config = Some(json!({ "prefs": cfg, "jaccard_threshold": threshold }));
    let cb = read_codebook(&cb_path)?;
    let gold_corpus = read_corpus(gold)?;
    let pairs = join_predictions(&gold_corpus.examples, &read_predictions(pred)?)?;
    let cm = extract_confusion_model(&parse_predictions(&pairs, &cb), threshold, MatchMode::OneToOne, ctx.mode());
    let source: Vec<Example> = match examples {
        Some(p) => {
            run.input(p);
            read_corpus(p)?.examples
        }
        None => gold_corpus.examples,
    };
    let ds = build_preference_dataset(&source, &cm, &cb, &cfg)?;
    let mut counts: BTreeMap<&str, usize> = Family::ALL.iter().map(|f| (f.name(), 0)).collect();
    for t in &ds.triples {
        *counts.entry(t.family.name()).or_insert(0) += 1;
    }
    let skipped: BTreeMap<&str, usize> = ds.skipped.iter().map(|(f, n)| (f.name(), *n)).collect();
    run.write_named("confusion_model.json", (cm.to_json() + "\n").as_bytes())?;
    run.write_named("prefs.jsonl", triples_to_jsonl(&ds.triples).as_bytes())?;
    run.write_named(
        "prefs_stats.json",
        &pretty(&json!({ "n_triples": ds.triples.len(), "families": counts, "skipped": skipped }))?,
    )?;
    Ok(())
}

fn tabpo(ctx: &Ctx, run: &mut Run, config: &Path, sft_checkpoint: &Path, prefs: &Path, train: Option<&PathBuf>) -> Result<()> {
    run.input(config);
    let cfg = ctx.load_config(config)?;
    require(sft_checkpoint)?;
    run.input(sft_checkpoint);
    run.input(prefs);
    run.seed = Some(cfg.train.seed);
    run.config = Some(config_json(&cfg)?);
    let sft = load_policy(sft_checkpoint)?;
    let triples = read_preferences(require(prefs)?)?;
    let freqs = training_split(run, &cfg, train)?.code_frequencies;
    let (policy, log) = run_tabpo(&cfg.training(), &sft, &triples, &freqs)?;
    run.write_named("config.toml", cfg.to_toml().as_bytes())?;
    write_policy(run, "tabpo", &policy, &log)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    ctx: &Ctx,
    run: &mut Run,
    gold: &Path,
    pred: &Path,
    out: &Path,
    codebook: Option<&PathBuf>,
    opts: EvalOptions,
    top_k: usize,
) -> Result<()> {
    let cb_path = codebook_path(codebook, gold);
    for p in [gold, pred, cb_path.as_path()] {
        run.input(p);
    }
    run.config = Some(json!({ "eval": opts, "top_k": top_k }));
    let cb = read_codebook(&cb_path)?;
    let pairs = join_predictions(&read_corpus(gold)?.examples, &read_predictions(pred)?)?;
    let parsed = parse_predictions(&pairs, &cb);
    let report = evaluate_parsed(&parsed, &opts, ctx.mode());
    run.write(out.to_path_buf(), (report.to_json() + "\n").as_bytes())?;
    let csv = confusion_csv(&confusion_report(&parsed, top_k));
    run.write(out.with_extension("confusion.csv"), csv.as_bytes())
}

fn run_row(r: &ArmRun) -> serde_json::Value {
    json!({
        "arm": r.arm,
        "seed": r.seed,
        "code_f1": r.report.code.f1,
        "subcode_f1": r.report.subcode.f1,
        "span_f1": r.report.span.f1,
        "parse_failures": r.report.parse_failure_count,
        "max_chosen_drop": r.max_chosen_drop(),
        "separation": r.separation,
        "final_loss": r.log.final_loss(),
    })
}

fn leaf_rows(csv: &mut String, arm: &str, seed: u64, counts: &BTreeMap<(String, String), usize>) {
    for ((g, p), n) in counts {
        csv.push_str(&format!("{arm},{seed},{g},{p},{n}\n"));
    }
}

fn ablate(ctx: &Ctx, run: &mut Run, config: &Path, seeds: &str) -> Result<()> {
    run.input(config);
    let cfg = ctx.load_config(config)?;
    let seeds: Vec<u64> = parse_list(seeds)?;
    run.seed = Some(cfg.train.seed);
    run.config = Some(json!({ "config": config_json(&cfg)?, "seeds": seeds }));
    run.write_named("config.toml", cfg.to_toml().as_bytes())?;

    let data = pipeline::prepare_data(&cfg)?;
    let sft = pipeline::run_sft_stage(&cfg, &data)?;
    eprintln!(
        "sft: subcode_f1 {:.4}, parse failures {}",
        sft.test_report.subcode.f1, sft.test_report.parse_failure_count
    );
    write_policy(run, "sft", &sft.policy, &sft.log)?;
    run.write_named("reports/sft.json", (sft.test_report.to_json() + "\n").as_bytes())?;
    run.write_named("confusion_model.json", (sft.confusion.to_json() + "\n").as_bytes())?;

    let arms = pipeline::standard_arms(&cfg.objective);
    let runs = pipeline::run_arms(&cfg, &data, &sft, &arms, &seeds, |r| {
        eprintln!("seed {} {:<26} subcode_f1 {:.4}", r.seed, r.arm, r.report.subcode.f1)
    })?;

    let mut rows = vec![json!({
        "arm": "sft",
        "seed": cfg.train.seed,
        "code_f1": sft.test_report.code.f1,
        "subcode_f1": sft.test_report.subcode.f1,
        "span_f1": sft.test_report.span.f1,
        "parse_failures": sft.test_report.parse_failure_count,
        "max_chosen_drop": null,
        "separation": null,
        "final_loss": sft.log.final_loss(),
    })];
    let mut leaves = String::from("arm,seed,gold_leaf,pred_leaf,count\n");
    leaf_rows(&mut leaves, "sft", cfg.train.seed, &sft.test_leaf_confusions);
    for r in &runs {
        rows.push(run_row(r));
        leaf_rows(&mut leaves, &r.arm, r.seed, &r.leaf_confusions);
        let stem = format!("{}_seed{}", slug(&r.arm), r.seed);
        run.write_named(&format!("reports/{stem}.json"), (r.report.to_json() + "\n").as_bytes())?;
        run.write_named(&format!("logs/{stem}.jsonl"), r.log.to_jsonl().as_bytes())?;
    }
    let runs_jsonl: String = rows.iter().map(|r| r.to_string() + "\n").collect();
    run.write_named("runs.jsonl", runs_jsonl.as_bytes())?;
    run.write_named("leaf_confusions.csv", leaves.as_bytes())?;

    // The toggle grid alone forms the ablation table; the SFT baseline,
    // plain DPO and the low-separation preset go to a comparison table.
    let grid: Vec<String> = pipeline::toggle_grid(&cfg.objective).into_iter().map(|a| a.name).collect();
    let (in_grid, others): (Vec<_>, Vec<_>) =
        pipeline::summarize(&runs).into_iter().partition(|r| grid.contains(&r.arm));
    run.write_named("ablation.csv", pipeline::summary_csv(&in_grid).as_bytes())?;
    let mut comparison: Vec<pipeline::SummaryRow> = [
        ("code_f1", sft.test_report.code.f1),
        ("subcode_f1", sft.test_report.subcode.f1),
        ("span_f1", sft.test_report.span.f1),
    ]
    .into_iter()
    .map(|(metric, v)| pipeline::SummaryRow {
        arm: "sft".into(),
        metric: metric.into(),
        mean: v,
        std: 0.0,
        runs: 1,
    })
    .collect();
    comparison.extend(in_grid.into_iter().filter(|r| r.arm == pipeline::TABPO_ARM));
    comparison.extend(others);
    run.write_named("comparison.csv", pipeline::summary_csv(&comparison).as_bytes())?;
    Ok(())
}

fn dispatch(ctx: &Ctx, command: &Command) -> Result<Run> {
    let name = command.name();
    let mut run = match command {
        Command::GenData { out, .. } => Run::new(name, ctx.out_dir.clone().unwrap_or_else(|| out.clone()))?,
        Command::Split { corpus, .. } => Run::new(name, ctx.dir_or(parent_dir(corpus)))?,
        Command::Predict { out, .. } | Command::Eval { out, .. } => Run::new(name, ctx.dir_or(parent_dir(out)))?,
        Command::BuildPrefs { gold, .. } => Run::new(name, ctx.dir_or(parent_dir(gold)))?,
        Command::Sft { .. } => Run::new(name, ctx.dir_or("runs/sft"))?,
        Command::Tabpo { .. } => Run::new(name, ctx.dir_or("runs/tabpo"))?,
        Command::Ablate { .. } => Run::new(name, ctx.dir_or("runs/ablate"))?,
    };
    match command {
        Command::GenData { spec, .. } => gen_data(ctx, &mut run, spec.as_ref())?,
        Command::Split { corpus, ratios, seed } => split(&mut run, corpus, ratios, *seed)?,
        Command::Sft { config, train } => sft(ctx, &mut run, config, train.as_ref())?,
        Command::Predict {
            checkpoint,
            split,
            out,
            max_new_tokens,
        } => predict_cmd(ctx, &mut run, checkpoint, split, out, *max_new_tokens)?,
        Command::BuildPrefs {
            gold,
            pred,
            mixture,
            standin_frac,
            n,
            seed,
            examples,
            codebook,
            max_perturbed,
            jaccard_threshold,
        } => {
            let cfg = PrefConfig {
                mixture: parse_array3(mixture)?,
                standin_fraction: *standin_frac,
                n_triples: *n,
                seed: *seed,
                max_perturbed_tuples: *max_perturbed,
            };
            build_prefs(ctx, &mut run, gold, pred, cfg, examples.as_ref(), codebook.as_ref(), *jaccard_threshold)?
        }
        Command::Tabpo {
            config,
            sft_checkpoint,
            prefs,
            train,
        } => tabpo(ctx, &mut run, config, sft_checkpoint, prefs, train.as_ref())?,
        Command::Eval {
            gold,
            pred,
            out,
            codebook,
            label_counting,
            jaccard_threshold,
            top_k,
        } => {
            let opts = EvalOptions {
                label_counting: match label_counting {
                    Counting::Multiset => LabelCounting::Multiset,
                    Counting::Set => LabelCounting::Set,
                },
                jaccard_threshold: *jaccard_threshold,
            };
            eval(ctx, &mut run, gold, pred, out, codebook.as_ref(), opts, *top_k)?
        }
        Command::Ablate { config, seeds } => ablate(ctx, &mut run, config, seeds)?,
    }
    Ok(run)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    let ctx = Ctx {
        out_dir: cli.out_dir.clone(),
        set: cli.set.clone(),
        exec: cli.exec,
    };
    let name = cli.command.name();
    match dispatch(&ctx, &cli.command).and_then(|run| run.finish(argv)) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            let (record, code) = errors::error_record(&err, name);
            eprintln!("{record}");
            let dir = ctx.dir_or(".");
            if fs::create_dir_all(&dir).is_ok() {
                let _ = fs::write(dir.join("error.json"), record.to_string() + "\n");
            }
            ExitCode::from(code)
        }
    }
}
