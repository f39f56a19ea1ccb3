use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

use tabpo_core::config::ConfigError;
use tabpo_core::confusion::PrefError;
use tabpo_core::objectives::ObjectiveError;
use tabpo_core::pipeline::PipelineError;
use tabpo_core::policy::PolicyError;
use tabpo_core::schema::SchemaError;
use tabpo_core::synth::SynthError;
use tabpo_core::trainer::TrainError;

/// Problems with CLI-level input files that are not owned by a core module.
#[derive(Debug, Error)]
pub enum InputError {
    #[error("{path}: line {line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("predictions do not cover the gold split: {0}")]
    Mismatch(String),
    #[error("bad list argument `{0}`")]
    BadList(String),
}

/// Exit codes, one per error kind. Clap reserves 2 for usage errors.
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_SCHEMA: u8 = 4;
pub const EXIT_SYNTH: u8 = 5;
pub const EXIT_PREF: u8 = 6;
pub const EXIT_TRAIN: u8 = 7;
pub const EXIT_DIVERGENCE: u8 = 8;
pub const EXIT_POLICY: u8 = 9;
pub const EXIT_IO: u8 = 10;
pub const EXIT_INPUT: u8 = 11;

fn variant<E: std::fmt::Debug>(e: &E) -> String {
    let dbg = format!("{e:?}");
    dbg.split(|c: char| !c.is_alphanumeric() && c != '_').next().unwrap_or_default().to_string()
}

fn train_kind(e: &TrainError) -> (&'static str, String, u8) {
    match e {
        TrainError::Divergence { .. } => ("TrainError", variant(e), EXIT_DIVERGENCE),
        _ => ("TrainError", variant(e), EXIT_TRAIN),
    }
}

/// Error kind, variant and exit code for the first recognised cause.
pub fn classify(err: &anyhow::Error) -> (&'static str, String, u8) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::Synth(s) => ("SynthError", variant(s), EXIT_SYNTH),
                PipelineError::Pref(p) => ("PrefError", variant(p), EXIT_PREF),
                PipelineError::Train(t) => train_kind(t),
            };
        }
        if let Some(e) = cause.downcast_ref::<ConfigError>() {
            return ("ConfigError", variant(e), EXIT_CONFIG);
        }
        if let Some(e) = cause.downcast_ref::<SchemaError>() {
            return ("SchemaError", variant(e), EXIT_SCHEMA);
        }
        if let Some(e) = cause.downcast_ref::<SynthError>() {
            return ("SynthError", variant(e), EXIT_SYNTH);
        }
        if let Some(e) = cause.downcast_ref::<PrefError>() {
            return ("PrefError", variant(e), EXIT_PREF);
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return train_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<ObjectiveError>() {
            return ("ObjectiveError", variant(e), EXIT_TRAIN);
        }
        if let Some(e) = cause.downcast_ref::<PolicyError>() {
            return ("PolicyError", variant(e), EXIT_POLICY);
        }
        if let Some(e) = cause.downcast_ref::<InputError>() {
            return ("InputError", variant(e), EXIT_INPUT);
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return ("IoError", format!("{:?}", e.kind()), EXIT_IO);
        }
    }
    ("Error", String::new(), EXIT_OTHER)
}

/// Machine-readable error record.
pub fn error_record(err: &anyhow::Error, subcommand: &str) -> (serde_json::Value, u8) {
    let (kind, variant, code) = classify(err);
    let record = json!({
        "error": {
            "kind": kind,
            "variant": variant,
            "exit_code": code,
            "subcommand": subcommand,
            "message": format!("{err:#}"),
        }
    });
    (record, code)
}
