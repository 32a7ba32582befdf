//! Library side of the `tcnn` binary: run configuration and one function per
//! subcommand, so that tests can drive the commands without a subprocess.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

pub use commands::{
    cmd_bench, cmd_eval, cmd_generate, cmd_report, cmd_tensorize, cmd_train, compare_to_baseline,
    load_data, seed_dir, BenchReport, GenerateSummary, Latency, LoadedRun, Report, RunInfo,
    SeedResult, TensorizeSummary, TrainSummary,
};
pub use config::{BenchConfig, DataConfig, RunConfig};

pub const THREADS_ENV: &str = "TCNN_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] tcnn::model::ModelError),
    #[error(transparent)]
    Data(#[from] tcnn::data::DataError),
    #[error(transparent)]
    Train(#[from] tcnn::train::TrainError),
    #[error(transparent)]
    Metrics(#[from] tcnn::metrics::MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Model(_) => "model",
            CliError::Data(_) => "data",
            CliError::Train(_) => "train",
            CliError::Metrics(_) => "metrics",
            CliError::Json(_) => "json",
        }
    }

    /// The machine-readable form written to stderr on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        if let CliError::Config { key, .. } = self {
            v["key"] = json!(key);
        }
        v
    }
}

/// Worker-thread cap from `TCNN_THREADS`, 1 when unset. Every kernel runs
/// on the calling thread, so any valid cap yields the same results.
pub fn thread_cap(value: Option<&str>) -> Result<usize> {
    match value {
        None => Ok(1),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config {
                key: THREADS_ENV.to_string(),
                msg: format!("expected a positive integer, got {s:?}"),
            }),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_cap_parsing() {
        assert_eq!(thread_cap(None).unwrap(), 1);
        assert_eq!(thread_cap(Some("4")).unwrap(), 4);
        assert!(thread_cap(Some("0")).is_err());
        assert!(thread_cap(Some("two")).is_err());
    }

    #[test]
    fn config_error_json_carries_key() {
        let e = CliError::Config {
            key: "train.epochs".into(),
            msg: "bad".into(),
        };
        let v = e.to_json();
        assert_eq!(v["error"], "config");
        assert_eq!(v["key"], "train.epochs");
    }
}
