use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tcnn::data::Split;
use tcnn::metrics::EvalReport;
use tcnn::model::RankConfig;
use tcnn_cli::{
    cmd_bench, cmd_eval, cmd_generate, cmd_report, cmd_tensorize, cmd_train, compare_to_baseline,
    thread_cap, CliError, Result, RunConfig, THREADS_ENV,
};

/// Tucker-factorized CNN experiments: data generation, training,
/// tensorization, evaluation, benchmarking and reporting.
#[derive(Debug, Parser)]
#[command(name = "tcnn", version)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset directory (PNG images plus index.csv).
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data_seed: Option<u64>,
        /// Number of images.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one model per seed and write checkpoints, records and test reports.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory; a synthetic set is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated initialization seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        data_seed: Option<u64>,
        /// Tucker rank bounds `r_in,r_out,h,w`.
        #[arg(long)]
        ranks: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Decompose a dense checkpoint into Tucker factors.
    Tensorize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ranks: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Dense checkpoint to report the compression ratio against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time forward passes; with two checkpoints also report their latency ratio.
    Bench {
        #[arg(long, num_args = 1)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Combine finished training runs into one comparison table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_ranks(s: &str) -> Result<RankConfig> {
    RankConfig::parse(s).map_err(|e| CliError::Config {
        key: "ranks".into(),
        msg: e.to_string(),
    })
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.out.clone()).ok_or_else(|| {
        CliError::Usage("no output directory: pass --out or set `out` in the config".into())
    })
}

fn write_outputs(dir: &Path, name: &str, json: &impl serde::Serialize, text: &str) -> Result<()> {
    let io = |path: PathBuf| move |source| CliError::Io { path, source };
    std::fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
    let json_path = dir.join(format!("{name}.json"));
    let mut body = serde_json::to_string_pretty(json)?;
    body.push('\n');
    std::fs::write(&json_path, body).map_err(io(json_path.clone()))?;
    let text_path = dir.join(format!("{name}.txt"));
    std::fs::write(&text_path, text).map_err(io(text_path.clone()))
}

fn run(cli: Cli) -> Result<()> {
    thread_cap(std::env::var(THREADS_ENV).ok().as_deref())?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Generate { out, data_seed, n } => {
            if let Some(s) = data_seed {
                cfg.data_seed = s;
            }
            if let Some(n) = n {
                cfg.data.n = n;
            }
            let out = out_dir(out, &cfg)?;
            let s = cmd_generate(&cfg, &out)?;
            println!(
                "wrote {} images ({} defective) to {}: train {}, val {}, test {}",
                s.samples,
                s.defective,
                s.dir.display(),
                s.train,
                s.val,
                s.test
            );
        }
        Command::Train {
            out,
            data,
            seed,
            seeds,
            data_seed,
            ranks,
            threshold,
            epochs,
            batch,
        } => {
            if data.is_some() {
                cfg.data.dir = data;
            }
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.seeds = None;
            }
            if seeds.is_some() {
                cfg.seeds = seeds;
            }
            if let Some(s) = data_seed {
                cfg.data_seed = s;
            }
            if let Some(r) = ranks {
                cfg.ranks = Some(parse_ranks(&r)?);
            }
            if let Some(t) = threshold {
                cfg.train.threshold = t;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch {
                cfg.train.batch_size = b;
            }
            let out = out_dir(out, &cfg)?;
            let summary = cmd_train(&cfg, &out)?;
            for s in &summary.seeds {
                println!(
                    "seed {}: best epoch {}, test F1 {}, {:.1}s",
                    s.seed,
                    s.best_epoch,
                    s.test
                        .f1
                        .map_or_else(|| "undef".to_string(), |f| format!("{f:.3}")),
                    s.seconds
                );
            }
            print!("{}", summary.run.params.table());
            print!(
                "{}",
                tcnn::metrics::summary_table(std::slice::from_ref(&summary.row))
            );
        }
        Command::Tensorize {
            checkpoint,
            ranks,
            out,
        } => {
            let s = cmd_tensorize(&checkpoint, &parse_ranks(&ranks)?, &out)?;
            print!("{}", s.params.table());
        }
        Command::Eval {
            checkpoint,
            data,
            threshold,
            split,
            baseline,
            out,
        } => {
            if data.is_some() {
                cfg.data.dir = data;
            }
            let which = Split::parse(&split)
                .ok_or_else(|| CliError::Usage(format!("unknown split {split:?}")))?;
            let threshold = threshold.unwrap_or(cfg.train.threshold);
            let mut report = cmd_eval(&cfg, &checkpoint, which, threshold)?;
            if let Some(b) = baseline {
                compare_to_baseline(&mut report, &checkpoint, &b)?;
            }
            let name = checkpoint.display().to_string();
            let mut text = EvalReport::table(&[(name.as_str(), &report)]);
            if let Some(c) = &report.comparison {
                text += &format!("compression x{:.2}\n", c.compression_ratio);
            }
            print!("{text}");
            if let Some(dir) = out {
                write_outputs(&dir, "eval", &report, &text)?;
            }
        }
        Command::Bench {
            checkpoint,
            batch,
            repeats,
            out,
        } => {
            let batch = batch.unwrap_or(cfg.bench.batch);
            let repeats = repeats.unwrap_or(cfg.bench.repeats);
            let report = cmd_bench(&checkpoint, batch, repeats, cfg.bench.max_batch)?;
            let text = report.table();
            print!("{text}");
            if let Some(dir) = out {
                write_outputs(&dir, "bench", &report, &text)?;
            }
        }
        Command::Report { runs, out } => {
            let report = cmd_report(&runs)?;
            let text = report.table();
            print!("{text}");
            if let Some(dir) = out {
                write_outputs(&dir, "report", &report, &text)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!(
                "{}",
                serde_json::json!({ "error": "usage", "message": msg.trim_end() })
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
