use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tcnn::data::{
    generate_synthetic, read_dataset, split, substream, synthetic_dataset, write_dataset, Split,
    SplitDataset,
};
use tcnn::metrics::{summary_table, Comparison, EvalReport, SummaryRow};
use tcnn::model::{
    build_model, count_params, load_checkpoint, save_checkpoint, tensorize_pretrained, ModelSpec,
    ParamReport, RankConfig,
};
use tcnn::nn::init;
use tcnn::train::{evaluate, train, TrainRecord};

use crate::config::RunConfig;
use crate::{CliError, Result};

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RECORD_FILE: &str = "record.json";
pub const RECORD_JSONL: &str = "record.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const PARAMS_FILE: &str = "params.json";
pub const SUMMARY_FILE: &str = "summary.txt";
const WARMUPS: usize = 3;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Reads `data.dir` if configured, otherwise generates the synthetic set
/// from `data_seed`.
pub fn load_data(cfg: &RunConfig, size: usize, data_seed: u64) -> Result<SplitDataset> {
    Ok(match &cfg.data.dir {
        Some(dir) => read_dataset(dir, size)?,
        None => synthetic_dataset(
            cfg.data.n,
            cfg.data.defect_fraction,
            size,
            cfg.data.fractions,
            data_seed,
        )?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub dir: PathBuf,
    pub data_seed: u64,
    pub samples: usize,
    pub defective: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<GenerateSummary> {
    cfg.validate()?;
    let d = &cfg.data;
    let raw = generate_synthetic(d.n, d.defect_fraction, cfg.image_size, cfg.data_seed)?;
    let labels: Vec<u8> = raw.iter().map(|r| r.label).collect();
    let indices = split(&labels, d.fractions, cfg.data_seed)?;
    write_dataset(out, &raw, &indices)?;
    Ok(GenerateSummary {
        dir: out.to_path_buf(),
        data_seed: cfg.data_seed,
        samples: raw.len(),
        defective: labels.iter().filter(|&&l| l == 1).count(),
        train: indices.train.len(),
        val: indices.val.len(),
        test: indices.test.len(),
    })
}

/// What one `train` invocation trained, stored as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub label: String,
    pub ranks: Option<RankConfig>,
    pub spec: ModelSpec,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub threshold: f64,
    pub params: ParamReport,
    pub clamps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub seconds: f64,
    pub test: EvalReport,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run: RunInfo,
    pub seeds: Vec<SeedResult>,
    pub row: SummaryRow,
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

/// Trains one model per seed on a shared dataset. Each seed directory gets
/// the best-epoch checkpoint, the training record and a test-split report.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let base = cfg.base_spec();
    let (spec, notices) = match &cfg.ranks {
        Some(r) => base.with_ranks(r),
        None => (base, Vec::new()),
    };
    for n in &notices {
        eprintln!("notice: {n}");
    }
    let params = count_params(&build_model(&spec, seeds[0])?)?;
    let data = load_data(cfg, spec.input_shape[1], cfg.data_seed)?;
    let train_cfg = cfg.train_config();
    let test_set = data.split(Split::Test);
    create_dir(out)?;

    let mut results = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let outcome = train(build_model(&spec, seed)?, &data, &train_cfg)?;
        let dir = seed_dir(out, seed);
        create_dir(&dir)?;
        save_checkpoint(
            &outcome.best,
            &dir.join(CHECKPOINT_DIR),
            Some(cfg.data_seed),
        )?;
        outcome.record.write_jsonl(&dir.join(RECORD_JSONL))?;
        write_json(&dir.join(RECORD_FILE), &outcome.record)?;
        let test = evaluate(&outcome.best, &test_set, train_cfg.threshold)?;
        write_json(&dir.join(EVAL_FILE), &test)?;
        results.push(SeedResult {
            seed,
            best_epoch: outcome.record.best_epoch,
            seconds: outcome.record.seconds(),
            test,
        });
    }

    let run = RunInfo {
        label: cfg.ranks.map_or_else(|| "dense".to_string(), |r| r.label()),
        ranks: cfg.ranks,
        spec,
        seeds,
        data_seed: cfg.data_seed,
        threshold: train_cfg.threshold,
        params,
        clamps: notices.iter().map(ToString::to_string).collect(),
    };
    let reports: Vec<EvalReport> = results.iter().map(|r| r.test.clone()).collect();
    let row = SummaryRow::from_reports(
        run.label.clone(),
        &reports,
        run.params.compression_ratio,
        None,
    );
    write_json(&out.join(RUN_FILE), &run)?;
    write_text(
        &out.join(SUMMARY_FILE),
        &summary_table(std::slice::from_ref(&row)),
    )?;
    Ok(TrainSummary {
        run,
        seeds: results,
        row,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorizeSummary {
    pub params: ParamReport,
    pub clamps: Vec<String>,
}

/// Decomposes every conv kernel of a dense checkpoint and writes the
/// factorized model as a new checkpoint.
pub fn cmd_tensorize(
    checkpoint: &Path,
    ranks: &RankConfig,
    out: &Path,
) -> Result<TensorizeSummary> {
    let (dense, manifest) = load_checkpoint::<f32>(checkpoint)?;
    let (model, notices) = tensorize_pretrained(&dense, ranks)?;
    for n in &notices {
        eprintln!("notice: {n}");
    }
    save_checkpoint(&model, out, manifest.data_seed)?;
    let params = count_params(&model)?;
    write_json(&out.join(PARAMS_FILE), &params)?;
    Ok(TensorizeSummary {
        params,
        clamps: notices.iter().map(ToString::to_string).collect(),
    })
}

/// Scores one split of the configured dataset with a checkpoint. A
/// synthetic dataset is regenerated from the checkpoint's data seed.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    which: Split,
    threshold: f64,
) -> Result<EvalReport> {
    let (model, manifest) = load_checkpoint::<f32>(checkpoint)?;
    let data_seed = manifest.data_seed.unwrap_or(cfg.data_seed);
    let data = load_data(cfg, model.spec.input_shape[1], data_seed)?;
    Ok(evaluate(&model, &data.split(which), threshold)?)
}

/// Attaches the compression ratio of `checkpoint` against a dense baseline
/// checkpoint to `report`.
pub fn compare_to_baseline(
    report: &mut EvalReport,
    checkpoint: &Path,
    baseline: &Path,
) -> Result<()> {
    let (run, _) = load_checkpoint::<f32>(checkpoint)?;
    let (base, _) = load_checkpoint::<f32>(baseline)?;
    report.comparison = Some(Comparison::new(
        &count_params(&run)?,
        &count_params(&base)?,
        None,
        None,
    )?);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Latency {
    pub checkpoint: PathBuf,
    pub batch: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: Vec<Latency>,
    /// Mean latency of the second checkpoint over the first.
    pub ratio: Option<f64>,
}

/// Times forward passes on a seeded random batch after a few untimed
/// warmup passes.
pub fn cmd_bench(
    checkpoints: &[PathBuf],
    batch: usize,
    repeats: usize,
    max_batch: usize,
) -> Result<BenchReport> {
    if checkpoints.is_empty() || checkpoints.len() > 2 {
        return Err(CliError::Usage("bench takes one or two checkpoints".into()));
    }
    if batch == 0 || repeats == 0 {
        return Err(CliError::Usage("batch and repeats must be positive".into()));
    }
    if batch > max_batch {
        return Err(CliError::Usage(format!(
            "batch {batch} exceeds the configured max_batch {max_batch}"
        )));
    }
    let mut runs = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let (model, _) = load_checkpoint::<f32>(path)?;
        let [c, h, w] = model.spec.input_shape;
        let x = init::uniform(&[batch, c, h, w], 1.0, &mut substream(0, 0));
        for _ in 0..WARMUPS {
            model.forward(&x)?;
        }
        let mut samples_ms = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            std::hint::black_box(model.forward(&x)?);
            samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median_ms = if sorted.len() % 2 == 0 {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        } else {
            sorted[mid]
        };
        runs.push(Latency {
            checkpoint: path.clone(),
            batch,
            mean_ms: samples_ms.iter().sum::<f64>() / repeats as f64,
            median_ms,
            min_ms: sorted[0],
            samples_ms,
        });
    }
    let ratio = (runs.len() == 2).then(|| runs[1].mean_ms / runs[0].mean_ms);
    Ok(BenchReport { runs, ratio })
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<40} {:>6} {:>10} {:>10} {:>10}\n",
            "checkpoint", "batch", "mean ms", "median ms", "min ms"
        );
        for r in &self.runs {
            out += &format!(
                "{:<40} {:>6} {:>10.2} {:>10.2} {:>10.2}\n",
                r.checkpoint.display(),
                r.batch,
                r.mean_ms,
                r.median_ms,
                r.min_ms
            );
        }
        if let Some(ratio) = self.ratio {
            out += &format!("latency ratio (second / first): {ratio:.3}\n");
        }
        out
    }
}

/// A finished `train` output directory.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub info: RunInfo,
    pub reports: Vec<EvalReport>,
    pub records: Vec<TrainRecord>,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let info: RunInfo = read_json(&dir.join(RUN_FILE))?;
        let mut reports = Vec::with_capacity(info.seeds.len());
        let mut records = Vec::with_capacity(info.seeds.len());
        for &seed in &info.seeds {
            let sd = seed_dir(dir, seed);
            reports.push(read_json(&sd.join(EVAL_FILE))?);
            records.push(read_json(&sd.join(RECORD_FILE))?);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            info,
            reports,
            records,
        })
    }

    pub fn mean_seconds(&self) -> f64 {
        self.records.iter().map(TrainRecord::seconds).sum::<f64>()
            / self.records.len().max(1) as f64
    }

    fn is_dense(&self) -> bool {
        !self.info.spec.is_factorized()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
}

impl Report {
    pub fn table(&self) -> String {
        summary_table(&self.rows)
    }
}

/// Combines finished runs into one table, dense baseline first. Compression
/// and training-time improvement are measured against the single dense run
/// when one is present.
pub fn cmd_report(run_dirs: &[PathBuf]) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(CliError::Usage(
            "report needs at least one run directory".into(),
        ));
    }
    let runs = run_dirs
        .iter()
        .map(|d| LoadedRun::load(d))
        .collect::<Result<Vec<_>>>()?;
    let dense: Vec<&LoadedRun> = runs.iter().filter(|r| r.is_dense()).collect();
    if dense.len() > 1 {
        return Err(CliError::Usage(format!(
            "several dense runs given: {} and {}",
            dense[0].dir.display(),
            dense[1].dir.display()
        )));
    }
    let baseline = dense.first().copied();
    let mut ordered: Vec<&LoadedRun> = baseline.into_iter().collect();
    ordered.extend(runs.iter().filter(|r| !r.is_dense()));
    let rows = ordered
        .into_iter()
        .map(|run| {
            let (ratio, time) = match baseline {
                Some(b) if !run.is_dense() => {
                    let c = Comparison::new(
                        &run.info.params,
                        &b.info.params,
                        Some(run.mean_seconds()),
                        Some(b.mean_seconds()),
                    )?;
                    (c.compression_ratio, c.time_improvement)
                }
                _ => (run.info.params.compression_ratio, None),
            };
            Ok(SummaryRow::from_reports(
                run.info.label.clone(),
                &run.reports,
                ratio,
                time,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report { rows })
}
