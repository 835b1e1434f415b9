//! Base training, iterative tilting for several `N`, and artifact output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::diffusion::{ddim_sample, train_base, TrainReport};
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::metrics::{mean_mse_metric, nll_metric, rmse_score_error, write_metrics, write_samples, MetricsRecord};
use crate::model::{Denoiser, ScoreModel};
use crate::schedules::EtaSchedule;
use crate::tilting::{iterative_tilting, RewardFn, TiltOutcome};

// RNG streams derived from the run seed, kept clear of the per-tilt streams used by tilting.
const DATA_STREAM: u64 = 1 << 62;
const EVAL_SAMPLE_STREAM: u64 = (1 << 62) + 1;
const EVAL_STREAM: u64 = 1 << 63;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Per-tilt evaluation stream, also distinct across different `N`.
fn eval_stream(seed: u64, n_tilts: usize, tilt: usize) -> ChaCha8Rng {
    stream(seed, EVAL_STREAM + ((n_tilts as u64) << 32) + tilt as u64)
}

/// Draws the training set from the base mixture and fits a fresh network to it.
pub fn train_base_model(config: &RunConfig) -> Result<(ScoreModel, TrainReport)> {
    let train = config.train_config();
    let data = config
        .base
        .sample(train.dataset_size, &mut stream(config.seed, DATA_STREAM));
    let model = ScoreModel::new(config.model.clone(), config.schedule.schedule(), config.seed)?;
    train_base(data.view(), model, &train)
}

fn record(
    config: &RunConfig,
    model: &ScoreModel,
    oracle: &GaussianMixture,
    samples: ndarray::ArrayView2<f64>,
    tilt_index: usize,
    n_tilts: usize,
    sampling_seconds: f64,
    training_seconds: f64,
) -> Result<MetricsRecord> {
    let grid = config.schedule.grid()?;
    let rmse = rmse_score_error(
        model,
        oracle,
        &grid,
        config.experiment.eval_points,
        config.experiment.rmse_sampling,
        &mut eval_stream(config.seed, n_tilts, tilt_index),
    )?;
    Ok(MetricsRecord {
        tilt_index,
        rmse,
        nll: nll_metric(samples, oracle)?,
        mean_mse: mean_mse_metric(samples, oracle)?,
        sampling_seconds,
        training_seconds,
    })
}

/// Metrics of the base model against the base mixture on `eval_points` fresh samples.
pub fn evaluate_base(model: &ScoreModel, config: &RunConfig) -> Result<MetricsRecord> {
    evaluate_against(model, config, &config.base, 0)
}

/// Metrics of `model` against `oracle` on `eval_points` fresh model samples.
pub fn evaluate_against(
    model: &ScoreModel,
    config: &RunConfig,
    oracle: &GaussianMixture,
    tilt_index: usize,
) -> Result<MetricsRecord> {
    let grid = config.schedule.grid()?;
    let etas = EtaSchedule::new(model.schedule(), &grid, config.schedule.eta_hat)?;
    let clock = std::time::Instant::now();
    let samples = ddim_sample(
        model,
        &grid,
        &etas,
        config.experiment.eval_points,
        &mut stream(config.seed, EVAL_SAMPLE_STREAM),
    )?;
    let seconds = clock.elapsed().as_secs_f64();
    record(config, model, oracle, samples.view(), tilt_index, 0, seconds, 0.0)
}

/// Exact intermediate law after `k` of `n` tilts.
pub fn oracle_at(config: &RunConfig, k: usize, n: usize) -> Result<GaussianMixture> {
    config
        .base
        .tilt_quadratic(&config.reward, config.tilt.lambda * k as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n_tilts: usize,
    pub sampling_s: f64,
    pub training_s: f64,
    pub nll: f64,
    pub mean_mse: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone)]
pub struct TiltingRun {
    pub records: Vec<MetricsRecord>,
    pub summary: SummaryRow,
    pub final_model: ScoreModel,
    pub final_samples: ndarray::Array2<f64>,
}

/// Runs `n_tilts` tilts from `base` with metrics against the exact path. With `out_dir`, writes
/// one checkpoint per tilt, `metrics.csv`, and samples at the middle and last tilt.
pub fn run_tilting<R: RewardFn + ?Sized>(
    base: &ScoreModel,
    config: &RunConfig,
    reward: &R,
    n_tilts: usize,
    out_dir: Option<&Path>,
) -> Result<TiltingRun> {
    let tilt_config = config.tilt_config(n_tilts);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mid = n_tilts.div_ceil(2);
    let mut records = Vec::with_capacity(n_tilts);
    let observer = |outcome: &TiltOutcome| -> Result<()> {
        let k = outcome.trace.tilt;
        let oracle = oracle_at(config, k, n_tilts)?;
        let rec = record(
            config,
            outcome.student,
            &oracle,
            outcome.samples,
            k,
            n_tilts,
            outcome.trace.sampling_seconds,
            outcome.trace.training_seconds,
        )?;
        if let Some(dir) = out_dir {
            save_checkpoint(outcome.student, &dir.join(format!("tilt_{k:04}.ckpt")))?;
            if k == mid || k == n_tilts {
                write_samples(&dir.join(format!("samples_tilt_{k:04}.csv")), outcome.samples)?;
            }
        }
        records.push(rec);
        Ok(())
    };
    let result = iterative_tilting(base, &tilt_config, reward, observer)?;
    if let Some(dir) = out_dir {
        write_metrics(&dir.join("metrics.csv"), &records)?;
    }
    let last = records.last().expect("at least one tilt");
    let summary = SummaryRow {
        n_tilts,
        sampling_s: records.iter().map(|r| r.sampling_seconds).sum(),
        training_s: records.iter().map(|r| r.training_seconds).sum(),
        nll: last.nll,
        mean_mse: last.mean_mse,
        rmse: last.rmse,
    };
    Ok(TiltingRun {
        summary,
        records,
        final_model: result.model,
        final_samples: result.final_samples,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub base_report: Option<TrainReport>,
    pub base_metrics: MetricsRecord,
    pub rows: Vec<SummaryRow>,
}

/// Trains (or loads) the base model, then runs every configured `N`.
///
/// Layout under `out_dir`: `config.toml`, `base.ckpt`, `base_metrics.csv`,
/// `n_{N:04}/{tilt_XXXX.ckpt, metrics.csv, samples_tilt_XXXX.csv}` and `summary.csv`.
pub fn run_experiment(config: &RunConfig, base_checkpoint: Option<&Path>) -> Result<ExperimentOutput> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), config.to_toml()?)?;

    let (base, base_report) = match base_checkpoint {
        Some(path) => {
            let model = load_checkpoint(path).map_err(|e| e.in_phase("load-base"))?;
            check_compatible(&model, config).map_err(|e| e.in_phase("load-base"))?;
            (model, None)
        }
        None => {
            let (model, report) = train_base_model(config).map_err(|e| e.in_phase("train-base"))?;
            save_checkpoint(&model, &out.join("base.ckpt"))?;
            (model, Some(report))
        }
    };
    let base_metrics = evaluate_base(&base, config).map_err(|e| e.in_phase("eval-base"))?;
    write_metrics(&out.join("base_metrics.csv"), std::slice::from_ref(&base_metrics))?;

    let mut rows = Vec::new();
    for &n in &config.experiment.n_tilts {
        let dir = run_dir(out, n);
        let run = run_tilting(&base, config, &config.reward, n, Some(&dir))
            .map_err(|e| e.in_phase(format!("tilting N={n}")))?;
        rows.push(run.summary);
        write_summary(&out.join("summary.csv"), &rows)?;
    }
    Ok(ExperimentOutput {
        base_report,
        base_metrics,
        rows,
    })
}

pub fn run_dir(out: &Path, n_tilts: usize) -> PathBuf {
    out.join(format!("n_{n_tilts:04}"))
}

pub fn check_compatible(model: &ScoreModel, config: &RunConfig) -> Result<()> {
    if model.config() != &config.model || model.schedule() != &config.schedule.schedule() {
        return Err(Error::Config(
            "checkpoint architecture or schedule differs from the configuration".into(),
        ));
    }
    Ok(())
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Fixed-width table with the runtime and metric columns.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>8} {:>12} {:>12} {:>10} {:>12} {:>10}",
        "N", "sampling_s", "training_s", "nll", "mean_mse", "rmse"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>8} {:>12.2} {:>12.2} {:>10.4} {:>12.3e} {:>10.4}",
            r.n_tilts, r.sampling_s, r.training_s, r.nll, r.mean_mse, r.rmse
        );
    }
    s
}

/// Least-squares line `y = a + b x`; returns `(a, b, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (my - slope * mx, slope, r2)
}
