//! Evaluation metrics and the per-tilt metrics record.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_step_batch, forward_noise};
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::model::Denoiser;
use crate::schedules::{EtaSchedule, TimeGrid};

/// Number of evaluation points used by default for score RMSE.
pub const DEFAULT_EVAL_POINTS: usize = 5000;

/// How the evaluation points `X_t` are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmseSampling {
    /// `t ~ U[t_min, 1]`, `X_0` from the oracle, then forward noising.
    #[default]
    Exact,
    /// States of the model's own stochastic reverse chain at a uniformly chosen grid time.
    ModelChain,
}

/// Root-mean-square distance between the model score and the exact score of `oracle`.
pub fn rmse_score_error<D: Denoiser + ?Sized, R: RngCore + ?Sized>(
    model: &D,
    oracle: &GaussianMixture,
    grid: &TimeGrid,
    n_eval: usize,
    sampling: RmseSampling,
    rng: &mut R,
) -> Result<f64> {
    if n_eval == 0 {
        return Err(Error::Domain("n_eval must be >= 1".into()));
    }
    if oracle.dim() != model.dim() {
        return Err(Error::Shape(format!(
            "oracle dimension {} vs model dimension {}",
            oracle.dim(),
            model.dim()
        )));
    }
    let schedule = *model.schedule();
    let (xt, ts) = match sampling {
        RmseSampling::Exact => {
            let x0 = oracle.sample(n_eval, rng);
            let ts: Vec<f64> = (0..n_eval).map(|_| rng.random_range(grid.t_min()..=1.0)).collect();
            let z = Array2::from_shape_simple_fn((n_eval, oracle.dim()), || rng.sample(rand_distr::StandardNormal));
            (forward_noise(&schedule, x0.view(), &ts, z.view())?, ts)
        }
        RmseSampling::ModelChain => chain_states(model, grid, n_eval, rng)?,
    };
    let learned = model.score_batch(xt.view(), &ts)?;
    let mut total = 0.0;
    for (i, row) in xt.rows().into_iter().enumerate() {
        let exact = oracle.exact_score(&schedule, ts[i], &row.to_vec())?;
        total += learned
            .row(i)
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok((total / n_eval as f64).sqrt())
}

/// One state per chain, taken at a uniformly drawn knot `t_k`, `k = 1..K-1`, of a full
/// `eta_hat = 1` reverse run.
fn chain_states<D: Denoiser + ?Sized, R: RngCore + ?Sized>(
    model: &D,
    grid: &TimeGrid,
    n: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let d = model.dim();
    let etas = EtaSchedule::new(model.schedule(), grid, 1.0)?;
    let times = grid.times();
    let k_max = grid.steps();
    let mut local = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let stops: Vec<usize> = (0..n).map(|_| local.random_range(1..k_max)).collect();
    let mut x = Array2::from_shape_simple_fn((n, d), || local.sample(rand_distr::StandardNormal));
    let mut out = Array2::zeros((n, d));
    for k in (1..k_max).rev() {
        let z = Array2::from_shape_simple_fn((n, d), || local.sample(rand_distr::StandardNormal));
        x = ddim_step_batch(model, x.view(), times[k + 1], times[k], etas.eta(k), z.view())?;
        for (i, &stop) in stops.iter().enumerate() {
            if stop == k {
                out.row_mut(i).assign(&x.row(i));
            }
        }
    }
    let ts = stops.iter().map(|&k| times[k]).collect();
    Ok((out, ts))
}

/// Mean negative log-density of `samples` under `target`, in nats.
pub fn nll_metric(samples: ArrayView2<f64>, target: &GaussianMixture) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::Domain("nll needs at least one sample".into()));
    }
    let logp = target.log_density_batch(samples)?;
    Ok(-logp.iter().sum::<f64>() / logp.len() as f64)
}

/// Squared distance between the sample mean and the exact mixture mean.
pub fn mean_mse_metric(samples: ArrayView2<f64>, target: &GaussianMixture) -> Result<f64> {
    if samples.nrows() < 2 {
        return Err(Error::Domain("mean error needs at least two samples".into()));
    }
    if samples.ncols() != target.dim() {
        return Err(Error::Shape(format!(
            "samples of dimension {} vs target {}",
            samples.ncols(),
            target.dim()
        )));
    }
    let mean = samples.mean_axis(Axis(0)).expect("non-empty");
    Ok(mean
        .iter()
        .zip(target.mean().iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub tilt_index: usize,
    pub rmse: f64,
    pub nll: f64,
    pub mean_mse: f64,
    #[serde(rename = "sampling_s")]
    pub sampling_seconds: f64,
    #[serde(rename = "training_s")]
    pub training_seconds: f64,
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for record in records {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Samples as headerless `x,y,...` rows.
pub fn write_samples(path: &Path, samples: ArrayView2<f64>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in samples.rows() {
        writer.write_record(row.iter().map(|v| v.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut values = Vec::new();
    let mut cols = None;
    for record in reader.records() {
        let record = record?;
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(Error::Shape("ragged sample file".into()));
        }
        for field in record.iter() {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Domain(format!("bad sample value {field:?}: {e}")))?,
            );
        }
    }
    let cols = cols.ok_or_else(|| Error::Domain("empty sample file".into()))?;
    Array2::from_shape_vec((values.len() / cols, cols), values).map_err(|e| Error::Shape(e.to_string()))
}
