//! Base-model training by denoising score matching and DDIM sampling.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdamConfig, AdamState, Denoiser, ScoreModel};
use crate::schedules::{EtaSchedule, NoiseSchedule, TimeGrid, DEFAULT_T_MIN};

/// `alpha_t` at or below this is treated as "no signal left" by the sampler.
pub const ALPHA_FLOOR: f64 = 1e-8;

/// Chains advanced together through one forward pass.
const SAMPLER_CHUNK: usize = 500;
const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub dataset_size: usize,
    pub validation_fraction: f64,
    pub t_min: f64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Decay of the parameter moving average that is validated and returned; 0 disables it.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            patience: 50,
            dataset_size: 30_000,
            validation_fraction: 0.1,
            t_min: DEFAULT_T_MIN,
            seed: 0,
            optimizer: AdamConfig::default(),
            ema_decay: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 || self.dataset_size == 0 {
            return Err(Error::Config(format!("training counts must be >= 1: {self:?}")));
        }
        if self.patience > self.epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config(format!("t_min must lie in (0, 1), got {}", self.t_min)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// Zero-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }

    pub fn best_validation_loss(&self) -> f64 {
        self.validation_loss[self.best_epoch]
    }
}

/// Per-example times `t ~ U[t_min, 1]` and Gaussian noise.
pub(crate) fn draw_noise<R: Rng + ?Sized>(n: usize, dim: usize, t_min: f64, rng: &mut R) -> (Vec<f64>, Array2<f64>) {
    let ts = (0..n).map(|_| rng.random_range(t_min..=1.0)).collect();
    let z = Array2::from_shape_simple_fn((n, dim), || rng.sample(StandardNormal));
    (ts, z)
}

/// `alpha_t x0 + sigma_t z`, row by row.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    x0: ArrayView2<f64>,
    ts: &[f64],
    z: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let mut xt = Array2::zeros(x0.raw_dim());
    for (i, &t) in ts.iter().enumerate() {
        let (alpha, sigma) = schedule.eval(t)?;
        let mut row = xt.row_mut(i);
        row.assign(&x0.row(i));
        row *= alpha;
        row.scaled_add(sigma, &z.row(i));
    }
    Ok(xt)
}

fn eps_mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    let diff = &pred - &target;
    diff.mapv(|v| v * v).sum() / pred.nrows() as f64
}

/// Monte-Carlo noise-prediction loss `mean ||eps(x_t, t) - x_1||^2` on a batch of clean samples.
pub fn dsm_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x0: ArrayView2<f64>,
    t_min: f64,
    rng: &mut R,
) -> Result<f64> {
    if x0.nrows() == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let (ts, z) = draw_noise(x0.nrows(), x0.ncols(), t_min, rng);
    let xt = forward_noise(model.schedule(), x0, &ts, z.view())?;
    let pred = model.predict_eps_batch(xt.view(), &ts)?;
    Ok(eps_mse(pred.view(), z.view()))
}

fn dsm_loss_grad(model: &ScoreModel, x0: ArrayView2<f64>, ts: &[f64], z: ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
    let xt = forward_noise(model.schedule(), x0, ts, z)?;
    model.gradient(xt.view(), ts, |pred| {
        let n = pred.nrows() as f64;
        let diff = &pred - &z;
        Ok((diff.mapv(|v| v * v).sum() / n, diff * (2.0 / n)))
    })
}

fn fixed_noise_loss<D: Denoiser + ?Sized>(
    model: &D,
    x0: ArrayView2<f64>,
    ts: &[f64],
    z: ArrayView2<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..x0.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x0.nrows());
        let xt = forward_noise(
            model.schedule(),
            x0.slice(s![start..end, ..]),
            &ts[start..end],
            z.slice(s![start..end, ..]),
        )?;
        let pred = model.predict_eps_batch(xt.view(), &ts[start..end])?;
        total += eps_mse(pred.view(), z.slice(s![start..end, ..])) * (end - start) as f64;
    }
    Ok(total / x0.nrows() as f64)
}

fn gather(data: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    data.select(Axis(0), idx)
}

/// Mini-batch Adam on the noise-prediction loss with early stopping on a held-out split.
///
/// The held-out examples use one fixed draw of `(t, x_1)` so the validation curve is free of
/// resampling noise. Validation and the returned parameters use the moving average of the
/// iterates (`ema_decay`), taken at the best validation epoch.
pub fn train_base(
    dataset: ArrayView2<f64>,
    mut model: ScoreModel,
    config: &TrainConfig,
) -> Result<(ScoreModel, TrainReport)> {
    config.validate()?;
    if dataset.ncols() != model.dim() {
        return Err(Error::Shape(format!(
            "dataset of dimension {}, model of dimension {}",
            dataset.ncols(),
            model.dim()
        )));
    }
    let n = dataset.nrows();
    let n_val = ((n as f64 * config.validation_fraction).round() as usize).max(1);
    if n <= n_val || n - n_val < config.batch_size {
        return Err(Error::Config(format!(
            "dataset of {n} rows is too small for batch size {} after holding out {n_val}",
            config.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val = gather(dataset, val_idx);
    let (val_ts, val_z) = draw_noise(n_val, dataset.ncols(), config.t_min, &mut rng);
    let mut train_idx = train_idx.to_vec();

    let mut adam = AdamState::new(model.num_params(), config.optimizer);
    let mut report = TrainReport::default();
    let mut averaged = model.clone();
    let mut steps: u64 = 0;
    let mut best_params = model.params().to_vec();
    let mut best_val = f64::INFINITY;
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let x0 = gather(dataset, batch);
            let (ts, z) = draw_noise(batch.len(), x0.ncols(), config.t_min, &mut rng);
            let (loss, grads) = dsm_loss_grad(&model, x0.view(), &ts, z.view()).map_err(|e| match e {
                Error::Numerical(_) => Error::TrainingFault { epoch },
                other => other,
            })?;
            adam.step(model.params_mut(), &grads)?;
            // Bias-corrected warm-up keeps the average from being dragged toward the initialization.
            steps += 1;
            let decay = config.ema_decay.min((1.0 + steps as f64) / (10.0 + steps as f64));
            for (e, p) in averaged.params_mut().iter_mut().zip(model.params()) {
                *e = decay * *e + (1.0 - decay) * p;
            }
            epoch_loss += loss * batch.len() as f64;
        }
        let val_loss = fixed_noise_loss(&averaged, val.view(), &val_ts, val_z.view())
            .map_err(|_| Error::TrainingFault { epoch })?;
        if !val_loss.is_finite() || !epoch_loss.is_finite() {
            return Err(Error::TrainingFault { epoch });
        }
        report.train_loss.push(epoch_loss / train_idx.len() as f64);
        report.validation_loss.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            report.best_epoch = epoch;
            best_params.copy_from_slice(averaged.params());
        } else if epoch - report.best_epoch >= config.patience {
            report.stopped_early = true;
            break;
        }
    }
    model.params_mut().copy_from_slice(&best_params);
    Ok((model, report))
}

/// One DDIM transition `t_hi -> t_lo` for a batch of chains.
///
/// When `alpha(t_hi)` has vanished (the top of the grid) the clean-sample estimate carries no
/// information and is set to zero instead of being divided out of the noise.
pub fn ddim_step_batch<D: Denoiser + ?Sized>(
    model: &D,
    x: ArrayView2<f64>,
    t_hi: f64,
    t_lo: f64,
    eta: f64,
    z: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if !(t_lo <= t_hi) {
        return Err(Error::Domain(format!(
            "ddim step needs t_lo <= t_hi, got {t_lo} > {t_hi}"
        )));
    }
    let schedule = model.schedule();
    let (alpha_hi, sigma_hi) = schedule.eval(t_hi)?;
    let (alpha_lo, sigma_lo) = schedule.eval(t_lo)?;
    if eta < 0.0 || eta > sigma_lo * (1.0 + 1e-12) {
        return Err(Error::ScheduleViolation { eta, sigma: sigma_lo });
    }
    let ts = vec![t_hi; x.nrows()];
    let eps = model.predict_eps_batch(x, &ts)?;
    let mut x0 = if alpha_hi > ALPHA_FLOOR {
        (&x - &(&eps * sigma_hi)) / alpha_hi
    } else {
        Array2::zeros(x.raw_dim())
    };
    let keep = (sigma_lo * sigma_lo - eta * eta).max(0.0).sqrt();
    x0 *= alpha_lo;
    x0.scaled_add(keep, &eps);
    if eta > 0.0 {
        x0.scaled_add(eta, &z);
    }
    Ok(x0)
}

pub fn ddim_step<D: Denoiser + ?Sized>(
    model: &D,
    x: &[f64],
    t_hi: f64,
    t_lo: f64,
    eta: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    let d = x.len();
    let xs = ArrayView2::from_shape((1, d), x).map_err(|e| Error::Shape(e.to_string()))?;
    let zs = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(ddim_step_batch(model, xs, t_hi, t_lo, eta, zs)?
        .into_raw_vec_and_offset()
        .0)
}

/// Final Dirac step: `(x - sigma_t eps) / alpha_t` at `t = t_1`.
fn denoise_final<D: Denoiser + ?Sized>(model: &D, x: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
    let (alpha, sigma) = model.schedule().eval(t)?;
    if alpha <= ALPHA_FLOOR {
        return Err(Error::DegenerateStep(format!(
            "alpha({t}) = {alpha} at the final denoising step"
        )));
    }
    let eps = model.predict_eps_batch(x, &vec![t; x.nrows()])?;
    Ok((&x - &(eps * sigma)) / alpha)
}

fn chain_rng(base: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(chain as u64);
    rng
}

/// Draws `n` samples by running the DDIM chain down `grid`.
///
/// Chain `i` consumes its own RNG stream, so the output does not depend on how chains are
/// grouped into forward passes.
pub fn ddim_sample<D: Denoiser + ?Sized, R: RngCore + ?Sized>(
    model: &D,
    grid: &TimeGrid,
    etas: &EtaSchedule,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::Domain("sample count must be >= 1".into()));
    }
    let base = rng.next_u64();
    let d = model.dim();
    let times = grid.times();
    let k_max = grid.steps();
    let mut out = Array2::zeros((n, d));
    for start in (0..n).step_by(SAMPLER_CHUNK) {
        let end = (start + SAMPLER_CHUNK).min(n);
        let mut rngs: Vec<ChaCha8Rng> = (start..end).map(|i| chain_rng(base, i)).collect();
        let draw = |rngs: &mut [ChaCha8Rng]| {
            let mut z = Array2::zeros((rngs.len(), d));
            for (mut row, r) in z.rows_mut().into_iter().zip(rngs.iter_mut()) {
                row.iter_mut().for_each(|v| *v = r.sample(StandardNormal));
            }
            z
        };
        let mut x = draw(&mut rngs);
        for k in (1..k_max).rev() {
            let eta = etas.eta(k);
            let z = if eta > 0.0 {
                draw(&mut rngs)
            } else {
                Array2::zeros((end - start, d))
            };
            x = ddim_step_batch(model, x.view(), times[k + 1], times[k], eta, z.view())?;
        }
        let x0 = denoise_final(model, x.view(), times[1])?;
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite sample".into()));
        }
        out.slice_mut(s![start..end, ..]).assign(&x0);
    }
    Ok(out)
}
