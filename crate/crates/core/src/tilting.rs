//! Iterative tilting: `exp(lambda r)` is applied as `N` tilts of strength `lambda / N`, each
//! distilled into a fresh student score network from samples of the previous one.
//!
//! Only forward evaluations of the reward are ever requested.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_sample, draw_noise, forward_noise};
use crate::error::{Error, Result};
use crate::gmm::{forward_kernel_score, QuadraticReward};
use crate::model::{AdamConfig, AdamState, Denoiser, ScoreModel};
use crate::schedules::{EtaSchedule, TimeGrid, DEFAULT_T_MIN};

/// Black-box reward `x -> r(x)`.
pub trait RewardFn {
    fn eval(&self, x: &[f64]) -> f64;

    /// Closed form, when one exists; used only by oracles, never by training.
    fn as_quadratic(&self) -> Option<&QuadraticReward> {
        None
    }
}

impl<F: Fn(&[f64]) -> f64> RewardFn for F {
    fn eval(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

fn checked_reward<R: RewardFn + ?Sized>(reward: &R, x: &[f64]) -> Result<f64> {
    let value = reward.eval(x);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::RewardFault { x: x.to_vec(), value })
    }
}

/// Adam step size for distillation. Each tilt restarts Adam, whose first updates move every
/// parameter by about this much regardless of gradient size; at 1e-3 that jitter visibly
/// displaces the tilted sample mean.
pub const DEFAULT_TILT_LEARNING_RATE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TiltRunConfig {
    pub lambda: f64,
    pub n_tilts: usize,
    pub samples_per_tilt: usize,
    pub reverse_steps: usize,
    pub batch_size: usize,
    /// Mini-batch updates per tilt.
    pub epochs_per_tilt: usize,
    pub eta_hat: f64,
    pub t_min: f64,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for TiltRunConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            n_tilts: 20,
            samples_per_tilt: 1000,
            reverse_steps: 200,
            batch_size: 64,
            epochs_per_tilt: 100,
            eta_hat: 1.0,
            t_min: DEFAULT_T_MIN,
            seed: 0,
            optimizer: AdamConfig {
                learning_rate: DEFAULT_TILT_LEARNING_RATE,
                ..AdamConfig::default()
            },
        }
    }
}

impl TiltRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        let counts = [
            ("n_tilts", self.n_tilts),
            ("samples_per_tilt", self.samples_per_tilt),
            ("reverse_steps", self.reverse_steps),
            ("batch_size", self.batch_size),
            ("epochs_per_tilt", self.epochs_per_tilt),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.reverse_steps < 2 {
            return Err(Error::Config("reverse_steps must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.eta_hat) {
            return Err(Error::Config(format!(
                "eta_hat must lie in [0, 1], got {}",
                self.eta_hat
            )));
        }
        // Also checks t_min against the grid.
        TimeGrid::uniform(self.reverse_steps, self.t_min)?;
        Ok(())
    }

    /// Strength of each individual tilt, `lambda / N`.
    pub fn delta(&self) -> f64 {
        self.lambda / self.n_tilts as f64
    }

    fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.reverse_steps, self.t_min)
    }
}

/// `s_old + delta r(x0) (g - s_old)` with `g` the forward-kernel score.
pub fn tilt_target<D: Denoiser + ?Sized, R: RewardFn + ?Sized>(
    teacher: &D,
    x0: &[f64],
    xt: &[f64],
    t: f64,
    delta: f64,
    reward: &R,
) -> Result<Vec<f64>> {
    let r = checked_reward(reward, x0)?;
    let g = forward_kernel_score(x0, xt, teacher.schedule(), t)?;
    let s_old = teacher.score(xt, t)?;
    Ok(s_old.iter().zip(&g).map(|(s, g)| s + delta * r * (g - s)).collect())
}

/// Noised batch plus its `sigma_t^2`-scaled regression targets.
struct TiltBatch {
    xt: Array2<f64>,
    ts: Vec<f64>,
    sigmas: Vec<f64>,
    scaled_target: Array2<f64>,
}

fn tilt_batch<D: Denoiser + ?Sized, Rn: Rng + ?Sized>(
    teacher: &D,
    x0: ArrayView2<f64>,
    rewards: &[f64],
    delta: f64,
    t_min: f64,
    rng: &mut Rn,
) -> Result<TiltBatch> {
    let schedule = teacher.schedule();
    let (ts, z) = draw_noise(x0.nrows(), x0.ncols(), t_min, rng);
    let xt = forward_noise(schedule, x0, &ts, z.view())?;
    let eps_old = teacher.predict_eps_batch(xt.view(), &ts)?;
    let sigmas = ts.iter().map(|&t| schedule.sigma(t)).collect::<Result<Vec<_>>>()?;
    // sigma^2 s_old = -sigma eps_old and sigma^2 g = -sigma z.
    let mut scaled_target = Array2::zeros(x0.raw_dim());
    for (i, mut row) in scaled_target.rows_mut().into_iter().enumerate() {
        let w = delta * rewards[i];
        let sigma = sigmas[i];
        row.zip_mut_with(&eps_old.row(i), |v, &e| *v = -sigma * e);
        row.zip_mut_with(&z.row(i), |v, &zi| *v += w * (-sigma * zi - *v));
    }
    Ok(TiltBatch {
        xt,
        ts,
        sigmas,
        scaled_target,
    })
}

/// `(loss, d loss / d eps)` for `mean ||sigma^2 s - sigma^2 target||^2` with `s = -eps / sigma`.
fn scaled_score_loss(eps: ArrayView2<f64>, batch: &TiltBatch) -> (f64, Array2<f64>) {
    let n = eps.nrows() as f64;
    let mut grad = Array2::zeros(eps.raw_dim());
    let mut loss = 0.0;
    for (i, mut g) in grad.rows_mut().into_iter().enumerate() {
        let sigma = batch.sigmas[i];
        for (j, gj) in g.iter_mut().enumerate() {
            let diff = -sigma * eps[[i, j]] - batch.scaled_target[[i, j]];
            loss += diff * diff;
            *gj = -2.0 * sigma * diff / n;
        }
    }
    (loss / n, grad)
}

/// Monte-Carlo tilt loss of `student` on a batch of clean samples.
pub fn tilt_loss<S, D, R, Rn>(
    student: &S,
    teacher: &D,
    x0: ArrayView2<f64>,
    delta: f64,
    reward: &R,
    t_min: f64,
    rng: &mut Rn,
) -> Result<f64>
where
    S: Denoiser + ?Sized,
    D: Denoiser + ?Sized,
    R: RewardFn + ?Sized,
    Rn: Rng + ?Sized,
{
    if x0.nrows() == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let rewards = x0
        .rows()
        .into_iter()
        .map(|row| checked_reward(reward, &row.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let batch = tilt_batch(teacher, x0, &rewards, delta, t_min, rng)?;
    let eps = student.predict_eps_batch(batch.xt.view(), &batch.ts)?;
    Ok(scaled_score_loss(eps.view(), &batch).0)
}

/// Per-tilt wall-clock and reward bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltTrace {
    pub tilt: usize,
    pub sampling_seconds: f64,
    pub training_seconds: f64,
    pub reward_evaluations: usize,
    pub final_loss: f64,
    /// Seconds since the start of the run when this tilt finished.
    pub finished_at: f64,
}

/// Everything a per-tilt observer gets to see.
pub struct TiltOutcome<'a> {
    pub trace: &'a TiltTrace,
    pub student: &'a ScoreModel,
    /// Fresh samples from `student`; they also form the next tilt's dataset.
    pub samples: ArrayView2<'a, f64>,
}

pub struct TiltingResult {
    pub model: ScoreModel,
    pub trace: Vec<TiltTrace>,
    pub final_samples: Array2<f64>,
}

const SAMPLE_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

/// RNG for `purpose` at tilt `k`; independent of how many tilts ran before.
fn tilt_rng(seed: u64, k: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * k as u64 + purpose);
    rng
}

fn sample_model(model: &ScoreModel, config: &TiltRunConfig, k: usize) -> Result<Array2<f64>> {
    let grid = config.grid()?;
    let etas = EtaSchedule::new(model.schedule(), &grid, config.eta_hat)?;
    ddim_sample(
        model,
        &grid,
        &etas,
        config.samples_per_tilt,
        &mut tilt_rng(config.seed, k, SAMPLE_STREAM),
    )
}

/// Distils one tilt from `dataset` (samples of `teacher`). Returns the student, the number of
/// reward calls and the last mini-batch loss.
fn distil<R: RewardFn + ?Sized>(
    teacher: &ScoreModel,
    dataset: ArrayView2<f64>,
    config: &TiltRunConfig,
    reward: &R,
    k: usize,
) -> Result<(ScoreModel, usize, f64)> {
    let frozen = teacher.clone_frozen();
    let mut student = teacher.clone();
    let mut adam = AdamState::new(student.num_params(), config.optimizer);
    let rewards = dataset
        .rows()
        .into_iter()
        .map(|row| checked_reward(reward, &row.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = tilt_rng(config.seed, k, TRAIN_STREAM);
    let delta = config.delta();
    let mut last = f64::NAN;
    let n = dataset.nrows();
    for epoch in 0..config.epochs_per_tilt {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..n)).collect();
        let x0 = dataset.select(Axis(0), &idx);
        let batch_rewards: Vec<f64> = idx.iter().map(|&i| rewards[i]).collect();
        let batch = tilt_batch(&frozen, x0.view(), &batch_rewards, delta, config.t_min, &mut rng)?;
        let (loss, grads) = student
            .gradient(batch.xt.view(), &batch.ts, |eps| Ok(scaled_score_loss(eps, &batch)))
            .map_err(|e| match e {
                Error::Numerical(_) => Error::TrainingFault { epoch },
                other => other,
            })?;
        adam.step(student.params_mut(), &grads)?;
        if student.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingFault { epoch });
        }
        last = loss;
    }
    Ok((student, n, last))
}

/// One tilt: sample `S` points from `teacher`, then fit a student initialised at the teacher.
pub fn run_one_tilt<R: RewardFn + ?Sized>(
    teacher: &ScoreModel,
    config: &TiltRunConfig,
    reward: &R,
) -> Result<ScoreModel> {
    config.validate()?;
    let dataset = sample_model(teacher, config, 1).map_err(|e| e.in_tilt(1))?;
    distil(teacher, dataset.view(), config, reward, 1)
        .map(|(s, _, _)| s)
        .map_err(|e| e.in_tilt(1))
}

/// Runs all `N` tilts, calling `observer` after each one.
///
/// Samples drawn from the tilt-`k` student serve both the observer and as the dataset of tilt
/// `k + 1`, so each sampling run is used once for training.
pub fn iterative_tilting<R, O>(
    base: &ScoreModel,
    config: &TiltRunConfig,
    reward: &R,
    mut observer: O,
) -> Result<TiltingResult>
where
    R: RewardFn + ?Sized,
    O: FnMut(&TiltOutcome) -> Result<()>,
{
    config.validate()?;
    let start = Instant::now();
    let mut teacher = base.clone();
    let clock = Instant::now();
    let mut dataset = sample_model(&teacher, config, 1).map_err(|e| e.in_tilt(1))?;
    let mut sampling_seconds = clock.elapsed().as_secs_f64();
    let mut trace = Vec::with_capacity(config.n_tilts);
    for k in 1..=config.n_tilts {
        let clock = Instant::now();
        let (student, reward_evaluations, final_loss) =
            distil(&teacher, dataset.view(), config, reward, k).map_err(|e| e.in_tilt(k))?;
        let training_seconds = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let samples = sample_model(&student, config, k + 1).map_err(|e| e.in_tilt(k))?;
        let next_sampling = clock.elapsed().as_secs_f64();

        trace.push(TiltTrace {
            tilt: k,
            sampling_seconds,
            training_seconds,
            reward_evaluations,
            final_loss,
            finished_at: start.elapsed().as_secs_f64(),
        });
        observer(&TiltOutcome {
            trace: trace.last().expect("pushed above"),
            student: &student,
            samples: samples.view(),
        })
        .map_err(|e| e.in_tilt(k))?;
        teacher = student;
        dataset = samples;
        sampling_seconds = next_sampling;
    }
    Ok(TiltingResult {
        model: teacher,
        trace,
        final_samples: dataset,
    })
}
