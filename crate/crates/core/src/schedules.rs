//! Noise schedules `(alpha_t, sigma_t)`, reverse-time grids and DDIM noise levels.
//!
//! Every schedule satisfies `(alpha_0, sigma_0) = (1, 0)` and `(alpha_1, sigma_1) = (0, 1)`,
//! with `alpha` non-increasing and `sigma` non-decreasing on `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

/// Default lower clamp for positive times.
pub const DEFAULT_T_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Variance-preserving cosine schedule, `alpha^2 + sigma^2 = 1`.
    CosineVp,
    /// Straight-line interpolation `(1 - t, t)`.
    Linear,
}

impl ScheduleKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            ScheduleKind::CosineVp => 0,
            ScheduleKind::Linear => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ScheduleKind::CosineVp),
            1 => Some(ScheduleKind::Linear),
            _ => None,
        }
    }
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [0, 1]")))
    }
}

fn cosine_f(t: f64) -> f64 {
    let angle = (t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    angle.cos().powi(2)
}

/// Continuous-time cosine schedule: `abar(t) = f(t)/f(0)`, returns `(sqrt(abar), sqrt(1 - abar))`.
pub fn cosine_schedule(t: f64) -> Result<(f64, f64)> {
    check_unit(t)?;
    let abar = (cosine_f(t) / cosine_f(0.0)).clamp(0.0, 1.0);
    Ok((abar.sqrt(), (1.0 - abar).sqrt()))
}

pub fn linear_schedule(t: f64) -> Result<(f64, f64)> {
    check_unit(t)?;
    Ok((1.0 - t, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind) -> Self {
        Self { kind }
    }

    pub fn cosine() -> Self {
        Self::new(ScheduleKind::CosineVp)
    }

    pub fn linear() -> Self {
        Self::new(ScheduleKind::Linear)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `(alpha_t, sigma_t)`; domain error outside `[0, 1]`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        match self.kind {
            ScheduleKind::CosineVp => cosine_schedule(t),
            ScheduleKind::Linear => linear_schedule(t),
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.eval(t).map(|(a, _)| a)
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.eval(t).map(|(_, s)| s)
    }
}

/// Reverse-time knots `t_0 = 0 < t_1 < ... < t_K = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    t_min: f64,
}

impl TimeGrid {
    /// `t_0 = 0` and `t_k = t_min + (k-1)(1 - t_min)/(K-1)` for `k = 1..=K`.
    pub fn uniform(steps: usize, t_min: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("time grid needs K >= 2, got {steps}")));
        }
        if !(t_min > 0.0 && t_min < 1.0 / steps as f64) {
            return Err(Error::Config(format!(
                "t_min must lie in (0, 1/K) = (0, {}), got {t_min}",
                1.0 / steps as f64
            )));
        }
        let span = (1.0 - t_min) / (steps - 1) as f64;
        let mut times = Vec::with_capacity(steps + 1);
        times.push(0.0);
        for k in 1..steps {
            times.push(t_min + (k - 1) as f64 * span);
        }
        times.push(1.0);
        Ok(Self { times, t_min })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of intervals `K`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }
}

/// DDIM noise level for the transition `t_hi -> t_lo`:
/// `eta_hat * sigma(t_lo) * sqrt(1 - alpha(t_hi)^2 / alpha(t_lo)^2)`.
pub fn eta_for_step(schedule: &NoiseSchedule, t_lo: f64, t_hi: f64, eta_hat: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eta_hat) {
        return Err(Error::Domain(format!("eta_hat {eta_hat} outside [0, 1]")));
    }
    if !(t_lo > 0.0 && t_lo <= t_hi && t_hi <= 1.0) {
        return Err(Error::Domain(format!(
            "need 0 < t_lo <= t_hi <= 1, got t_lo={t_lo}, t_hi={t_hi}"
        )));
    }
    let (alpha_lo, sigma_lo) = schedule.eval(t_lo)?;
    let alpha_hi = schedule.alpha(t_hi)?;
    if alpha_lo <= 0.0 {
        return Err(Error::DegenerateStep(format!("alpha({t_lo}) = 0")));
    }
    let ratio = (alpha_hi / alpha_lo).powi(2).min(1.0);
    Ok(eta_hat * sigma_lo * (1.0 - ratio).sqrt())
}

/// Per-transition noise levels along a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct EtaSchedule {
    eta_hat: f64,
    // etas[k] drives t_{k+1} -> t_k for k = 1..K-1; etas[0] is unused (final step is a Dirac).
    etas: Vec<f64>,
}

impl EtaSchedule {
    pub fn new(schedule: &NoiseSchedule, grid: &TimeGrid, eta_hat: f64) -> Result<Self> {
        let times = grid.times();
        let mut etas = vec![0.0; grid.steps()];
        for k in 1..grid.steps() {
            etas[k] = eta_for_step(schedule, times[k], times[k + 1], eta_hat)?;
        }
        Ok(Self { eta_hat, etas })
    }

    pub fn eta_hat(&self) -> f64 {
        self.eta_hat
    }

    /// Noise level of the transition landing on `t_k`.
    pub fn eta(&self, k: usize) -> f64 {
        self.etas[k]
    }
}
