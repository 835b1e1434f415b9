//! Run configuration, read from a single TOML document and validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::gmm::{GaussianMixture, QuadraticReward};
use crate::metrics::{RmseSampling, DEFAULT_EVAL_POINTS};
use crate::model::{AdamConfig, ModelConfig};
use crate::schedules::{NoiseSchedule, ScheduleKind, TimeGrid, DEFAULT_T_MIN};
use crate::tilting::TiltRunConfig;

/// Overrides `out_dir` when set.
pub const OUT_DIR_ENV: &str = "ITILT_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub reverse_steps: usize,
    pub eta_hat: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::CosineVp,
            t_min: DEFAULT_T_MIN,
            reverse_steps: 200,
            eta_hat: 1.0,
        }
    }
}

impl ScheduleSection {
    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(self.kind)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.reverse_steps, self.t_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TiltSection {
    pub lambda: f64,
    pub samples_per_tilt: usize,
    pub batch_size: usize,
    pub epochs_per_tilt: usize,
    pub optimizer: AdamConfig,
}

impl Default for TiltSection {
    fn default() -> Self {
        let d = TiltRunConfig::default();
        Self {
            lambda: d.lambda,
            samples_per_tilt: d.samples_per_tilt,
            batch_size: d.batch_size,
            epochs_per_tilt: d.epochs_per_tilt,
            optimizer: d.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub n_tilts: Vec<usize>,
    pub eval_points: usize,
    pub rmse_sampling: RmseSampling,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            n_tilts: vec![20, 50, 100, 200],
            eval_points: DEFAULT_EVAL_POINTS,
            rmse_sampling: RmseSampling::Exact,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schedule: ScheduleSection,
    pub base: GaussianMixture,
    pub reward: QuadraticReward,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tilt: TiltSection,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            schedule: ScheduleSection::default(),
            base: GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-2.0, 0.0], vec![2.0, 0.0]], 0.5)
                .expect("valid base"),
            reward: QuadraticReward::linear(vec![0.0, 4.0]),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tilt: TiltSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(describe_toml_error(&e, text)))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`, or the defaults when `None`; applies the output-directory override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            config.out_dir = PathBuf::from(dir);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.base.dim();
        if self.reward.dim() != d || self.model.data_dim != d {
            return Err(Error::Config(format!(
                "dimension mismatch: base {d}, reward {}, model {}",
                self.reward.dim(),
                self.model.data_dim
            )));
        }
        self.model.validate()?;
        self.schedule.grid()?;
        let train = self.train_config();
        train.validate()?;
        if train.dataset_size <= train.batch_size {
            return Err(Error::Config("train.dataset_size must exceed train.batch_size".into()));
        }
        if self.experiment.n_tilts.is_empty() {
            return Err(Error::Config("experiment.n_tilts is empty".into()));
        }
        if self.experiment.eval_points == 0 {
            return Err(Error::Config("experiment.eval_points must be >= 1".into()));
        }
        for &n in &self.experiment.n_tilts {
            self.tilt_config(n).validate()?;
        }
        // Intermediate tilts are convex combinations of the base and the full tilt, so
        // normalizability at lambda covers the whole path.
        self.base
            .tilt_quadratic(&self.reward, self.tilt.lambda)
            .map_err(|e| Error::Config(format!("reward tilt is not normalizable: {e}")))?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            t_min: self.schedule.t_min,
            ..self.train.clone()
        }
    }

    pub fn tilt_config(&self, n_tilts: usize) -> TiltRunConfig {
        TiltRunConfig {
            lambda: self.tilt.lambda,
            n_tilts,
            samples_per_tilt: self.tilt.samples_per_tilt,
            reverse_steps: self.schedule.reverse_steps,
            batch_size: self.tilt.batch_size,
            epochs_per_tilt: self.tilt.epochs_per_tilt,
            eta_hat: self.schedule.eta_hat,
            t_min: self.schedule.t_min,
            seed: self.seed,
            optimizer: self.tilt.optimizer,
        }
    }

    /// Exact target of the full tilt.
    pub fn target(&self) -> Result<GaussianMixture> {
        self.base.tilt_quadratic(&self.reward, self.tilt.lambda)
    }
}

/// `line L, column C: message` on one line.
fn describe_toml_error(e: &toml::de::Error, text: &str) -> String {
    let message = e.message().trim();
    match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("line {line}, column {column}: {message}")
        }
        None => message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let text = config.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.to_toml().unwrap(), text);
        assert_eq!(back.tilt_config(20), config.tilt_config(20));
        assert_eq!(config.tilt_config(20).delta(), 0.05);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let config = RunConfig::from_toml("seed = 9\n[experiment]\nn_tilts = [3]\n").unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.experiment.n_tilts, vec![3]);
        assert_eq!(config.train_config().seed, 9);
        assert_eq!(config.schedule.reverse_steps, 200);
    }

    #[test]
    fn target_of_default_reward() {
        let target = RunConfig::default().target().unwrap();
        let means: Vec<Vec<f64>> = target.means().iter().map(|m| m.iter().copied().collect()).collect();
        assert_eq!(means.len(), 2);
        for (m, e) in means.iter().zip([[-2.0, 2.0], [2.0, 2.0]]) {
            assert!((m[0] - e[0]).abs() < 1e-12 && (m[1] - e[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_documents_are_rejected() {
        let cases = [
            "[schedule]\nkind = \"sigmoid\"\n",
            "[schedule]\nt_min = 0.5\n",
            "[schedule]\neta_hat = 2.0\n",
            "[tilt]\nlambda = -1.0\n",
            "[tilt]\nbatch_size = 0\n",
            "[experiment]\nn_tilts = []\n",
            "[experiment]\nn_tilts = [0]\n",
            "[reward]\na = [[0.0]]\nb = [1.0]\n",
            "[reward]\na = [[4.0, 0.0], [0.0, 0.0]]\nb = [0.0, 0.0]\n",
            "[base]\nweights = [0.5, 0.6]\nmeans = [[0.0, 0.0], [1.0, 1.0]]\ncovariances = [[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]]\n",
            "[model]\nhidden_width = 0\n",
            "[train]\npatience = 500\n",
            "unknown_key = 1\n",
        ];
        for text in cases {
            assert!(
                matches!(RunConfig::from_toml(text), Err(Error::Config(_) | Error::Domain(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn output_directory_override() {
        // Only this test touches the variable.
        std::env::set_var(OUT_DIR_ENV, "/tmp/itilt-override");
        let config = RunConfig::load(None).unwrap();
        std::env::remove_var(OUT_DIR_ENV);
        assert_eq!(config.out_dir, PathBuf::from("/tmp/itilt-override"));
    }
}
