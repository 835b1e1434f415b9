use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate step: {0}")]
    DegenerateStep(String),

    #[error("degenerate forward kernel at t={t} (sigma_t = 0)")]
    DegenerateKernel { t: f64 },

    #[error("degenerate time t={t}: sigma_t={sigma} is below the score threshold")]
    DegenerateTime { t: f64, sigma: f64 },

    #[error("schedule violation: eta={eta} exceeds sigma={sigma}")]
    ScheduleViolation { eta: f64, sigma: f64 },

    #[error("tilt not normalizable: component {component} has a non positive-definite tilted precision")]
    NotNormalizable { component: usize },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("reward returned non-finite value {value} at x={x:?}")]
    RewardFault { x: Vec<f64>, value: f64 },

    #[error("training diverged at epoch {epoch}")]
    TrainingFault { epoch: usize },

    #[error("tilt {tilt}: {source}")]
    Tilt {
        tilt: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("phase {phase}: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn in_tilt(self, tilt: usize) -> Self {
        Error::Tilt {
            tilt,
            source: Box::new(self),
        }
    }

    pub fn in_phase(self, phase: impl Into<String>) -> Self {
        Error::Phase {
            phase: phase.into(),
            source: Box::new(self),
        }
    }
}
