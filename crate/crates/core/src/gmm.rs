//! Exact Gaussian-mixture machinery.
//!
//! Mixtures are closed under the operations the tilting pipeline needs: quadratic
//! reward tilts, forward noising and posterior conditioning. That makes every
//! density, score and tilt covariance along the iterative path available in
//! closed form (or by low-dimensional quadrature), which is what the learned
//! pipeline is checked against.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::schedules::NoiseSchedule;
use crate::tilting::RewardFn;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const WEIGHT_SUM_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= SYMMETRY_TOL * scale
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

#[derive(Debug, Clone)]
struct Component {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl Component {
    fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>, index: usize) -> Result<Self> {
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Domain(format!("covariance of component {index} is not positive definite")))?;
        let precision = symmetrize(chol.inverse());
        let log_det = chol.ln_determinant();
        Ok(Self {
            weight,
            mean,
            cov,
            chol,
            precision,
            log_det,
        })
    }

    fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let white = self.chol.l_dirty().solve_lower_triangular(&diff).unwrap_or(diff);
        -0.5 * (self.mean.len() as f64 * LN_2PI + self.log_det + white.norm_squared())
    }
}

/// Finite mixture of full-covariance Gaussians with weights on the simplex.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

/// Plain nested-array form used in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// One row-major matrix (list of rows) per component.
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;

    fn try_from(spec: MixtureSpec) -> Result<Self> {
        let means = spec.means.into_iter().map(DVector::from_vec).collect();
        let covs = spec
            .covariances
            .into_iter()
            .map(|rows| {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Config("covariance matrix is not square".into()));
                }
                Ok(DMatrix::from_row_iterator(n, n, rows.into_iter().flatten()))
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(spec.weights, means, covs)
    }
}

impl From<GaussianMixture> for MixtureSpec {
    fn from(gm: GaussianMixture) -> Self {
        MixtureSpec {
            weights: gm.weights(),
            means: gm.components.iter().map(|c| c.mean.iter().copied().collect()).collect(),
            covariances: gm
                .components
                .iter()
                .map(|c| c.cov.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
        }
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        if weights.len() != means.len() || weights.len() != covariances.len() {
            return Err(Error::Shape(format!(
                "{} weights, {} means, {} covariances",
                weights.len(),
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Domain(format!("weights must be nonnegative, got {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Domain(format!("weights sum to {total}, not 1")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::Domain("zero-dimensional mixture".into()));
        }
        let mut components = Vec::with_capacity(weights.len());
        for (i, ((w, m), c)) in weights.into_iter().zip(means).zip(covariances).enumerate() {
            if m.len() != dim || c.nrows() != dim || c.ncols() != dim {
                return Err(Error::Shape(format!("component {i} does not have dimension {dim}")));
            }
            if !is_symmetric(&c) {
                return Err(Error::Domain(format!("covariance of component {i} is not symmetric")));
            }
            components.push(Component::new(w, m, c, i)?);
        }
        Ok(Self { dim, components })
    }

    /// Mixture whose components all have covariance `variance * I`.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        let dim = means.first().map_or(0, Vec::len);
        let covs = vec![DMatrix::identity(dim, dim) * variance; means.len()];
        Self::new(weights, means.into_iter().map(DVector::from_vec).collect(), covs)
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::isotropic(vec![1.0], vec![vec![0.0; dim]], 1.0).expect("valid standard normal")
    }

    /// Builds from unnormalized log-weights, renormalizing on the way.
    fn from_log_weights(log_weights: &[f64], means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let lse = log_sum_exp(log_weights);
        let mut weights: Vec<f64> = log_weights.iter().map(|lw| (lw - lse).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(weights, means, covs)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<&DVector<f64>> {
        self.components.iter().map(|c| &c.mean).collect()
    }

    pub fn covariances(&self) -> Vec<&DMatrix<f64>> {
        self.components.iter().map(|c| &c.cov).collect()
    }

    /// Mixture mean `sum_i w_i mu_i`.
    pub fn mean(&self) -> DVector<f64> {
        self.components
            .iter()
            .fold(DVector::zeros(self.dim), |acc, c| acc + &c.mean * c.weight)
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len == self.dim {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "point of dimension {len}, mixture of dimension {}",
                self.dim
            )))
        }
    }

    /// I.i.d. draws together with the index of the component each came from.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
        let picker = WeightedIndex::new(self.components.iter().map(|c| c.weight)).expect("weights on the simplex");
        let mut out = Array2::zeros((n, self.dim));
        let mut labels = Vec::with_capacity(n);
        let mut z = DVector::zeros(self.dim);
        for mut row in out.rows_mut() {
            let i = picker.sample(rng);
            let comp = &self.components[i];
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let x = &comp.mean + comp.chol.l_dirty().lower_triangle() * &z;
            row.iter_mut().zip(x.iter()).for_each(|(r, v)| *r = *v);
            labels.push(i);
        }
        (out, labels)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        self.sample_labeled(n, rng).0
    }

    fn component_log_terms(&self, x: &DVector<f64>) -> Vec<f64> {
        self.components.iter().map(|c| c.weight.ln() + c.log_pdf(x)).collect()
    }

    /// `log sum_i w_i N(x; mu_i, Sigma_i)` in nats.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(log_sum_exp(&self.component_log_terms(&DVector::from_column_slice(x))))
    }

    pub fn log_density_batch(&self, xs: ArrayView2<f64>) -> Result<Vec<f64>> {
        xs.rows().into_iter().map(|r| self.log_density(&r.to_vec())).collect()
    }

    /// `grad_x log p(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let x = DVector::from_column_slice(x);
        let logs = self.component_log_terms(&x);
        let lse = log_sum_exp(&logs);
        let mut out = DVector::zeros(self.dim);
        for (c, l) in self.components.iter().zip(&logs) {
            let resp = (l - lse).exp();
            if resp > 0.0 {
                out -= &c.precision * (&x - &c.mean) * resp;
            }
        }
        Ok(out.iter().copied().collect())
    }

    /// Tilt by `exp(scale * r)` for a quadratic reward, plus the log normalizing constant
    /// `log E_p[exp(scale * r(X))]`.
    pub fn tilt_with_log_normalizer(&self, reward: &QuadraticReward, scale: f64) -> Result<(Self, f64)> {
        if reward.dim() != self.dim {
            return Err(Error::Shape(format!(
                "reward of dimension {}, mixture of dimension {}",
                reward.dim(),
                self.dim
            )));
        }
        let a = &reward.a * scale;
        let b = &reward.b * scale;
        let c = reward.c * scale;
        let mut log_w = Vec::with_capacity(self.len());
        let mut means = Vec::with_capacity(self.len());
        let mut covs = Vec::with_capacity(self.len());
        for (i, comp) in self.components.iter().enumerate() {
            let tilted_precision = symmetrize(&comp.precision - &a);
            let chol = Cholesky::new(tilted_precision).ok_or(Error::NotNormalizable { component: i })?;
            let cov = symmetrize(chol.inverse());
            let eta = &comp.precision * &comp.mean + &b;
            let mean = chol.solve(&eta);
            // |Sigma'| = 1/|P'|
            let log_det_ratio = -chol.ln_determinant() - comp.log_det;
            let quad_new = eta.dot(&mean);
            let quad_old = comp.mean.dot(&(&comp.precision * &comp.mean));
            log_w.push(comp.weight.ln() + 0.5 * log_det_ratio + 0.5 * (quad_new - quad_old) + c);
            means.push(mean);
            covs.push(cov);
        }
        let log_z = log_sum_exp(&log_w);
        Ok((Self::from_log_weights(&log_w, means, covs)?, log_z))
    }

    /// Mixture proportional to `exp(scale * r(x)) p(x)`.
    pub fn tilt_quadratic(&self, reward: &QuadraticReward, scale: f64) -> Result<Self> {
        self.tilt_with_log_normalizer(reward, scale).map(|(gm, _)| gm)
    }

    /// `log integral exp(scale * r(x)) p(x) dx`.
    pub fn log_normalizing_constant(&self, reward: &QuadraticReward, scale: f64) -> Result<f64> {
        self.tilt_with_log_normalizer(reward, scale).map(|(_, z)| z)
    }

    /// Law of `alpha_t X_0 + sigma_t X_1` for `X_0` drawn from this mixture.
    pub fn noised(&self, schedule: &NoiseSchedule, t: f64) -> Result<Self> {
        let (alpha, sigma) = schedule.eval(t)?;
        let eye = DMatrix::<f64>::identity(self.dim, self.dim);
        let means = self.components.iter().map(|c| &c.mean * alpha).collect();
        let covs = self
            .components
            .iter()
            .map(|c| &c.cov * (alpha * alpha) + &eye * (sigma * sigma))
            .collect();
        Self::new(self.weights(), means, covs)
    }

    /// `grad log p_t(x)` of the noised mixture.
    pub fn exact_score(&self, schedule: &NoiseSchedule, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.noised(schedule, t)?.score(x)
    }

    /// Posterior law of `X_0` given `X_t = xt`; again a Gaussian mixture.
    pub fn posterior(&self, schedule: &NoiseSchedule, t: f64, xt: &[f64]) -> Result<Self> {
        self.check_dim(xt.len())?;
        let (alpha, sigma) = schedule.eval(t)?;
        if sigma <= 0.0 {
            return Err(Error::DegenerateKernel { t });
        }
        let xt = DVector::from_column_slice(xt);
        let gain = alpha * alpha / (sigma * sigma);
        let eye = DMatrix::<f64>::identity(self.dim, self.dim);
        let noised = self.noised(schedule, t)?;
        let log_w = noised.component_log_terms(&xt);
        let mut means = Vec::with_capacity(self.len());
        let mut covs = Vec::with_capacity(self.len());
        for comp in &self.components {
            let precision = symmetrize(&comp.precision + &eye * gain);
            let chol = Cholesky::new(precision).ok_or_else(|| Error::Numerical("posterior precision".into()))?;
            let rhs = &comp.precision * &comp.mean + &xt * (alpha / (sigma * sigma));
            means.push(chol.solve(&rhs));
            covs.push(symmetrize(chol.inverse()));
        }
        Self::from_log_weights(&log_w, means, covs)
    }
}

/// Quadratic reward `r(x) = x^T A x / 2 + b^T x + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RewardSpec", into = "RewardSpec")]
pub struct QuadraticReward {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(default)]
    pub c: f64,
}

impl TryFrom<RewardSpec> for QuadraticReward {
    type Error = Error;

    fn try_from(spec: RewardSpec) -> Result<Self> {
        let n = spec.b.len();
        if spec.a.len() != n || spec.a.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("reward matrix A must be {n}x{n}")));
        }
        let a = DMatrix::from_row_iterator(n, n, spec.a.into_iter().flatten());
        QuadraticReward::new(a, DVector::from_vec(spec.b), spec.c)
    }
}

impl From<QuadraticReward> for RewardSpec {
    fn from(r: QuadraticReward) -> Self {
        RewardSpec {
            a: r.a.row_iter().map(|row| row.iter().copied().collect()).collect(),
            b: r.b.iter().copied().collect(),
            c: r.c,
        }
    }
}

impl QuadraticReward {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: f64) -> Result<Self> {
        if a.nrows() != b.len() || a.ncols() != b.len() {
            return Err(Error::Shape(format!(
                "A is {}x{}, b has length {}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        if !is_symmetric(&a) {
            return Err(Error::Domain("reward matrix A is not symmetric".into()));
        }
        Ok(Self { a, b, c })
    }

    pub fn linear(b: Vec<f64>) -> Self {
        let n = b.len();
        Self::new(DMatrix::zeros(n, n), DVector::from_vec(b), 0.0).expect("valid linear reward")
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::new(DMatrix::zeros(dim, dim), DVector::zeros(dim), c).expect("valid constant reward")
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        0.5 * x.dot(&(&self.a * &x)) + self.b.dot(&x) + self.c
    }
}

impl RewardFn for QuadraticReward {
    fn eval(&self, x: &[f64]) -> f64 {
        self.value(x)
    }

    fn as_quadratic(&self) -> Option<&QuadraticReward> {
        Some(self)
    }
}

/// Score of the forward kernel `q_{t|0}(xt | x0)`: `(alpha_t x0 - xt) / sigma_t^2`.
pub fn forward_kernel_score(x0: &[f64], xt: &[f64], schedule: &NoiseSchedule, t: f64) -> Result<Vec<f64>> {
    if x0.len() != xt.len() {
        return Err(Error::Shape(format!(
            "x0 has length {}, xt has length {}",
            x0.len(),
            xt.len()
        )));
    }
    let (alpha, sigma) = schedule.eval(t)?;
    if sigma <= 0.0 {
        return Err(Error::DegenerateKernel { t });
    }
    let inv_var = 1.0 / (sigma * sigma);
    Ok(x0.iter().zip(xt).map(|(a, b)| (alpha * a - b) * inv_var).collect())
}

const ORACLE_MAX_DIM: usize = 3;
const ORACLE_BOX: f64 = 8.0;
const ORACLE_REL_TOL: f64 = 1e-6;

fn simpson_weights(intervals: usize) -> (Vec<f64>, Vec<f64>) {
    let h = 2.0 * ORACLE_BOX / intervals as f64;
    let norm = (2.0 * std::f64::consts::PI).sqrt();
    (0..=intervals)
        .map(|j| {
            let u = -ORACLE_BOX + j as f64 * h;
            let simpson = if j == 0 || j == intervals {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            (u, simpson * h / 3.0 * (-0.5 * u * u).exp() / norm)
        })
        .unzip()
}

struct PosteriorMoments {
    reward: f64,
    kernel_score: DVector<f64>,
    product: DVector<f64>,
}

impl PosteriorMoments {
    fn covariance(&self) -> DVector<f64> {
        &self.product - &self.kernel_score * self.reward
    }
}

fn posterior_moments<R: RewardFn + ?Sized>(
    posterior: &GaussianMixture,
    reward: &R,
    alpha: f64,
    sigma: f64,
    xt: &DVector<f64>,
    intervals: usize,
) -> Result<PosteriorMoments> {
    let d = posterior.dim();
    let (nodes, weights) = simpson_weights(intervals);
    let per_dim = nodes.len();
    let total = per_dim.pow(d as u32);
    let inv_var = 1.0 / (sigma * sigma);
    let mut moments = PosteriorMoments {
        reward: 0.0,
        kernel_score: DVector::zeros(d),
        product: DVector::zeros(d),
    };
    let mut u = DVector::zeros(d);
    let mut x0 = vec![0.0; d];
    for comp in &posterior.components {
        let lower = comp.chol.l_dirty().lower_triangle();
        for flat in 0..total {
            let mut rem = flat;
            let mut w = comp.weight;
            for k in 0..d {
                let j = rem % per_dim;
                rem /= per_dim;
                u[k] = nodes[j];
                w *= weights[j];
            }
            let point = &comp.mean + &lower * &u;
            x0.copy_from_slice(point.as_slice());
            let r = reward.eval(&x0);
            if !r.is_finite() {
                return Err(Error::RewardFault {
                    x: x0.clone(),
                    value: r,
                });
            }
            let g = (point * alpha - xt) * inv_var;
            moments.reward += w * r;
            moments.kernel_score.axpy(w, &g, 1.0);
            moments.product.axpy(w * r, &g, 1.0);
        }
    }
    Ok(moments)
}

/// `Cov_{X_0 ~ p_{0|t}(.|xt)}(grad_xt log q_{t|0}(xt | X_0), r(X_0))` by tensor-grid Simpson
/// quadrature over a +-8 standard-deviation box around each posterior component, refined
/// until successive estimates agree to a relative 1e-6.
///
/// Only meant as a reference value in low dimension (`d <= 3`).
pub fn posterior_tilt_covariance_oracle<R: RewardFn + ?Sized>(
    gm: &GaussianMixture,
    reward: &R,
    schedule: &NoiseSchedule,
    t: f64,
    xt: &[f64],
) -> Result<Vec<f64>> {
    let d = gm.dim();
    if d > ORACLE_MAX_DIM {
        return Err(Error::Domain(format!(
            "quadrature oracle supports d <= {ORACLE_MAX_DIM}, got {d}"
        )));
    }
    let posterior = gm.posterior(schedule, t, xt)?;
    let (alpha, sigma) = schedule.eval(t)?;
    let xt_vec = DVector::from_column_slice(xt);
    let max_intervals = match d {
        1 => 1 << 14,
        2 => 512,
        _ => 64,
    };
    let mut intervals = 16;
    let mut previous: Option<DVector<f64>> = None;
    loop {
        let moments = posterior_moments(&posterior, reward, alpha, sigma, &xt_vec, intervals)?;
        let cov = moments.covariance();
        if let Some(prev) = &previous {
            // The floor covers covariances that cancel to ~0 (e.g. constant rewards).
            let floor = 1e-12 * (1.0 + moments.product.norm() + moments.kernel_score.norm() * moments.reward.abs());
            if (&cov - prev).norm() <= ORACLE_REL_TOL * cov.norm() + floor {
                return Ok(cov.iter().copied().collect());
            }
        }
        if intervals >= max_intervals {
            let change = previous.map(|p| (&cov - p).norm()).unwrap_or(f64::INFINITY);
            return Err(Error::Quadrature(format!(
                "change {change:e} after {intervals} intervals per dimension"
            )));
        }
        previous = Some(cov);
        intervals *= 2;
    }
}

/// Exact noised-mixture score wrapped as a noise predictor, `eps = -sigma_t * score`.
#[derive(Debug, Clone)]
pub struct ExactDenoiser {
    mixture: GaussianMixture,
    schedule: NoiseSchedule,
}

impl ExactDenoiser {
    pub fn new(mixture: GaussianMixture, schedule: NoiseSchedule) -> Self {
        Self { mixture, schedule }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }
}

impl Denoiser for ExactDenoiser {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_eps_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        if xs.nrows() != ts.len() || xs.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "batch {:?} with {} times for dimension {}",
                xs.shape(),
                ts.len(),
                self.dim()
            )));
        }
        let mut out = Array2::zeros(xs.raw_dim());
        let mut cached: Option<(f64, GaussianMixture, f64)> = None;
        for (i, row) in xs.rows().into_iter().enumerate() {
            let t = ts[i];
            if cached.as_ref().is_none_or(|(ct, _, _)| *ct != t) {
                let sigma = self.schedule.sigma(t)?;
                cached = Some((t, self.mixture.noised(&self.schedule, t)?, sigma));
            }
            let (_, noised, sigma) = cached.as_ref().expect("cached above");
            if *sigma == 0.0 {
                continue;
            }
            let score = noised.score(&row.to_vec())?;
            out.row_mut(i)
                .assign(&Array1::from_iter(score.into_iter().map(|s| -sigma * s)));
        }
        Ok(out)
    }
}
