//! Score network: an MLP over `[x || fourier(t)]` predicting the noise `eps = x̂_1`.
//!
//! The network is a fixed stack of dense layers with SiLU activations, so the
//! reverse pass is written out by hand rather than through a general autodiff
//! graph. Parameters live in one flat buffer; layer weights are row-major
//! `fan_in x fan_out` views into it, followed by the bias.

use std::ops::Deref;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedules::NoiseSchedule;

/// Below this `sigma_t` the score `-eps / sigma_t` is refused.
pub const MIN_SCORE_SIGMA: f64 = 1e-8;

/// Anything that predicts the noise component of a noised sample.
pub trait Denoiser {
    fn dim(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    /// Row `i` of the result is the prediction for `xs.row(i)` at time `ts[i]`.
    fn predict_eps_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>>;

    fn predict_eps(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.predict_eps_batch(xs, &[t])?.into_raw_vec_and_offset().0)
    }

    /// `-eps / sigma_t`, row by row.
    fn score_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        let mut eps = self.predict_eps_batch(xs, ts)?;
        for (mut row, &t) in eps.rows_mut().into_iter().zip(ts) {
            let sigma = self.schedule().sigma(t)?;
            if sigma < MIN_SCORE_SIGMA {
                return Err(Error::DegenerateTime { t, sigma });
            }
            row.mapv_inplace(|e| -e / sigma);
        }
        Ok(eps)
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.score_batch(xs, &[t])?.into_raw_vec_and_offset().0)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        (**self).schedule()
    }

    fn predict_eps_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        (**self).predict_eps_batch(xs, ts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Number of random frequencies; the embedding has twice as many entries.
    pub fourier_features: usize,
    /// Standard deviation of the frequency draws.
    pub fourier_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden_width: 256,
            hidden_layers: 5,
            fourier_features: 64,
            fourier_scale: 16.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 || self.fourier_features == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if !(self.fourier_scale.is_finite() && self.fourier_scale > 0.0) {
            return Err(Error::Config(format!(
                "fourier_scale must be positive, got {}",
                self.fourier_scale
            )));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.data_dim + 2 * self.fourier_features
    }

    fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut dims = vec![self.input_dim()];
        dims.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(self.data_dim);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += shape.len();
                shape
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(LayerShape::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl LayerShape {
    fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    fn weight<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let n = self.fan_in * self.fan_out;
        ArrayView2::from_shape((self.fan_in, self.fan_out), &params[self.offset..self.offset + n])
            .expect("layer layout")
    }

    fn bias<'a>(&self, params: &'a [f64]) -> ArrayView1<'a, f64> {
        let start = self.offset + self.fan_in * self.fan_out;
        ArrayView1::from(&params[start..start + self.fan_out])
    }

    fn split_mut<'a>(&self, params: &'a mut [f64]) -> (ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>) {
        let n = self.fan_in * self.fan_out;
        let (w, b) = params[self.offset..self.offset + self.len()].split_at_mut(n);
        (
            ArrayViewMut2::from_shape((self.fan_in, self.fan_out), w).expect("layer layout"),
            ArrayViewMut1::from(b),
        )
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Activations kept by the forward pass for the reverse pass.
struct Tape {
    /// Input of every layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every hidden layer.
    pre_activations: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    config: ModelConfig,
    schedule: NoiseSchedule,
    seed: u64,
    frequencies: Vec<f64>,
    params: Vec<f64>,
    layers: Vec<LayerShape>,
}

impl ScoreModel {
    /// Seeded initialization: uniform `±1/sqrt(fan_in)` weights and biases, zero output layer,
    /// Fourier frequencies drawn from `N(0, fourier_scale^2)`.
    pub fn new(config: ModelConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.fourier_scale).map_err(|e| Error::Config(e.to_string()))?;
        let frequencies = (0..config.fourier_features).map(|_| normal.sample(&mut rng)).collect();
        let layers = config.layer_shapes();
        let mut params = vec![0.0; config.num_params()];
        let last = layers.len() - 1;
        for shape in &layers[..last] {
            let bound = 1.0 / (shape.fan_in as f64).sqrt();
            params[shape.offset..shape.offset + shape.len()]
                .iter_mut()
                .for_each(|p| *p = rng.random_range(-bound..bound));
        }
        Ok(Self {
            config,
            schedule,
            seed,
            frequencies,
            params,
            layers,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        schedule: NoiseSchedule,
        seed: u64,
        frequencies: Vec<f64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if frequencies.len() != config.fourier_features {
            return Err(Error::Shape(format!(
                "{} frequencies for {} features",
                frequencies.len(),
                config.fourier_features
            )));
        }
        if params.len() != config.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters, architecture needs {}",
                params.len(),
                config.num_params()
            )));
        }
        if params.iter().chain(&frequencies).any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        let layers = config.layer_shapes();
        Ok(Self {
            config,
            schedule,
            seed,
            frequencies,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `[sin(2π f_j t)]_j ++ [cos(2π f_j t)]_j`.
    pub fn fourier_embed(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.frequencies.len()];
        self.embed_into(t, &mut out);
        out
    }

    fn embed_into(&self, t: f64, out: &mut [f64]) {
        let n = self.frequencies.len();
        for (j, f) in self.frequencies.iter().enumerate() {
            let (sin, cos) = (std::f64::consts::TAU * f * t).sin_cos();
            out[j] = sin;
            out[n + j] = cos;
        }
    }

    fn input_matrix(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        let d = self.config.data_dim;
        if xs.ncols() != d || xs.nrows() != ts.len() {
            return Err(Error::Shape(format!(
                "batch {:?} with {} times for data dimension {d}",
                xs.shape(),
                ts.len()
            )));
        }
        let mut input = Array2::zeros((xs.nrows(), self.config.input_dim()));
        input.slice_mut(s![.., ..d]).assign(&xs);
        let mut emb = vec![0.0; 2 * self.frequencies.len()];
        let mut last_t = f64::NAN;
        for (mut row, &t) in input.rows_mut().into_iter().zip(ts) {
            if t != last_t {
                self.embed_into(t, &mut emb);
                last_t = t;
            }
            row.slice_mut(s![d..]).assign(&ArrayView1::from(&emb[..]));
        }
        Ok(input)
    }

    fn forward(&self, xs: ArrayView2<f64>, ts: &[f64], record: bool) -> Result<(Array2<f64>, Option<Tape>)> {
        let mut act = self.input_matrix(xs, ts)?;
        let mut tape = record.then(|| Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len() - 1),
        });
        let last = self.layers.len() - 1;
        for (l, shape) in self.layers.iter().enumerate() {
            let mut z = act.dot(&shape.weight(&self.params));
            z += &shape.bias(&self.params);
            if l == last {
                if let Some(tape) = tape.as_mut() {
                    tape.inputs.push(act);
                }
                act = z;
            } else {
                let next = z.mapv(silu);
                if let Some(tape) = tape.as_mut() {
                    tape.inputs.push(act);
                    tape.pre_activations.push(z);
                }
                act = next;
            }
        }
        if act.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite network output".into()));
        }
        Ok((act, tape))
    }

    /// Reverse-mode gradient of a mini-batch loss.
    ///
    /// `loss` receives the network output (predicted noise, one row per example) and
    /// returns the scalar loss together with its gradient with respect to that output.
    pub fn gradient<F>(&self, xs: ArrayView2<f64>, ts: &[f64], loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(ArrayView2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        let (out, tape) = self.forward(xs, ts, true)?;
        let tape = tape.expect("recorded tape");
        let (value, mut delta) = loss(out.view())?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {value}")));
        }
        if delta.shape() != out.shape() {
            return Err(Error::Shape(format!(
                "loss gradient {:?} for output {:?}",
                delta.shape(),
                out.shape()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        for l in (0..self.layers.len()).rev() {
            let shape = self.layers[l];
            let (mut gw, mut gb) = shape.split_mut(&mut grads);
            general_mat_mul(1.0, &tape.inputs[l].t(), &delta, 0.0, &mut gw);
            gb.assign(&delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut back = delta.dot(&shape.weight(&self.params).t());
                back.zip_mut_with(&tape.pre_activations[l - 1], |g, &z| *g *= silu_grad(z));
                delta = back;
            }
        }
        Ok((value, grads))
    }

    /// Deep copy that can only be evaluated.
    pub fn clone_frozen(&self) -> FrozenScoreModel {
        FrozenScoreModel(self.clone())
    }
}

impl Denoiser for ScoreModel {
    fn dim(&self) -> usize {
        self.config.data_dim
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_eps_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        self.forward(xs, ts, false).map(|(out, _)| out)
    }
}

/// Read-only teacher copy of a [`ScoreModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenScoreModel(ScoreModel);

impl Deref for FrozenScoreModel {
    type Target = ScoreModel;

    fn deref(&self) -> &ScoreModel {
        &self.0
    }
}

impl Denoiser for FrozenScoreModel {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.0.schedule()
    }

    fn predict_eps_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        self.0.predict_eps_batch(xs, ts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        }
        Ok(())
    }
}
