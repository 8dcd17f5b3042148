//! Feed-forward tanh networks: counting, inference, training by Adam on
//! mean squared error, and the resulting approximate feedback law.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::plant::{ControlAction, Controller, KiteState};

pub const FORMAT_VERSION: u32 = 1;

/// `L` tanh hidden layers of width `H` and an affine output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub n_in: usize,
    pub n_out: usize,
    pub layers: usize,
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            n_in: 3,
            n_out: 1,
            layers: 6,
            hidden: 30,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_out == 0 || self.layers == 0 || self.hidden == 0 {
            return Err(param(format!("all architecture sizes must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(rows, cols)` of each weight matrix, input layer first.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut v = vec![(self.hidden, self.n_in)];
        v.extend((1..self.layers).map(|_| (self.hidden, self.hidden)));
        v.push((self.n_out, self.hidden));
        v
    }

    /// Scalars actually stored (weights and biases).
    pub fn parameter_count(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

/// Weight count by the closed-form expression
/// `n_x (H + 1) + (L - 1)(H + 1) H + H (n_u + 1)`.
///
/// The expression attaches one bias per input instead of per first-layer
/// neuron and none to the output, so it exceeds
/// [`Architecture::parameter_count`] by `n_x - n_u`.
pub fn count_weights(n_x: usize, n_u: usize, layers: usize, hidden: usize) -> usize {
    n_x * (hidden + 1) + (layers - 1) * (hidden + 1) * hidden + hidden * (n_u + 1)
}

pub fn count_neurons(layers: usize, hidden: usize) -> usize {
    layers * hidden
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub arch: Architecture,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.shapes();
        Ok(Self {
            arch,
            weights: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
            biases: shapes.iter().map(|&(r, _)| DVector::zeros(r)).collect(),
        })
    }

    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut p.weights {
            let limit = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            w.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let shapes = self.arch.shapes();
        if self.weights.len() != shapes.len() || self.biases.len() != shapes.len() {
            return Err(param("layer count does not match the architecture"));
        }
        for (l, &(r, c)) in shapes.iter().enumerate() {
            if self.weights[l].shape() != (r, c) || self.biases[l].len() != r {
                return Err(param(format!("layer {l} has the wrong shape")));
            }
        }
        let finite = self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(param("network parameters must be finite"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.arch.n_in {
            return Err(param(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.arch.n_in
            )));
        }
        let mut a = DVector::from_column_slice(x);
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            a = w * a + b;
            if l < last {
                a.apply(|v| *v = v.tanh());
            }
        }
        Ok(a.as_slice().to_vec())
    }

    /// Forward pass over the columns of `x`, keeping every activation.
    fn forward_batch(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.clone());
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * acts.last().expect("nonempty");
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Mean squared error over the columns of `(x, y)` (averaged over
    /// samples and outputs) and its gradient.
    pub fn loss_and_grad(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, MlpParams) {
        let acts = self.forward_batch(x);
        let out = acts.last().expect("nonempty");
        let scale = 1.0 / (y.ncols() * y.nrows()) as f64;
        let diff = out - y;
        let loss = diff.norm_squared() * scale;
        let mut delta = diff * (2.0 * scale);
        let n = self.weights.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        for l in (0..n).rev() {
            gw.push(&delta * acts[l].transpose());
            gb.push(delta.column_sum());
            if l > 0 {
                let mut back = self.weights[l].transpose() * &delta;
                back.zip_apply(&acts[l], |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        gw.reverse();
        gb.reverse();
        (
            loss,
            MlpParams {
                arch: self.arch,
                weights: gw,
                biases: gb,
            },
        )
    }

    /// Product of the layers' spectral norms, a Lipschitz bound of
    /// `forward` since `tanh` is 1-Lipschitz.
    pub fn lipschitz_bound(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.clone().svd(false, false).singular_values.max())
            .product()
    }

    fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .flat_map(|w| w.iter_mut())
            .chain(self.biases.iter_mut().flat_map(|b| b.iter_mut()))
    }

    fn flat(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
    }
}

/// Affine maps to and from zero-mean, unit-variance coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

fn column_stats(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..dim)
        .map(|j| {
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            // constant columns are left unscaled
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Standardizer {
    pub fn fit(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Self {
        let (in_mean, in_std) = column_stats(inputs, inputs[0].len());
        let (out_mean, out_std) = column_stats(targets, targets[0].len());
        Self {
            in_mean,
            in_std,
            out_mean,
            out_std,
        }
    }

    pub fn identity(n_in: usize, n_out: usize) -> Self {
        Self {
            in_mean: vec![0.0; n_in],
            in_std: vec![1.0; n_in],
            out_mean: vec![0.0; n_out],
            out_std: vec![1.0; n_out],
        }
    }

    pub fn input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.in_mean.iter().zip(&self.in_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn target(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.out_mean.iter().zip(&self.out_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn output(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.out_mean.iter().zip(&self.out_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Share of the data held out for checkpoint selection; 0 selects on
    /// the training loss.
    pub validation_fraction: f64,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 300,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            validation_fraction: 0.2,
            standardize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(param("learning rate, batch size and epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(param("validation fraction must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(param("invalid Adam constants"));
        }
        Ok(())
    }
}

/// Per-epoch mean squared errors in the original output units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    /// Lowest selection loss seen up to this epoch.
    pub best_so_far: f64,
}

/// A trained network with its input/output scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub version: u32,
    pub params: MlpParams,
    pub scaling: Standardizer,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub curve: Vec<EpochStats>,
    /// Free-form provenance (dataset, backoff, ...).
    #[serde(default)]
    pub note: String,
}

impl Model {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.params.forward(&self.scaling.input(x))?;
        Ok(self.scaling.output(&z))
    }

    /// Mean squared error in original units over a labelled set.
    pub fn mse(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(param("evaluation set must be nonempty with one target per input"));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (x, y) in inputs.iter().zip(targets) {
            let p = self.predict(x)?;
            total += p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += y.len();
        }
        Ok(total / count as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Format {
                path: path.display().to_string(),
                msg: format!("unsupported model version {}", m.version),
            });
        }
        m.params.validate().map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Ok(m)
    }
}

fn to_matrix(rows: &[&Vec<f64>]) -> DMatrix<f64> {
    let dim = rows[0].len();
    DMatrix::from_fn(dim, rows.len(), |i, j| rows[j][i])
}

/// Mini-batch Adam on the mean squared error; returns the parameters of
/// the epoch with the lowest validation (or training) error.
pub fn train(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    arch: Architecture,
    cfg: &TrainConfig,
) -> Result<Model> {
    cfg.validate()?;
    arch.validate()?;
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(param("training set must be nonempty with one target per input"));
    }
    if inputs.iter().any(|x| x.len() != arch.n_in) || targets.iter().any(|y| y.len() != arch.n_out) {
        return Err(param("training data width does not match the architecture"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (inputs.len() as f64 * cfg.validation_fraction).floor() as usize;
    let n_val = if n_val >= inputs.len() { 0 } else { n_val };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let train_x: Vec<Vec<f64>> = train_idx.iter().map(|&i| inputs[i].clone()).collect();
    let train_y: Vec<Vec<f64>> = train_idx.iter().map(|&i| targets[i].clone()).collect();
    let scaling = if cfg.standardize {
        Standardizer::fit(&train_x, &train_y)
    } else {
        Standardizer::identity(arch.n_in, arch.n_out)
    };
    let sx: Vec<Vec<f64>> = inputs.iter().map(|x| scaling.input(x)).collect();
    let sy: Vec<Vec<f64>> = targets.iter().map(|y| scaling.target(y)).collect();
    let val_x: Vec<Vec<f64>> = val_idx.iter().map(|&i| inputs[i].clone()).collect();
    let val_y: Vec<Vec<f64>> = val_idx.iter().map(|&i| targets[i].clone()).collect();

    let mut model = Model {
        version: FORMAT_VERSION,
        params: MlpParams::init(arch, cfg.seed)?,
        scaling,
        train: *cfg,
        best_epoch: 0,
        curve: Vec::with_capacity(cfg.epochs),
        note: String::new(),
    };
    let mut m1 = MlpParams::zeros(arch)?;
    let mut m2 = MlpParams::zeros(arch)?;
    let mut best = (f64::INFINITY, model.params.clone());
    let mut step = 0i32;
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        for chunk in train_idx.chunks(cfg.batch_size) {
            let bx: Vec<&Vec<f64>> = chunk.iter().map(|&i| &sx[i]).collect();
            let by: Vec<&Vec<f64>> = chunk.iter().map(|&i| &sy[i]).collect();
            let (loss, grad) = model.params.loss_and_grad(&to_matrix(&bx), &to_matrix(&by));
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "training loss became {loss} at epoch {epoch}, step {step} (lr {})",
                    cfg.learning_rate
                )));
            }
            step += 1;
            let c1 = 1.0 - cfg.beta1.powi(step);
            let c2 = 1.0 - cfg.beta2.powi(step);
            for (((p, g), a), b) in model
                .params
                .flat_mut()
                .zip(grad.flat())
                .zip(m1.flat_mut())
                .zip(m2.flat_mut())
            {
                *a = cfg.beta1 * *a + (1.0 - cfg.beta1) * g;
                *b = cfg.beta2 * *b + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.learning_rate * (*a / c1) / ((*b / c2).sqrt() + cfg.adam_eps);
            }
        }
        let train_mse = model.mse(&train_x, &train_y)?;
        if !train_mse.is_finite() {
            return Err(Error::Divergence(format!("training error became {train_mse} at epoch {epoch}")));
        }
        let val_mse = if val_x.is_empty() {
            None
        } else {
            Some(model.mse(&val_x, &val_y)?)
        };
        let select = val_mse.unwrap_or(train_mse);
        if select < best.0 {
            best = (select, model.params.clone());
            model.best_epoch = epoch;
        }
        model.curve.push(EpochStats {
            epoch,
            train_mse,
            val_mse,
            best_so_far: best.0,
        });
    }
    model.params = best.1;
    Ok(model)
}

/// Network input: the estimated angles, followed by `u_prev` for 4-input
/// networks.
fn features(x_hat: &KiteState, u_prev: f64) -> [f64; 4] {
    [x_hat.theta, x_hat.phi, x_hat.psi, u_prev]
}

/// Network feedback law on `(θ̂, φ̂, ψ̂)` or `(θ̂, φ̂, ψ̂, u_prev)`, clipped to
/// the input bounds.
#[derive(Debug, Clone)]
pub struct KappaDnn {
    pub model: Model,
    pub u_max: f64,
    pub label: String,
}

impl KappaDnn {
    pub fn new(model: Model, u_max: f64, label: impl Into<String>) -> Result<Self> {
        let a = model.params.arch;
        if !(a.n_in == 3 || a.n_in == 4) || a.n_out != 1 {
            return Err(param("the feedback law needs a 3- or 4-input, 1-output network"));
        }
        Ok(Self {
            model,
            u_max,
            label: label.into(),
        })
    }

    pub fn evaluate(&self, x_hat: &KiteState, u_prev: f64) -> f64 {
        let v = features(x_hat, u_prev);
        let z = self.model.predict(&v[..self.model.params.arch.n_in]).expect("shape checked at construction");
        // a non-finite output is passed through so the simulator reports it
        if z[0].is_nan() {
            return z[0];
        }
        z[0].clamp(-self.u_max, self.u_max)
    }
}

impl Controller for KappaDnn {
    fn id(&self) -> String {
        self.label.clone()
    }

    fn control(&mut self, x_hat: &KiteState, u_prev: f64) -> ControlAction {
        ControlAction {
            u: self.evaluate(x_hat, u_prev),
            ok: true,
        }
    }
}

/// `κ_dnn(x̂, u_prev)` for a trained model; `u_prev` is ignored by 3-input
/// networks.
pub fn kappa_dnn(model: &Model, x_hat: &KiteState, u_prev: f64, u_max: f64) -> Result<f64> {
    let v = features(x_hat, u_prev);
    let z = model.predict(&v[..model.params.arch.n_in.min(4)])?;
    Ok(z[0].clamp(-u_max, u_max))
}
