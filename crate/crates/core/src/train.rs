//! Trainers for the dynamics model, the denoising policy and the baselines.
//!
//! Everything is fitted in normalized coordinates with minibatch Adam on the
//! per-sample squared error, averaged over the batch. Random streams are
//! derived from `cfg.seed`: network init (`init/<role>`), minibatch order
//! (`train/shuffle`) and training noise (`train/noise`).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{add_gaussian_noise, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::models::{BaselinePolicy, BaselineVariant, DenoisingPolicy, DynamicsModel};
use crate::net::{init_net, Activation, NetParams};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::seed::{derive_seed, rng_for, DecilRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Standard deviation of the denoising noise, normalized units.
    pub sigma: f64,
    /// Weight of the action term.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Probe noise for the sensitivity analysis, normalized units.
    pub sigma_s: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sigma: 0.1,
            lambda: 1.0,
            epochs: 2000,
            batch_size: 64,
            seed: 0,
            learning_rate: 1e-3,
            sigma_s: 0.05,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        AdamConfig::with_learning_rate(self.learning_rate).validate()
    }

    fn layer_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(output);
        dims
    }

    fn init(&self, role: &str, input: usize, output: usize) -> Result<NetParams> {
        init_net(
            &self.layer_dims(input, output),
            self.activation,
            derive_seed(self.seed, &format!("init/{role}")),
        )
    }
}

/// Mean per-sample losses of one epoch. `total = state + weight * action`,
/// where the weight is `lambda` for the joint objectives and one otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub state: f64,
    pub action: f64,
}

pub type LossHistory = Vec<EpochLoss>;

/// Normalized training arrays, one row per transition.
struct Normalized {
    n: usize,
    state_dim: usize,
    action_dim: usize,
    x: Vec<f64>,
    a: Vec<f64>,
    x_next: Vec<f64>,
}

impl Normalized {
    fn new(data: &TrajectoryDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let stats = &data.stats;
        let (mut x, mut a, mut x_next) = (Vec::new(), Vec::new(), Vec::new());
        for t in data.transitions() {
            x.extend(stats.normalize_state(&t.x)?);
            a.extend(stats.normalize_action(&t.a)?);
            x_next.extend(stats.normalize_state(&t.x_next)?);
        }
        Ok(Normalized {
            n: data.len(),
            state_dim: data.state_dim,
            action_dim: data.action_dim,
            x,
            a,
            x_next,
        })
    }

    fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.state_dim..(i + 1) * self.state_dim]
    }

    fn a(&self, i: usize) -> &[f64] {
        &self.a[i * self.action_dim..(i + 1) * self.action_dim]
    }

    fn x_next(&self, i: usize) -> &[f64] {
        &self.x_next[i * self.state_dim..(i + 1) * self.state_dim]
    }
}

/// Appends `[x_i, x_next_i + eta]` rows for the denoiser, one fresh noise
/// draw per call.
pub(crate) fn push_denoiser_input(
    input: &mut Vec<f64>,
    x: &[f64],
    x_next: &[f64],
    sigma: f64,
    noise: &mut DecilRng,
) -> Result<()> {
    input.extend_from_slice(x);
    input.extend(add_gaussian_noise(x_next, sigma, noise)?);
    Ok(())
}

/// One minibatch: network inputs and targets, row-major.
struct Batch {
    input: Vec<f64>,
    target: Vec<f64>,
}

/// Shared minibatch Adam loop. `make_batch` fills a batch for the given
/// sample indices; `state_width` leading output columns count as state
/// loss, the remaining ones as action loss scaled by `action_weight`.
fn fit(
    net: &mut NetParams,
    n_samples: usize,
    cfg: &TrainConfig,
    state_width: usize,
    action_weight: f64,
    mut make_batch: impl FnMut(&[usize], &mut DecilRng) -> Result<Batch>,
) -> Result<LossHistory> {
    cfg.validate()?;
    let out_dim = net.output_dim();
    let mut adam = AdamState::new(net, AdamConfig::with_learning_rate(cfg.learning_rate))?;
    let mut shuffle_rng = rng_for(cfg.seed, "train/shuffle");
    let mut noise_rng = rng_for(cfg.seed, "train/noise");
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut grads = net.zeros_like();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut state_sum, mut action_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = make_batch(chunk, &mut noise_rng)?;
            let b = chunk.len();
            let cache = net.forward_batch(&batch.input, b)?;
            let scale = 1.0 / b as f64;
            let mut out_grad = Vec::with_capacity(b * out_dim);
            for (row, target) in cache
                .output()
                .chunks_exact(out_dim)
                .zip(batch.target.chunks_exact(out_dim))
            {
                for (j, (p, t)) in row.iter().zip(target).enumerate() {
                    let r = p - t;
                    let w = if j < state_width {
                        state_sum += r * r;
                        1.0
                    } else {
                        action_sum += r * r;
                        action_weight
                    };
                    out_grad.push(2.0 * w * r * scale);
                }
            }
            grads.scale(0.0);
            net.backward_batch(&cache, &out_grad, &mut grads)?;
            adam_step(net, &grads, &mut adam)?;
        }
        let state = state_sum / n_samples as f64;
        let action = action_sum / n_samples as f64;
        let total = state + action_weight * action;
        if !total.is_finite() || !net.is_finite() {
            return Err(Error::Divergence { epoch, loss: total });
        }
        history.push(EpochLoss { total, state, action });
    }
    Ok(history)
}

/// Fits `f` to minimize the mean of `||f(x_t) - x_{t+1}||^2`.
pub fn train_dynamics(data: &TrajectoryDataset, cfg: &TrainConfig) -> Result<(DynamicsModel, LossHistory)> {
    let norm = Normalized::new(data)?;
    let n = norm.state_dim;
    let mut net = cfg.init("dynamics", n, n)?;
    let history = fit(&mut net, norm.n, cfg, n, 1.0, |idx, _| {
        let mut batch = Batch {
            input: Vec::with_capacity(idx.len() * n),
            target: Vec::with_capacity(idx.len() * n),
        };
        for &i in idx {
            batch.input.extend_from_slice(norm.x(i));
            batch.target.extend_from_slice(norm.x_next(i));
        }
        Ok(batch)
    })?;
    Ok((DynamicsModel::new(net, data.stats.clone())?, history))
}

/// The denoiser exactly as `train_denoiser` initializes it, before any update.
pub fn untrained_denoiser(data: &TrajectoryDataset, cfg: &TrainConfig) -> Result<DenoisingPolicy> {
    let (n, m) = (data.state_dim, data.action_dim);
    DenoisingPolicy::new(cfg.init("denoiser", 2 * n, n + m)?, data.stats.clone())
}

/// Fits `d` to minimize `||x̂_{t+1} - x_{t+1}||^2 + lambda ||â_t - a_t||^2`
/// with inputs `(x_t, x_{t+1} + eta)`, `eta` redrawn every time a sample is
/// visited.
pub fn train_denoiser(data: &TrajectoryDataset, cfg: &TrainConfig) -> Result<(DenoisingPolicy, LossHistory)> {
    let norm = Normalized::new(data)?;
    let (n, m) = (norm.state_dim, norm.action_dim);
    let mut net = untrained_denoiser(data, cfg)?.net;
    let history = fit(&mut net, norm.n, cfg, n, cfg.lambda, |idx, noise| {
        let mut batch = Batch {
            input: Vec::with_capacity(idx.len() * 2 * n),
            target: Vec::with_capacity(idx.len() * (n + m)),
        };
        for &i in idx {
            push_denoiser_input(&mut batch.input, norm.x(i), norm.x_next(i), cfg.sigma, noise)?;
            batch.target.extend_from_slice(norm.x_next(i));
            batch.target.extend_from_slice(norm.a(i));
        }
        Ok(batch)
    })?;
    Ok((DenoisingPolicy::new(net, data.stats.clone())?, history))
}

/// Fits one of the baselines.
///
/// `bc` and `noisy_bc` share their initialization and minibatch order, so
/// `noisy_bc` at zero noise reproduces `bc` exactly.
pub fn train_baseline(
    data: &TrajectoryDataset,
    cfg: &TrainConfig,
    variant: BaselineVariant,
) -> Result<(BaselinePolicy, LossHistory)> {
    let norm = Normalized::new(data)?;
    let (n, m) = (norm.state_dim, norm.action_dim);
    let out = variant.output_dim(n, m);
    let (role, state_width, action_weight, sigma) = match variant {
        BaselineVariant::Bc => ("policy", 0, 1.0, 0.0),
        BaselineVariant::NoisyBc => ("policy", 0, 1.0, cfg.sigma),
        BaselineVariant::Joint => ("joint", n, cfg.lambda, 0.0),
    };
    let mut net = cfg.init(role, n, out)?;
    let history = fit(&mut net, norm.n, cfg, state_width, action_weight, |idx, noise| {
        let mut batch = Batch {
            input: Vec::with_capacity(idx.len() * n),
            target: Vec::with_capacity(idx.len() * out),
        };
        for &i in idx {
            match variant {
                BaselineVariant::Bc => batch.input.extend_from_slice(norm.x(i)),
                BaselineVariant::NoisyBc => batch.input.extend(add_gaussian_noise(norm.x(i), sigma, noise)?),
                BaselineVariant::Joint => {
                    batch.input.extend_from_slice(norm.x(i));
                    batch.target.extend_from_slice(norm.x_next(i));
                }
            }
            batch.target.extend_from_slice(norm.a(i));
        }
        Ok(batch)
    })?;
    Ok((BaselinePolicy::new(variant, net, data.stats.clone(), sigma)?, history))
}
