//! Expert transitions, datasets, normalization and Gaussian noise.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{EnvId, Environment};
use crate::error::{check_len, Error, Result};
use crate::seed::{rng_for, DecilRng};

/// Floor applied to every normalization standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Tolerance for `x_next == step(x, a)` when validating stored transitions.
pub const TRANSITION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub x_next: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

impl NormStats {
    /// Identity normalization for the given dimensions.
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        NormStats {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_mean.len()
    }

    pub fn normalize_state(&self, x: &[f64]) -> Result<Vec<f64>> {
        normalize(x, &self.state_mean, &self.state_std)
    }

    pub fn denormalize_state(&self, x: &[f64]) -> Result<Vec<f64>> {
        denormalize(x, &self.state_mean, &self.state_std)
    }

    pub fn normalize_action(&self, a: &[f64]) -> Result<Vec<f64>> {
        normalize(a, &self.action_mean, &self.action_std)
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Result<Vec<f64>> {
        denormalize(a, &self.action_mean, &self.action_std)
    }
}

fn check_stats(v: &[f64], mean: &[f64], std: &[f64]) -> Result<()> {
    check_len("normalization mean", v.len(), mean.len())?;
    check_len("normalization std", v.len(), std.len())?;
    if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "normalization std must be positive, got {s}"
        )));
    }
    Ok(())
}

/// `(v - mean) / std` elementwise.
pub fn normalize(v: &[f64], mean: &[f64], std: &[f64]) -> Result<Vec<f64>> {
    check_stats(v, mean, std)?;
    Ok(v.iter().zip(mean).zip(std).map(|((x, m), s)| (x - m) / s).collect())
}

/// `v * std + mean` elementwise.
pub fn denormalize(v: &[f64], mean: &[f64], std: &[f64]) -> Result<Vec<f64>> {
    check_stats(v, mean, std)?;
    Ok(v.iter().zip(mean).zip(std).map(|((x, m), s)| x * s + m).collect())
}

/// `v + eta` with `eta ~ N(0, sigma^2 I)`.
///
/// Always consumes one standard normal draw per dimension, so noise streams
/// stay aligned across noise levels. `sigma == 0` returns `v` unchanged.
pub fn add_gaussian_noise(v: &[f64], sigma: f64, rng: &mut DecilRng) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be finite and non-negative, got {sigma}"
        )));
    }
    let noisy: Vec<f64> = v
        .iter()
        .map(|x| {
            let z: f64 = StandardNormal.sample(rng);
            x + sigma * z
        })
        .collect();
    Ok(if sigma == 0.0 { v.to_vec() } else { noisy })
}

fn mean_std(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        mean.iter_mut().zip(*r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        var.iter_mut()
            .zip(*r)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m).powi(2));
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub env_id: EnvId,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub stats: NormStats,
    pub trajectories: Vec<Vec<Transition>>,
}

impl TrajectoryDataset {
    /// Builds a dataset from trajectories, computing normalization statistics
    /// over every visited state (including each trajectory's final state)
    /// and every action.
    pub fn from_trajectories(env_id: EnvId, seed: u64, trajectories: Vec<Vec<Transition>>) -> Result<Self> {
        let first = trajectories.iter().flatten().next().ok_or(Error::EmptyDataset)?;
        let (state_dim, action_dim) = (first.x.len(), first.a.len());
        for t in trajectories.iter().flatten() {
            check_len("transition state", state_dim, t.x.len())?;
            check_len("transition next state", state_dim, t.x_next.len())?;
            check_len("transition action", action_dim, t.a.len())?;
        }
        let mut states: Vec<&[f64]> = Vec::new();
        for traj in &trajectories {
            states.extend(traj.iter().map(|t| t.x.as_slice()));
            if let Some(last) = traj.last() {
                states.push(&last.x_next);
            }
        }
        let actions: Vec<&[f64]> = trajectories.iter().flatten().map(|t| t.a.as_slice()).collect();
        let (state_mean, state_std) = mean_std(&states, state_dim);
        let (action_mean, action_std) = mean_std(&actions, action_dim);
        Ok(TrajectoryDataset {
            env_id,
            seed,
            state_dim,
            action_dim,
            stats: NormStats {
                state_mean,
                state_std,
                action_mean,
                action_std,
            },
            trajectories,
        })
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flatten()
    }

    /// Current states of `n` distinct transitions drawn uniformly without
    /// replacement (stream `probe-states` of `seed`), in draw order. Returns
    /// every state when `n` exceeds the dataset size.
    pub fn sample_states(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let transitions: Vec<_> = self.transitions().collect();
        let mut rng = rng_for(seed, "probe-states");
        rand::seq::index::sample(&mut rng, transitions.len(), n.min(transitions.len()))
            .into_iter()
            .map(|i| transitions[i].x.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.trajectories.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest `|step(x, a) - x_next|` entry over all transitions.
    pub fn max_transition_error(&self, env: &dyn Environment) -> f64 {
        self.transitions()
            .flat_map(|t| {
                env.step(&t.x, &t.a)
                    .into_iter()
                    .zip(&t.x_next)
                    .map(|(a, b)| (a - b).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    /// Returns a copy with every state coordinate multiplied by `factor` and
    /// statistics recomputed.
    pub fn with_scaled_states(&self, factor: f64) -> Result<Self> {
        let scale = |v: &[f64]| v.iter().map(|x| x * factor).collect::<Vec<_>>();
        let trajectories = self
            .trajectories
            .iter()
            .map(|traj| {
                traj.iter()
                    .map(|t| Transition {
                        x: scale(&t.x),
                        a: t.a.clone(),
                        x_next: scale(&t.x_next),
                    })
                    .collect()
            })
            .collect();
        Self::from_trajectories(self.env_id, self.seed, trajectories)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let data: TrajectoryDataset = serde_json::from_str(&text)?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(data)
    }
}

/// Runs the scripted expert for one episode; returns its transitions and
/// whether the episode succeeded.
pub fn expert_episode(env: &dyn Environment, rng: &mut DecilRng) -> (Vec<Transition>, bool) {
    let mut x = env.initial_state(rng);
    let mut states = vec![x.clone()];
    let mut transitions = Vec::with_capacity(env.horizon());
    for _ in 0..env.horizon() {
        let a = env.expert_action(&x);
        let x_next = env.step(&x, &a);
        states.push(x_next.clone());
        transitions.push(Transition {
            x: std::mem::replace(&mut x, x_next.clone()),
            a,
            x_next,
        });
    }
    let success = env.success(&states);
    (transitions, success)
}

/// Rolls the scripted expert until `n_traj` successful episodes are
/// collected. Failed episodes are discarded; attempt `i` draws its initial
/// state from the stream `dataset/episode/{i}` of `seed`.
pub fn generate_dataset(env: &dyn Environment, n_traj: usize, seed: u64) -> Result<TrajectoryDataset> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument("n_traj must be at least 1".into()));
    }
    let max_attempts = 10 * n_traj;
    let mut trajectories = Vec::with_capacity(n_traj);
    let mut attempts = 0;
    while trajectories.len() < n_traj {
        if attempts == max_attempts {
            return Err(Error::ExpertFailure {
                successes: trajectories.len(),
                attempts,
                needed: n_traj,
            });
        }
        let mut rng = rng_for(seed, &format!("dataset/episode/{attempts}"));
        attempts += 1;
        let (traj, success) = expert_episode(env, &mut rng);
        if success {
            trajectories.push(traj);
        }
    }
    let data = TrajectoryDataset::from_trajectories(env.id(), seed, trajectories)?;
    let err = data.max_transition_error(env);
    if err > TRANSITION_TOLERANCE {
        return Err(Error::Numeric(format!(
            "stored transition deviates from the dynamics by {err}"
        )));
    }
    Ok(data)
}
