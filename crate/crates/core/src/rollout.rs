//! Closed-loop execution of learned policies under observation noise.
//!
//! The policy observes `x_t + eta` with `eta ~ N(0, sigma^2 I)` in raw state
//! units; the environment always advances the true state.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::add_gaussian_noise;
use crate::env::Environment;
use crate::error::{check_len, Error, Result};
use crate::models::{BaselinePolicy, DenoisingPolicy, DynamicsModel};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub action: Vec<f64>,
    /// The refined next-state prediction, for policies that make one.
    pub refined_next: Option<Vec<f64>>,
}

pub trait Policy: Send + Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn act(&self, obs: &[f64]) -> Result<PolicyOutput>;
}

/// One inference step: `x̃ = f(x)`, then `(x̂, â) = d(x, x̃)`. Raw units in
/// and out.
pub fn decil_step(f: &DynamicsModel, d: &DenoisingPolicy, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("decil state", f.state_dim(), x.len())?;
    let predicted = f.predict(x)?;
    d.refine(x, &predicted)
}

#[derive(Debug, Clone)]
pub struct DecilPolicy {
    pub dynamics: DynamicsModel,
    pub denoiser: DenoisingPolicy,
}

impl DecilPolicy {
    pub fn new(dynamics: DynamicsModel, denoiser: DenoisingPolicy) -> Result<Self> {
        check_len("denoiser state dim", dynamics.state_dim(), denoiser.state_dim())?;
        Ok(DecilPolicy { dynamics, denoiser })
    }
}

impl Policy for DecilPolicy {
    fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.denoiser.action_dim()
    }

    fn act(&self, obs: &[f64]) -> Result<PolicyOutput> {
        let (refined, action) = decil_step(&self.dynamics, &self.denoiser, obs)?;
        Ok(PolicyOutput {
            action,
            refined_next: Some(refined),
        })
    }
}

impl Policy for BaselinePolicy {
    fn state_dim(&self) -> usize {
        self.stats.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.stats.action_dim()
    }

    fn act(&self, obs: &[f64]) -> Result<PolicyOutput> {
        Ok(PolicyOutput {
            action: BaselinePolicy::act(self, obs)?,
            refined_next: None,
        })
    }
}

/// The environment's scripted expert acting on its observations.
pub struct ExpertPolicy<'a> {
    pub env: &'a dyn Environment,
}

impl Policy for ExpertPolicy<'_> {
    fn state_dim(&self) -> usize {
        self.env.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.env.action_dim()
    }

    fn act(&self, obs: &[f64]) -> Result<PolicyOutput> {
        Ok(PolicyOutput {
            action: self.env.expert_action(obs),
            refined_next: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// `x̂_{t+1}` per step; empty for policies without a state prediction.
    pub predicted_refined_states: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub total_reward: f64,
    pub success: bool,
    pub obs_noise_sigma: f64,
    pub seed: u64,
    /// Diagnostic for an episode stopped by a non-finite value.
    pub aborted: Option<String>,
}

/// Runs one episode. The initial state comes from stream
/// `rollout/initial-state` of `seed` and the observation noise from
/// `rollout/observation-noise`, so equal seeds give paired episodes across
/// policies.
pub fn rollout(policy: &dyn Policy, env: &dyn Environment, obs_noise_sigma: f64, seed: u64) -> Result<RolloutResult> {
    check_len("policy state dim", env.state_dim(), policy.state_dim())?;
    check_len("policy action dim", env.action_dim(), policy.action_dim())?;
    let mut init_rng = rng_for(seed, "rollout/initial-state");
    let mut noise_rng = rng_for(seed, "rollout/observation-noise");

    let mut x = env.initial_state(&mut init_rng);
    let mut result = RolloutResult {
        states: vec![x.clone()],
        actions: Vec::with_capacity(env.horizon()),
        predicted_refined_states: Vec::new(),
        rewards: Vec::with_capacity(env.horizon()),
        total_reward: 0.0,
        success: false,
        obs_noise_sigma,
        seed,
        aborted: None,
    };

    for t in 0..env.horizon() {
        let obs = add_gaussian_noise(&x, obs_noise_sigma, &mut noise_rng)?;
        let out = match policy.act(&obs) {
            Ok(out) if out.action.iter().all(|v| v.is_finite()) => out,
            Ok(_) => {
                result.aborted = Some(format!("non-finite action at step {t}"));
                break;
            }
            Err(Error::Numeric(msg)) => {
                result.aborted = Some(format!("step {t}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let x_next = env.step(&x, &out.action);
        if !x_next.iter().all(|v| v.is_finite()) {
            result.aborted = Some(format!("non-finite state at step {}", t + 1));
            break;
        }
        result.rewards.push(env.reward(&x, &out.action));
        result.actions.push(out.action);
        if let Some(refined) = out.refined_next {
            result.predicted_refined_states.push(refined);
        }
        result.states.push(x_next.clone());
        x = x_next;
    }

    result.total_reward = result.rewards.iter().sum();
    result.success = result.aborted.is_none() && env.success(&result.states);
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub policy: String,
    pub noise_sigma: f64,
    pub episode: usize,
    pub total_reward: f64,
    pub success: bool,
    pub seed: u64,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub noise_sigma: f64,
    pub n_episodes: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub episodes: Vec<EpisodeRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed of episode `e` in an evaluation rooted at `seed`; shared by every
/// policy and noise level.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    derive_seed(seed, &format!("episode/{episode}"))
}

pub const EPISODE_CSV_HEADER: &str = "policy,noise_sigma,episode,total_reward,success,seed";

impl EvalTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EPISODE_CSV_HEADER);
        out.push('\n');
        for r in &self.episodes {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.policy, r.noise_sigma, r.episode, r.total_reward, r.success, r.seed
            ));
        }
        out
    }

    pub fn summary_for(&self, policy: &str, noise_sigma: f64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.policy == policy && s.noise_sigma == noise_sigma)
    }
}

/// Evaluates every policy at every noise level on `n_episodes` paired
/// episodes. Aborted episodes count as failures with the worst finite total
/// reward observed in the whole evaluation.
pub fn evaluate(
    policies: &[(&str, &dyn Policy)],
    env: &dyn Environment,
    noise_levels: &[f64],
    n_episodes: usize,
    seed: u64,
) -> Result<EvalTable> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be at least 1".into()));
    }
    let cells: Vec<(usize, usize, usize)> = (0..policies.len())
        .flat_map(|p| (0..noise_levels.len()).flat_map(move |l| (0..n_episodes).map(move |e| (p, l, e))))
        .collect();
    let results: Vec<RolloutResult> = cells
        .par_iter()
        .map(|&(p, l, e)| rollout(policies[p].1, env, noise_levels[l], episode_seed(seed, e)))
        .collect::<Result<_>>()?;

    let worst_finite = results
        .iter()
        .filter(|r| r.aborted.is_none() && r.total_reward.is_finite())
        .map(|r| r.total_reward)
        .fold(f64::INFINITY, f64::min);

    let episodes: Vec<EpisodeRecord> = cells
        .iter()
        .zip(&results)
        .map(|(&(p, l, e), r)| {
            let aborted = r.aborted.is_some() || !r.total_reward.is_finite();
            EpisodeRecord {
                policy: policies[p].0.to_string(),
                noise_sigma: noise_levels[l],
                episode: e,
                total_reward: if aborted { worst_finite } else { r.total_reward },
                success: r.success && !aborted,
                seed: r.seed,
                aborted,
            }
        })
        .collect();

    let summary = episodes
        .chunks(n_episodes)
        .map(|group| {
            let rewards: Vec<f64> = group.iter().map(|r| r.total_reward).collect();
            let (mean_reward, std_reward) = mean_std(&rewards);
            SummaryRow {
                policy: group[0].policy.clone(),
                noise_sigma: group[0].noise_sigma,
                n_episodes,
                mean_reward,
                std_reward,
                success_rate: group.iter().filter(|r| r.success).count() as f64 / n_episodes as f64,
            }
        })
        .collect();

    Ok(EvalTable { episodes, summary })
}
