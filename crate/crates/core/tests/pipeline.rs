//! End-to-end checks on trained models.

use std::sync::OnceLock;

use decil_core::analysis::action_lipschitz;
use decil_core::data::{generate_dataset, TrajectoryDataset};
use decil_core::env::{pointmass_crossing_env, sinusoid_env, Environment, SinusoidEnv};
use decil_core::models::{BaselineVariant, DenoisingPolicy, DynamicsModel};
use decil_core::rollout::{decil_step, episode_seed, rollout, DecilPolicy};
use decil_core::train::{train_baseline, train_denoiser, train_dynamics, LossHistory, TrainConfig};

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    norm(a.iter().zip(b).map(|(x, y)| x - y))
}

struct Trained {
    data: TrajectoryDataset,
    f: DynamicsModel,
    d: DenoisingPolicy,
}

fn config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

fn sinusoid_models() -> &'static Trained {
    static MODELS: OnceLock<Trained> = OnceLock::new();
    MODELS.get_or_init(|| {
        let data = generate_dataset(&sinusoid_env(), 10, 1).unwrap();
        let cfg = config(1, 2000);
        let (f, _) = train_dynamics(&data, &cfg).unwrap();
        let (d, _) = train_denoiser(&data, &cfg).unwrap();
        Trained { data, f, d }
    })
}

#[test]
fn training_is_deterministic_over_a_hundred_adam_steps() {
    // 120 transitions in batches of 64: two steps per epoch.
    let data = generate_dataset(&sinusoid_env(), 2, 3).unwrap();
    let cfg = config(3, 50);
    let (a, ha) = train_denoiser(&data, &cfg).unwrap();
    let (b, hb) = train_denoiser(&data, &cfg).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(ha, hb);
}

fn smoothed_end_below_start(history: &LossHistory) -> bool {
    let tail: Vec<f64> = history.iter().rev().take(10).map(|l| l.total).collect();
    tail.iter().sum::<f64>() / tail.len() as f64 <= history[0].total
}

#[test]
fn every_trainer_reduces_its_loss() {
    let envs: [Box<dyn Environment>; 2] = [Box::new(sinusoid_env()), Box::new(pointmass_crossing_env())];
    for env in &envs {
        let data = generate_dataset(env.as_ref(), 3, 0).unwrap();
        let cfg = config(0, 60);
        let histories = [
            train_dynamics(&data, &cfg).unwrap().1,
            train_denoiser(&data, &cfg).unwrap().1,
            train_baseline(&data, &cfg, BaselineVariant::Bc).unwrap().1,
            train_baseline(&data, &cfg, BaselineVariant::NoisyBc).unwrap().1,
            train_baseline(&data, &cfg, BaselineVariant::Joint).unwrap().1,
        ];
        for (i, h) in histories.iter().enumerate() {
            assert_eq!(h.len(), 60);
            assert!(smoothed_end_below_start(h), "{} trainer {i}", env.id());
        }
    }
}

#[test]
fn rescaled_states_give_the_same_actions() {
    let data = generate_dataset(&sinusoid_env(), 3, 2).unwrap();
    let scaled = data.with_scaled_states(10.0).unwrap();
    let cfg = config(2, 100);
    let (f, _) = train_dynamics(&data, &cfg).unwrap();
    let (d, _) = train_denoiser(&data, &cfg).unwrap();
    let (fs, _) = train_dynamics(&scaled, &cfg).unwrap();
    let (ds, _) = train_denoiser(&scaled, &cfg).unwrap();
    let mut sq = 0.0;
    let mut count = 0;
    for t in data.transitions() {
        let x10: Vec<f64> = t.x.iter().map(|v| 10.0 * v).collect();
        let (_, a) = decil_step(&f, &d, &t.x).unwrap();
        let (_, b) = decil_step(&fs, &ds, &x10).unwrap();
        sq += a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        count += a.len();
    }
    let rms = (sq / count as f64).sqrt();
    assert!(rms < 5e-2, "rms {rms}");
}

#[test]
fn clean_denoiser_barely_moves_the_prediction() {
    let m = sinusoid_models();
    let cfg = TrainConfig {
        sigma: 0.0,
        ..config(1, 2000)
    };
    let (d0, _) = train_denoiser(&m.data, &cfg).unwrap();
    for t in m.data.transitions() {
        let predicted = m.f.predict(&t.x).unwrap();
        let (refined, _) = decil_step(&m.f, &d0, &t.x).unwrap();
        assert!(dist(&refined, &predicted) < 0.05);
    }
}

#[test]
fn trained_actions_match_the_expert() {
    let m = sinusoid_models();
    let close = m
        .data
        .transitions()
        .filter(|t| dist(&decil_step(&m.f, &m.d, &t.x).unwrap().1, &t.a) < 0.1)
        .count();
    assert!(close as f64 >= 0.9 * m.data.len() as f64, "{close} of {}", m.data.len());
}

#[test]
fn decil_step_is_deterministic() {
    let m = sinusoid_models();
    let x = &m.data.trajectories[0][0].x;
    assert_eq!(decil_step(&m.f, &m.d, x).unwrap(), decil_step(&m.f, &m.d, x).unwrap());
    assert!(decil_step(&m.f, &m.d, &[0.0]).is_err());
}

#[test]
fn trained_decil_tracks_the_curve_without_noise() {
    let m = sinusoid_models();
    let env = sinusoid_env();
    let policy = DecilPolicy::new(m.f.clone(), m.d.clone()).unwrap();
    let deviations: Vec<f64> = (0..20)
        .map(|e| {
            let r = rollout(&policy, &env, 0.0, episode_seed(11, e)).unwrap();
            r.states.iter().map(|x| SinusoidEnv::manifold_offset(x)).sum::<f64>() / r.states.len() as f64
        })
        .collect();
    let mean = deviations.iter().sum::<f64>() / deviations.len() as f64;
    assert!(mean < 0.1, "mean deviation {mean}");
}

/// Per step, `||D(x, â) - x̂|| <= L ||â - a*|| + ||D(x, a*) - x̂||` with `a*`
/// the expert action at the visited state. The mean dataset residual is
/// reported alongside; it is not a per-step bound off the data.
#[test]
fn executed_states_stay_within_the_action_bound() {
    let m = sinusoid_models();
    let env = sinusoid_env();
    let lipschitz = action_lipschitz(&env, &m.data, 200, 1e-4).unwrap();
    assert!((lipschitz - env.dt).abs() < 1e-6);
    let eps_x = m
        .data
        .transitions()
        .map(|t| dist(&decil_step(&m.f, &m.d, &t.x).unwrap().0, &t.x_next))
        .sum::<f64>()
        / m.data.len() as f64;
    let policy = DecilPolicy::new(m.f.clone(), m.d.clone()).unwrap();
    let (mut holds, mut within_mean, mut steps) = (0, 0, 0);
    for e in 0..10 {
        let r = rollout(&policy, &env, 0.0, episode_seed(5, e)).unwrap();
        for t in 0..r.actions.len() {
            let expert = env.expert_action(&r.states[t]);
            let predicted = &r.predicted_refined_states[t];
            let lhs = dist(&r.states[t + 1], predicted);
            let action_term = lipschitz * dist(&r.actions[t], &expert);
            let model_term = dist(&env.step(&r.states[t], &expert), predicted);
            if lhs <= (action_term + model_term) * (1.0 + 1e-9) + 1e-12 {
                holds += 1;
            }
            if lhs <= action_term + eps_x {
                within_mean += 1;
            }
            steps += 1;
        }
    }
    assert_eq!(holds, steps);
    println!("steps within the mean-residual bound: {within_mean} of {steps} (mean residual {eps_x})");
}
