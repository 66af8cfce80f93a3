use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::jacobian::{fd_jacobian, operator_norm};
use super::{percentile, probe_indices};
use crate::data::TrajectoryDataset;
use crate::env::Environment;
use crate::error::{check_len, Error, Result};
use crate::models::{DenoisingPolicy, DynamicsModel};
use crate::net::{Activation, NetParams};
use crate::rollout::decil_step;
use crate::seed::rng_for;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct JacobianNormAudit {
    pub n_probe: usize,
    /// `(||J_gy||_F before, ||J_gy||_F after)` per probe, in probe order.
    pub pairs: Vec<(f64, f64)>,
    /// Fraction of probes where the trained norm is strictly smaller.
    pub fraction_reduced: f64,
    /// Set when every pair is exactly equal, e.g. the same policy twice.
    pub degenerate_equal: bool,
    pub mean_before: f64,
    pub mean_after: f64,
}

/// Compares `||∂g/∂y||_F` at `y = x_{t+1}` (normalized units) between two
/// policies at `n_probe` dataset transitions spread evenly over the data.
pub fn jacobian_norm_audit(
    d_before: &DenoisingPolicy,
    d_after: &DenoisingPolicy,
    data: &TrajectoryDataset,
    n_probe: usize,
    eps: f64,
) -> Result<JacobianNormAudit> {
    d_before.net.check_same_shape(&d_after.net, "policies under audit")?;
    let transitions: Vec<_> = data.transitions().collect();
    let probes = probe_indices(transitions.len(), n_probe);
    if probes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let norm_at = |d: &DenoisingPolicy, xn: &[f64], yn: &[f64]| -> Result<f64> {
        Ok(fd_jacobian(|v| d.state_head_normalized(xn, v), yn, eps)?.norm())
    };
    let mut pairs = Vec::with_capacity(probes.len());
    for i in probes {
        let t = transitions[i];
        let xn = data.stats.normalize_state(&t.x)?;
        let yn = data.stats.normalize_state(&t.x_next)?;
        pairs.push((norm_at(d_before, &xn, &yn)?, norm_at(d_after, &xn, &yn)?));
    }
    let n = pairs.len() as f64;
    Ok(JacobianNormAudit {
        n_probe: pairs.len(),
        fraction_reduced: pairs.iter().filter(|(b, a)| a < b).count() as f64 / n,
        degenerate_equal: pairs.iter().all(|(b, a)| a == b),
        mean_before: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        mean_after: pairs.iter().map(|p| p.1).sum::<f64>() / n,
        pairs,
    })
}

/// A single linear layer on `[x, y]` computing
/// `g(x, y) = x_next + J (y - x_next)`.
pub fn linear_denoiser(jacobian: &DMatrix<f64>, x_next: &[f64]) -> Result<NetParams> {
    let n = x_next.len();
    check_len("linear denoiser rows", n, jacobian.nrows())?;
    check_len("linear denoiser cols", n, jacobian.ncols())?;
    let weights: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let mut row = vec![0.0; n];
            row.extend(jacobian.row(r).iter());
            row
        })
        .collect();
    let bias: Vec<f64> = (0..n)
        .map(|r| x_next[r] - (0..n).map(|c| jacobian[(r, c)] * x_next[c]).sum::<f64>())
        .collect();
    NetParams::from_rows(vec![2 * n, n], Activation::Tanh, vec![weights], vec![bias])
}

#[derive(Debug, Clone, Serialize)]
pub struct QuadraticLossReport {
    pub sigma: f64,
    pub n_mc: usize,
    /// Monte Carlo mean of `||g(x, x_next + eta) - x_next||^2`.
    pub estimate: f64,
    /// `sigma^2 ||J||_F^2`.
    pub predicted: f64,
    /// `|estimate - predicted| / predicted`, zero when both vanish.
    pub relative_error: f64,
    /// Acceptance threshold `5 / sqrt(n_mc)`.
    pub tolerance: f64,
}

/// Monte Carlo check of `E||g(x, x_next + eta) - x_next||^2 = sigma^2 ||J||_F^2`
/// for the linear denoiser with Jacobian `J` (noise stream `quadratic-loss`).
pub fn quadratic_loss_check(
    jacobian: &DMatrix<f64>,
    sigma: f64,
    n_mc: usize,
    seed: u64,
) -> Result<QuadraticLossReport> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
    }
    let n = jacobian.nrows();
    let x: Vec<f64> = (0..n).map(|i| 0.3 - 0.2 * i as f64).collect();
    let x_next: Vec<f64> = (0..n).map(|i| 0.5 + 0.25 * i as f64).collect();
    let net = linear_denoiser(jacobian, &x_next)?;

    let mut rng = rng_for(seed, "quadratic-loss");
    let mut input = Vec::with_capacity(n_mc * 2 * n);
    for _ in 0..n_mc {
        input.extend_from_slice(&x);
        for v in &x_next {
            let z: f64 = StandardNormal.sample(&mut rng);
            input.push(v + sigma * z);
        }
    }
    let out = net.forward_batch(&input, n_mc)?.into_output();
    let estimate = out
        .chunks_exact(n)
        .map(|row| row.iter().zip(&x_next).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n_mc as f64;
    let predicted = sigma * sigma * jacobian.norm_squared();
    let relative_error = if predicted == 0.0 && estimate == 0.0 {
        0.0
    } else {
        (estimate - predicted).abs() / predicted
    };
    Ok(QuadraticLossReport {
        sigma,
        n_mc,
        estimate,
        predicted,
        relative_error,
        tolerance: 5.0 / (n_mc as f64).sqrt(),
    })
}

/// `max` over probe transitions of `||∂D/∂a||_2`, by central differences at
/// the stored `(x_t, a_t)` and 50 power iterations.
pub fn action_lipschitz(env: &dyn Environment, data: &TrajectoryDataset, n_probe: usize, eps: f64) -> Result<f64> {
    let transitions: Vec<_> = data.transitions().collect();
    let mut best: f64 = 0.0;
    for i in probe_indices(transitions.len(), n_probe) {
        let t = transitions[i];
        let jac = fd_jacobian(|a| Ok(env.step(&t.x, a)), &t.a, eps)?;
        best = best.max(operator_norm(&jac, 50));
    }
    Ok(best)
}

/// One transition with the model's predictions attached, raw units.
#[derive(Debug, Clone)]
pub struct BoundSample {
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub x_next: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub a_hat: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorBoundReport {
    pub n_samples: usize,
    pub lipschitz_action: f64,
    /// 95th percentile of `||x̂_{t+1} - x_{t+1}||`.
    pub eps_x: f64,
    /// 95th percentile of `||â_t - a_t||`.
    pub eps_a: f64,
    /// `L ε_a + ε_x`.
    pub aggregate_bound: f64,
    /// 95th percentile of `||D(x_t, â_t) - x̂_{t+1}||`.
    pub deviation_p95: f64,
    /// Fraction of samples with
    /// `||D(x_t, â_t) - x̂_{t+1}|| <= L ||â_t - a_t|| + ||x̂_{t+1} - x_{t+1}||`.
    pub fraction_satisfied: f64,
    pub max_violation: f64,
}

/// Evaluates the per-sample bound for given predictions. Comparisons allow
/// a relative slack of `1e-9` for floating-point rounding.
pub fn bound_check(env: &dyn Environment, samples: &[BoundSample], lipschitz_action: f64) -> Result<ErrorBoundReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ex = Vec::with_capacity(samples.len());
    let mut ea = Vec::with_capacity(samples.len());
    let mut lhs = Vec::with_capacity(samples.len());
    let mut satisfied = 0;
    let mut max_violation: f64 = 0.0;
    for s in samples {
        let executed = env.step(&s.x, &s.a_hat);
        let deviation = dist(&executed, &s.x_hat);
        let e_x = dist(&s.x_hat, &s.x_next);
        let e_a = dist(&s.a_hat, &s.a);
        let rhs = lipschitz_action * e_a + e_x;
        if deviation <= rhs * (1.0 + 1e-9) + 1e-12 {
            satisfied += 1;
        } else {
            max_violation = max_violation.max(deviation - rhs);
        }
        ex.push(e_x);
        ea.push(e_a);
        lhs.push(deviation);
    }
    let eps_x = percentile(&ex, 0.95);
    let eps_a = percentile(&ea, 0.95);
    Ok(ErrorBoundReport {
        n_samples: samples.len(),
        lipschitz_action,
        eps_x,
        eps_a,
        aggregate_bound: lipschitz_action * eps_a + eps_x,
        deviation_p95: percentile(&lhs, 0.95),
        fraction_satisfied: satisfied as f64 / samples.len() as f64,
        max_violation,
    })
}

/// Runs the DeCIL step on every dataset transition and checks the
/// environment error bound, with the action Lipschitz constant estimated
/// over 200 probe transitions.
pub fn error_bound_audit(
    env: &dyn Environment,
    f: &DynamicsModel,
    d: &DenoisingPolicy,
    data: &TrajectoryDataset,
    eps_fd: f64,
) -> Result<ErrorBoundReport> {
    let lipschitz = action_lipschitz(env, data, 200, eps_fd)?;
    let samples = data
        .transitions()
        .map(|t| {
            let (x_hat, a_hat) = decil_step(f, d, &t.x)?;
            Ok(BoundSample {
                x: t.x.clone(),
                a: t.a.clone(),
                x_next: t.x_next.clone(),
                x_hat,
                a_hat,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    bound_check(env, &samples, lipschitz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::env::{sinusoid_env, EnvId};

    #[test]
    fn zero_jacobian_has_zero_loss() {
        let r = quadratic_loss_check(&DMatrix::zeros(2, 2), 0.01, 1000, 0).unwrap();
        assert_eq!(r.estimate, 0.0);
        assert_eq!(r.relative_error, 0.0);
    }

    #[test]
    fn identity_jacobian_matches_two_sigma_squared() {
        let r = quadratic_loss_check(&DMatrix::identity(2, 2), 0.01, 100_000, 1).unwrap();
        assert!((r.estimate - 2e-4).abs() < 0.02 * 2e-4, "{}", r.estimate);
        assert!(r.relative_error < r.tolerance);
    }

    #[test]
    fn doubling_sigma_quadruples_the_loss() {
        let j = DMatrix::from_row_slice(2, 2, &[0.6, -0.2, 0.1, 0.3]);
        let a = quadratic_loss_check(&j, 0.01, 100_000, 2).unwrap();
        let b = quadratic_loss_check(&j, 0.02, 100_000, 3).unwrap();
        let ratio = b.estimate / a.estimate;
        // each estimate has relative standard error below sqrt(2 / n)
        assert!((ratio - 4.0).abs() < 4.0 * 5.0 * (2.0f64 / 1e5).sqrt(), "{ratio}");
        assert!(quadratic_loss_check(&j, 0.0, 10, 0).is_err());
    }

    #[test]
    fn linear_denoiser_is_exact() {
        let j = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.25, 1.0]);
        let net = linear_denoiser(&j, &[1.0, 2.0]).unwrap();
        let out = net.forward(&[9.0, 9.0, 1.0, 2.0]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15 && (out[1] - 2.0).abs() < 1e-15);
        let out = net.forward(&[0.0, 0.0, 1.2, 2.0]).unwrap();
        assert!((out[0] - 1.1).abs() < 1e-12 && (out[1] - 2.05).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_action_lipschitz_is_dt() {
        let env = sinusoid_env();
        let data = generate_dataset(&env, 4, 0).unwrap();
        let l = action_lipschitz(&env, &data, 200, 1e-4).unwrap();
        assert!((l - 0.1).abs() < 1e-6, "{l}");
    }

    #[test]
    fn oracle_predictions_make_both_sides_zero() {
        for id in EnvId::ALL {
            let env = id.make();
            let data = generate_dataset(env.as_ref(), 2, 0).unwrap();
            let samples: Vec<BoundSample> = data
                .transitions()
                .map(|t| BoundSample {
                    x: t.x.clone(),
                    a: t.a.clone(),
                    x_next: t.x_next.clone(),
                    x_hat: t.x_next.clone(),
                    a_hat: t.a.clone(),
                })
                .collect();
            let l = action_lipschitz(env.as_ref(), &data, 200, 1e-4).unwrap();
            let r = bound_check(env.as_ref(), &samples, l).unwrap();
            assert_eq!(r.fraction_satisfied, 1.0);
            assert_eq!(r.eps_x, 0.0);
            assert_eq!(r.eps_a, 0.0);
            assert!(r.deviation_p95 < 1e-12);
        }
    }
}
