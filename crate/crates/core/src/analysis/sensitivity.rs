use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::models::{DenoisingPolicy, DynamicsModel};
use crate::seed::rng_for;

/// States whose `S_f` falls below this are excluded from the ratio.
pub const MIN_SENSITIVITY: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub sigma_train: f64,
    pub sigma_s: f64,
    pub n_mc: usize,
    pub per_state_rho: Vec<f64>,
    pub mean_rho: f64,
    /// Number of states dropped because `S_f` vanished there.
    pub excluded: usize,
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Per-state Monte Carlo estimate of
/// `rho = E||g(x + eta, f(x + eta)) - x'|| / E||f(x + eta) - x'||`
/// in normalized units, with the same draws for both expectations.
/// State `i` draws from stream `sensitivity/state/{i}` of `seed`.
pub fn sensitivity_ratio(
    f: &DynamicsModel,
    d: &DenoisingPolicy,
    data: &TrajectoryDataset,
    sigma_train: f64,
    sigma_s: f64,
    n_mc: usize,
    seed: u64,
) -> Result<SensitivityRecord> {
    if !(sigma_s > 0.0) || !sigma_s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma_s must be positive, got {sigma_s}"
        )));
    }
    if n_mc < 100 {
        return Err(Error::InvalidArgument(format!("n_mc must be at least 100, got {n_mc}")));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.state_dim;
    let transitions: Vec<_> = data.transitions().collect();
    let ratios = transitions
        .par_iter()
        .enumerate()
        .map(|(i, t)| -> Result<Option<f64>> {
            let xn = data.stats.normalize_state(&t.x)?;
            let target = data.stats.normalize_state(&t.x_next)?;
            let mut rng = rng_for(seed, &format!("sensitivity/state/{i}"));
            let mut noisy = Vec::with_capacity(n_mc * n);
            for _ in 0..n_mc {
                for v in &xn {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    noisy.push(v + sigma_s * z);
                }
            }
            let pred = f.predict_normalized_batch(&noisy, n_mc)?;
            let mut xy = Vec::with_capacity(n_mc * 2 * n);
            for (x_row, y_row) in noisy.chunks_exact(n).zip(pred.chunks_exact(n)) {
                xy.extend_from_slice(x_row);
                xy.extend_from_slice(y_row);
            }
            let refined = d.state_head_normalized_batch(&xy, n_mc)?;
            let s_f: f64 = pred.chunks_exact(n).map(|p| norm_diff(p, &target)).sum::<f64>() / n_mc as f64;
            let s_fd: f64 = refined.chunks_exact(n).map(|p| norm_diff(p, &target)).sum::<f64>() / n_mc as f64;
            if !s_f.is_finite() || !s_fd.is_finite() {
                return Err(Error::Numeric(format!("sensitivity at state {i} is not finite")));
            }
            Ok((s_f >= MIN_SENSITIVITY).then(|| s_fd / s_f))
        })
        .collect::<Result<Vec<_>>>()?;
    let excluded = ratios.iter().filter(|r| r.is_none()).count();
    let per_state_rho: Vec<f64> = ratios.into_iter().flatten().collect();
    if per_state_rho.is_empty() {
        return Err(Error::Numeric("S_f vanished at every state".into()));
    }
    let mean_rho = per_state_rho.iter().sum::<f64>() / per_state_rho.len() as f64;
    Ok(SensitivityRecord {
        sigma_train,
        sigma_s,
        n_mc,
        per_state_rho,
        mean_rho,
        excluded,
    })
}
