use std::f64::consts::TAU;

use rand::RngExt;

use super::{EnvId, Environment};
use crate::seed::DecilRng;

/// Point moving in the plane; the expert follows the curve `q = sin(p)`.
///
/// State `(p, q)`, action a velocity, Euler step `x' = x + dt * a`. The
/// expert moves along the curve at unit speed plus a proportional term
/// `k * (sin p - q)` on the `q` velocity, which vanishes on the curve and
/// cancels the drift of the explicit Euler step.
#[derive(Debug, Clone)]
pub struct SinusoidEnv {
    pub dt: f64,
    pub horizon: usize,
    pub tracking_gain: f64,
    pub success_threshold: f64,
}

impl Default for SinusoidEnv {
    fn default() -> Self {
        SinusoidEnv {
            dt: 0.1,
            horizon: 60,
            tracking_gain: 5.0,
            success_threshold: 0.1,
        }
    }
}

impl SinusoidEnv {
    /// Vertical offset from the curve, `|q - sin p|`.
    pub fn manifold_offset(x: &[f64]) -> f64 {
        (x[1] - x[0].sin()).abs()
    }

    /// Euclidean distance from `x` to the curve `q = sin(p)`.
    pub fn manifold_distance(x: &[f64]) -> f64 {
        let (p, q) = (x[0], x[1]);
        let dist2 = |s: f64| (p - s).powi(2) + (q - s.sin()).powi(2);
        // The nearest curve point lies within |q| + 1 of p horizontally.
        let reach = q.abs() + 1.0;
        let n = 2000;
        let h = 2.0 * reach / n as f64;
        let mut best = (p - reach, dist2(p - reach));
        for i in 1..=n {
            let s = p - reach + h * i as f64;
            let d = dist2(s);
            if d < best.1 {
                best = (s, d);
            }
        }
        // golden-section refinement around the grid minimum
        let (mut lo, mut hi) = (best.0 - h, best.0 + h);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if dist2(a) < dist2(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        dist2(0.5 * (lo + hi)).min(best.1).sqrt()
    }
}

impl Environment for SinusoidEnv {
    fn id(&self) -> EnvId {
        EnvId::Sinusoid
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        vec![x[0] + self.dt * a[0], x[1] + self.dt * a[1]]
    }

    fn initial_state(&self, rng: &mut DecilRng) -> Vec<f64> {
        let p = rng.random_range(0.0..TAU);
        vec![p, p.sin()]
    }

    fn expert_action(&self, x: &[f64]) -> Vec<f64> {
        let (p, q) = (x[0], x[1]);
        let slope = p.cos();
        let norm = 1.0f64.hypot(slope);
        vec![1.0 / norm, slope / norm + self.tracking_gain * (p.sin() - q)]
    }

    fn reward(&self, x: &[f64], _a: &[f64]) -> f64 {
        -Self::manifold_offset(x)
    }

    fn success(&self, states: &[Vec<f64>]) -> bool {
        if states.is_empty() {
            return false;
        }
        let mean = states.iter().map(|x| Self::manifold_offset(x)).sum::<f64>() / states.len() as f64;
        mean < self.success_threshold
    }
}
