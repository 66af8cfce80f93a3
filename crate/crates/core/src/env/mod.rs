//! Desk-scale environments with exact dynamics and scripted experts.

mod crossing;
mod sinusoid;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::seed::DecilRng;

pub use crossing::PointmassCrossingEnv;
pub use sinusoid::SinusoidEnv;

/// Deterministic environment with a scripted expert.
///
/// `step` must be a pure function of its arguments. Callers are responsible
/// for passing vectors of length `state_dim` and `action_dim`.
pub trait Environment: Send + Sync {
    fn id(&self) -> EnvId;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Integration step of the dynamics.
    fn dt(&self) -> f64;
    fn step(&self, x: &[f64], a: &[f64]) -> Vec<f64>;
    fn initial_state(&self, rng: &mut DecilRng) -> Vec<f64>;
    fn expert_action(&self, x: &[f64]) -> Vec<f64>;
    fn reward(&self, x: &[f64], a: &[f64]) -> f64;
    /// Whether a full state trajectory (initial state included) solves the task.
    fn success(&self, states: &[Vec<f64>]) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    Sinusoid,
    PointmassCrossing,
}

impl EnvId {
    pub const ALL: [EnvId; 2] = [EnvId::Sinusoid, EnvId::PointmassCrossing];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Sinusoid => "sinusoid",
            EnvId::PointmassCrossing => "pointmass_crossing",
        }
    }

    pub fn make(self) -> Box<dyn Environment> {
        match self {
            EnvId::Sinusoid => Box::new(sinusoid_env()),
            EnvId::PointmassCrossing => Box::new(pointmass_crossing_env()),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        EnvId::ALL.into_iter().find(|id| id.as_str() == s).ok_or_else(|| {
            let valid: Vec<_> = EnvId::ALL.iter().map(|id| id.as_str()).collect();
            Error::InvalidArgument(format!(
                "unknown environment '{s}'; valid options: {}",
                valid.join(", ")
            ))
        })
    }
}

pub fn sinusoid_env() -> SinusoidEnv {
    SinusoidEnv::default()
}

pub fn pointmass_crossing_env() -> PointmassCrossingEnv {
    PointmassCrossingEnv::default()
}

/// Scales `a` onto the unit ball if its norm exceeds one.
pub(crate) fn clip_unit(mut a: [f64; 2]) -> [f64; 2] {
    let n = a[0].hypot(a[1]);
    if n > 1.0 {
        a[0] /= n;
        a[1] /= n;
    }
    a
}
