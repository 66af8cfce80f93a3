use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DenoisingPolicy, DynamicsModel};

/// Column layout of [`VectorField::to_csv`]. Grid rows carry the grid index
/// in `step`; trajectory rows (`traj_f`, `traj_fd`) carry both field vectors
/// at the visited state.
pub const FIELD_CSV_HEADER: &str = "kind,step,x0,x1,vf0,vf1,vfd0,vfd1";

/// Rectangle `[p_min, p_max] x [q_min, q_max]` sampled at
/// `resolution x resolution` points, raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub resolution: usize,
}

impl FieldGrid {
    pub fn points(&self) -> Vec<[f64; 2]> {
        let r = self.resolution;
        let at = |lo: f64, hi: f64, i: usize| {
            if r == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * i as f64 / (r - 1) as f64
            }
        };
        let mut pts = Vec::with_capacity(r * r);
        for i in 0..r {
            for j in 0..r {
                pts.push([at(self.p_min, self.p_max, j), at(self.q_min, self.q_max, i)]);
            }
        }
        pts
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldSample {
    pub x: Vec<f64>,
    /// `(f(x) - x) / dt`.
    pub v_f: Vec<f64>,
    /// `(g(x, f(x)) - x) / dt`.
    pub v_fd: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VectorField {
    pub grid: FieldGrid,
    pub dt: f64,
    pub samples: Vec<FieldSample>,
    /// Euler trajectory under `v_f`, `steps + 1` states.
    pub trajectory_f: Vec<FieldSample>,
    /// Euler trajectory under `v_fd`, `steps + 1` states.
    pub trajectory_fd: Vec<FieldSample>,
}

impl VectorField {
    pub fn final_state_f(&self) -> &[f64] {
        &self.trajectory_f.last().expect("trajectory is never empty").x
    }

    pub fn final_state_fd(&self) -> &[f64] {
        &self.trajectory_fd.last().expect("trajectory is never empty").x
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(FIELD_CSV_HEADER);
        out.push('\n');
        let mut row = |kind: &str, step: usize, s: &FieldSample| {
            let _ = writeln!(
                out,
                "{kind},{step},{},{},{},{},{},{}",
                s.x[0], s.x[1], s.v_f[0], s.v_f[1], s.v_fd[0], s.v_fd[1]
            );
        };
        for (i, s) in self.samples.iter().enumerate() {
            row("grid", i, s);
        }
        for (i, s) in self.trajectory_f.iter().enumerate() {
            row("traj_f", i, s);
        }
        for (i, s) in self.trajectory_fd.iter().enumerate() {
            row("traj_fd", i, s);
        }
        out
    }
}

fn sample(f: &DynamicsModel, d: &DenoisingPolicy, x: &[f64], dt: f64) -> Result<FieldSample> {
    let fx = f.predict(x)?;
    let (hx, _) = d.refine(x, &fx)?;
    let v = |to: &[f64]| to.iter().zip(x).map(|(a, b)| (a - b) / dt).collect();
    Ok(FieldSample {
        x: x.to_vec(),
        v_f: v(&fx),
        v_fd: v(&hx),
    })
}

/// Evaluates both fields on the grid and integrates one explicit-Euler
/// trajectory from `initial` under each for `steps` steps.
pub fn vector_field_export(
    f: &DynamicsModel,
    d: &DenoisingPolicy,
    grid: FieldGrid,
    dt: f64,
    initial: &[f64],
    steps: usize,
) -> Result<VectorField> {
    if f.state_dim() != 2 {
        return Err(Error::UnsupportedDimension(f.state_dim()));
    }
    if initial.len() != 2 {
        return Err(Error::UnsupportedDimension(initial.len()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if grid.resolution == 0 {
        return Err(Error::InvalidArgument("grid resolution must be at least 1".into()));
    }
    let samples = grid
        .points()
        .iter()
        .map(|x| sample(f, d, x, dt))
        .collect::<Result<Vec<_>>>()?;
    let integrate = |use_fd: bool| -> Result<Vec<FieldSample>> {
        let mut traj = Vec::with_capacity(steps + 1);
        let mut s = sample(f, d, initial, dt)?;
        for _ in 0..steps {
            let v = if use_fd { &s.v_fd } else { &s.v_f };
            let next: Vec<f64> = s.x.iter().zip(v).map(|(x, v)| x + dt * v).collect();
            traj.push(s);
            s = sample(f, d, &next, dt)?;
        }
        traj.push(s);
        Ok(traj)
    };
    Ok(VectorField {
        grid,
        dt,
        samples,
        trajectory_f: integrate(false)?,
        trajectory_fd: integrate(true)?,
    })
}
