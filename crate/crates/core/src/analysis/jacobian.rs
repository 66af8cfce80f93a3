//! Finite-difference Jacobians and the composite-map decomposition.
//!
//! All Jacobians of learned models are taken in normalized coordinates,
//! where the networks live.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::matrix_rows;
use crate::error::{Error, Result};
use crate::models::{DenoisingPolicy, DynamicsModel};
use crate::net::NetParams;
use crate::seed::rng_for;

/// Central-difference Jacobian; column `j` is
/// `(fun(x + eps e_j) - fun(x - eps e_j)) / (2 eps)`.
pub fn fd_jacobian<F>(fun: F, x: &[f64], eps: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut columns = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + eps;
        let plus = fun(&probe)?;
        probe[j] = x[j] - eps;
        let minus = fun(&probe)?;
        probe[j] = x[j];
        let col: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * eps)).collect();
        if !col.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("finite-difference column {j} is not finite")));
        }
        columns.push(DVector::from_vec(col));
    }
    if columns.is_empty() {
        return Ok(DMatrix::zeros(fun(x)?.len(), 0));
    }
    Ok(DMatrix::from_columns(&columns))
}

/// Exact Jacobian of a network from its reverse pass, one output row at a
/// time.
pub fn analytic_jacobian(net: &NetParams, x: &[f64]) -> Result<DMatrix<f64>> {
    let m = net.output_dim();
    let mut jac = DMatrix::zeros(m, x.len());
    for i in 0..m {
        let mut seed = vec![0.0; m];
        seed[i] = 1.0;
        let (_, row) = net.backward(x, &seed)?;
        for (j, v) in row.into_iter().enumerate() {
            jac[(i, j)] = v;
        }
    }
    Ok(jac)
}

/// Largest singular value via power iteration on `J^T J`.
pub fn operator_norm(jac: &DMatrix<f64>, iterations: usize) -> f64 {
    if jac.ncols() == 0 || jac.nrows() == 0 {
        return 0.0;
    }
    let gram = jac.transpose() * jac;
    let mut v = DVector::from_element(jac.ncols(), 1.0 / (jac.ncols() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda.max(0.0).sqrt()
}

/// The learned maps in normalized coordinates.
pub(crate) struct NormalizedMaps<'a> {
    pub f: &'a DynamicsModel,
    pub d: &'a DenoisingPolicy,
}

impl NormalizedMaps<'_> {
    pub fn f(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.f.predict_normalized(x)
    }

    pub fn g(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.d.state_head_normalized(x, y)
    }

    /// `h(x) = g(x, f(x))`.
    pub fn h(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.g(x, &self.f(x)?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct JacobianReport {
    /// Probe state, raw units.
    pub probe_state: Vec<f64>,
    #[serde(serialize_with = "matrix_rows")]
    pub j_f: DMatrix<f64>,
    #[serde(serialize_with = "matrix_rows")]
    pub j_gx: DMatrix<f64>,
    #[serde(serialize_with = "matrix_rows")]
    pub j_gy: DMatrix<f64>,
    #[serde(serialize_with = "matrix_rows")]
    pub j_h: DMatrix<f64>,
    pub fro_norms: BTreeMap<String, f64>,
    /// `||J_h - (J_gx + J_gy J_f)||_F`.
    pub chain_rule_residual: f64,
}

impl JacobianReport {
    /// Tolerance `1e-4 * (1 + ||J_h||_F)` used for smooth networks.
    pub fn residual_tolerance(&self) -> f64 {
        1e-4 * (1.0 + self.j_h.norm())
    }

    pub fn chain_rule_holds(&self) -> bool {
        self.chain_rule_residual.is_finite() && self.chain_rule_residual < self.residual_tolerance()
    }
}

/// Finite-difference `J_f`, `J_gx`, `J_gy` (at `(x, f(x))`) and `J_h` of
/// `h(x) = g(x, f(x))`, plus the chain-rule residual, at the raw state `x`.
pub fn composite_jacobians(f: &DynamicsModel, d: &DenoisingPolicy, x: &[f64], eps: f64) -> Result<JacobianReport> {
    let maps = NormalizedMaps { f, d };
    let xn = f.stats.normalize_state(x)?;
    let y0 = maps.f(&xn)?;
    let j_f = fd_jacobian(|v| maps.f(v), &xn, eps)?;
    let j_gx = fd_jacobian(|v| maps.g(v, &y0), &xn, eps)?;
    let j_gy = fd_jacobian(|v| maps.g(&xn, v), &y0, eps)?;
    let j_h = fd_jacobian(|v| maps.h(v), &xn, eps)?;
    let composed = &j_gx + &j_gy * &j_f;
    let chain_rule_residual = (&j_h - &composed).norm();
    let fro_norms = [
        ("J_f", j_f.norm()),
        ("J_gx", j_gx.norm()),
        ("J_gy", j_gy.norm()),
        ("J_h", j_h.norm()),
        ("J_gx + J_gy J_f", composed.norm()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(JacobianReport {
        probe_state: x.to_vec(),
        j_f,
        j_gx,
        j_gy,
        j_h,
        fro_norms,
        chain_rule_residual,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearizationReport {
    /// Raw probe state.
    pub probe_state: Vec<f64>,
    /// Perturbation norms tried, normalized units.
    pub radii: Vec<f64>,
    /// `||h(x + e) - h(x) - J_h e|| / ||e||^2` for each radius.
    pub ratios: Vec<f64>,
    /// Estimated constant `C`: the largest ratio.
    pub constant: f64,
}

/// Measures how well `e_{t+1} ≈ J_h e_t` holds around `x`: random directions
/// (stream `linearization` of `seed`) scaled to each radius.
pub fn linearization_check(
    f: &DynamicsModel,
    d: &DenoisingPolicy,
    x: &[f64],
    radii: &[f64],
    eps: f64,
    seed: u64,
) -> Result<LinearizationReport> {
    use rand_distr::{Distribution, StandardNormal};
    let maps = NormalizedMaps { f, d };
    let xn = f.stats.normalize_state(x)?;
    let h0 = DVector::from_vec(maps.h(&xn)?);
    let j_h = fd_jacobian(|v| maps.h(v), &xn, eps)?;
    let mut rng = rng_for(seed, "linearization");
    let mut ratios = Vec::with_capacity(radii.len());
    for &r in radii {
        let dir = DVector::from_fn(xn.len(), |_, _| StandardNormal.sample(&mut rng));
        let e = dir.normalize() * r;
        let moved: Vec<f64> = xn.iter().zip(e.iter()).map(|(a, b)| a + b).collect();
        let h1 = DVector::from_vec(maps.h(&moved)?);
        let remainder = h1 - &h0 - &j_h * &e;
        ratios.push(remainder.norm() / (r * r));
    }
    let constant = ratios.iter().copied().fold(0.0, f64::max);
    Ok(LinearizationReport {
        probe_state: x.to_vec(),
        radii: radii.to_vec(),
        ratios,
        constant,
    })
}
