//! Numerical checks of the contraction argument: finite-difference
//! Jacobians, the denoising-loss quadratic law, sensitivity ratios, the
//! environment error bound and vector-field export.

mod audit;
mod field;
mod jacobian;
mod sensitivity;

use nalgebra::DMatrix;
use serde::Serializer;

pub use audit::{
    action_lipschitz, bound_check, error_bound_audit, jacobian_norm_audit, linear_denoiser, quadratic_loss_check,
    BoundSample, ErrorBoundReport, JacobianNormAudit, QuadraticLossReport,
};
pub use field::{vector_field_export, FieldGrid, VectorField, FIELD_CSV_HEADER};
pub use jacobian::{
    analytic_jacobian, composite_jacobians, fd_jacobian, linearization_check, operator_norm, JacobianReport,
    LinearizationReport,
};
pub use sensitivity::{sensitivity_ratio, SensitivityRecord};

/// Default finite-difference step.
pub const DEFAULT_FD_EPS: f64 = 1e-4;

/// Serializes a matrix as a list of rows.
pub(crate) fn matrix_rows<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for r in 0..m.nrows() {
        let row: Vec<f64> = m.row(r).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

/// Linear-interpolated percentile, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Indices of `n_probe` transitions spread evenly over `len`.
pub(crate) fn probe_indices(len: usize, n_probe: usize) -> Vec<usize> {
    let n = n_probe.min(len);
    (0..n).map(|i| i * len / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 5.0);
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert!((percentile(&v, 0.95) - 4.8).abs() < 1e-12);
    }

    #[test]
    fn probes_are_spread() {
        assert_eq!(probe_indices(10, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(probe_indices(3, 5), vec![0, 1, 2]);
    }
}
