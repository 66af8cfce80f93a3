//! Squared-error loss: `||pred - target||^2` per sample, no averaging over
//! dimensions. Batch losses are means of this per-sample value.

use crate::error::{check_len, Result};

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("mse target", pred.len(), target.len())?;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            loss += r * r;
            2.0 * r
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coincident_vectors() {
        let (l, g) = mse_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn unit_displacement() {
        let (l, g) = mse_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, vec![2.0, 0.0]);
    }

    #[test]
    fn three_four_five() {
        let (l, g) = mse_loss(&[0.3, -0.4], &[0.0, 0.0]).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }
}
