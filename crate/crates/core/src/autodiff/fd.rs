use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference along coordinate {i} gave ({plus}, {minus})"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let g = fd_gradient(|x: &[f64]| x[0] * x[1], &[2.0, 3.0], 1e-6).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = fd_gradient(|_: &[f64]| 4.2, &[1.0, -1.0, 0.5], 1e-6).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        assert!(fd_gradient(|x: &[f64]| x[0], &[1.0], 0.0).is_err());
        assert!(matches!(
            fd_gradient(|x: &[f64]| (x[0] - 1.0).ln(), &[1.0], 1e-6),
            Err(Error::NonFinite(_))
        ));
    }
}
