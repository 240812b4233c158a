use crate::error::{Error, Result};

/// Heavy-ball momentum: `v ← m·v − lr·g`, then `θ ← θ + v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    velocity: &mut [f64],
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::DimensionMismatch {
            what: "sgd state",
            expected: params.len(),
            got: grads.len().min(velocity.len()),
        });
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.0, 0.0], 0.1, 0.9, &mut v).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn no_momentum_is_plain_descent() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[2.0], 0.25, 0.0, &mut v).unwrap();
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn two_momentum_steps() {
        let g = 0.7;
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        for _ in 0..2 {
            sgd_step(&mut p, &[g], 1.0, 0.9, &mut v).unwrap();
        }
        assert!((p[0] + g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        assert!(sgd_step(&mut p, &[1.0], 1.0, 0.0, &mut v).is_err());
    }
}
