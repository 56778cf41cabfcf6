//! Central finite differences for validating analytic gradients.
//!
//! Independent of the model's backward pass by construction: it only calls a
//! caller-supplied scalar function, so agreement between the two is evidence
//! rather than tautology.

/// Central-difference gradient of `f` at `x` with step `h` per coordinate.
pub fn numerical_grad<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Worst-case relative error between two gradient vectors.
///
/// Per component: `|a - b| / max(1e-8, |a|, |b|)`, so agreement near zero is
/// judged absolutely and large components relatively.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_to_fd_accuracy() {
        // f(x) = sum x_i^2 has gradient 2x; central differences are exact
        // for quadratics up to floating-point noise.
        let x = vec![0.3, -1.2, 2.0, 0.0];
        let num = numerical_grad(&x, 1e-5, |v| v.iter().map(|a| a * a).sum());
        let exact: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        assert!(max_rel_err(&num, &exact) < 1e-9);
    }

    #[test]
    fn rel_err_handles_zero_vectors() {
        assert_eq!(max_rel_err(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }
}
