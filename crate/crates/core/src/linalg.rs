//! Small dense row-major matrix helpers (n <= 8 in practice).

use nalgebra::DMatrix;

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// `out = a * b`.
#[inline]
pub fn matmul(a: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * b[k * n + j];
            }
            out[i * n + j] = s;
        }
    }
}

/// `out = a * v`.
#[inline]
pub fn matvec(a: &[f64], v: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        out[i] = (0..n).map(|j| a[i * n + j] * v[j]).sum();
    }
}

/// Operator (spectral) norm: largest singular value.
pub fn op_norm(a: &[f64], n: usize) -> f64 {
    match n {
        1 => a[0].abs(),
        2 => {
            let f = a.iter().map(|v| v * v).sum::<f64>();
            let det = a[0] * a[3] - a[1] * a[2];
            let disc = (f * f - 4.0 * det * det).max(0.0).sqrt();
            ((f + disc) / 2.0).sqrt()
        }
        _ => DMatrix::from_row_slice(n, n, a).singular_values().max(),
    }
}

/// Inverse via LU, `None` when singular or badly conditioned.
pub fn inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    if n == 1 {
        return (a[0].abs() > 1e-300).then(|| vec![1.0 / a[0]]);
    }
    let m = DMatrix::from_row_slice(n, n, a);
    let inv = m.try_inverse()?;
    if inv.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(inv.transpose().as_slice().to_vec())
}

/// `|a - I|` in operator norm.
pub fn distance_from_identity(a: &[f64], n: usize) -> f64 {
    let mut d = a.to_vec();
    for i in 0..n {
        d[i * n + i] -= 1.0;
    }
    op_norm(&d, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn inverse_round_trip() {
        let a = [2.0, 1.0, 0.5, 3.0];
        let inv = inverse(&a, 2).unwrap();
        let mut p = [0.0; 4];
        matmul(&a, &inv, 2, &mut p);
        assert_abs_diff_eq!(distance_from_identity(&p, 2), 0.0, epsilon = 1e-12);
        assert!(inverse(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    #[test]
    fn op_norm_of_diagonal() {
        assert_abs_diff_eq!(op_norm(&[3.0, 0.0, 0.0, -5.0], 2), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(op_norm(&[-2.0], 1), 2.0);
    }

    #[test]
    fn op_norm_two_by_two_matches_svd() {
        let a = [1.0, 2.0, -0.5, 0.3];
        let svd = DMatrix::from_row_slice(2, 2, &a).singular_values().max();
        assert_abs_diff_eq!(op_norm(&a, 2), svd, epsilon = 1e-12);
    }

    #[test]
    fn op_norm_of_rotation_times_scalar() {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        assert_abs_diff_eq!(op_norm(&[2.0 * c, 2.0 * s, -2.0 * s, 2.0 * c], 2), 2.0, epsilon = 1e-12);
    }
}
