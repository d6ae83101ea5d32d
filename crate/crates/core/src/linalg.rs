//! Small dense kernels on row-major `d x d` slices.
//!
//! State dimensions here are tiny (1 to 5), so these run inside the per-node
//! hot loops without allocating.

use crate::error::{Error, Result};

/// Solves `L y = b` in place for lower-triangular row-major `L`.
pub fn solve_lower_in_place(l: &[f64], d: usize, b: &mut [f64]) -> Result<()> {
    for i in 0..d {
        let mut acc = b[i];
        for j in 0..i {
            acc -= l[i * d + j] * b[j];
        }
        let diag = l[i * d + i];
        if diag == 0.0 || !diag.is_finite() {
            return Err(Error::LinearAlgebra(format!(
                "singular triangular factor (diagonal {i} = {diag})"
            )));
        }
        b[i] = acc / diag;
    }
    Ok(())
}

/// Solves `L^T y = b` in place for lower-triangular row-major `L`.
pub fn solve_lower_transpose_in_place(l: &[f64], d: usize, b: &mut [f64]) -> Result<()> {
    for i in (0..d).rev() {
        let mut acc = b[i];
        for j in i + 1..d {
            acc -= l[j * d + i] * b[j];
        }
        let diag = l[i * d + i];
        if diag == 0.0 || !diag.is_finite() {
            return Err(Error::LinearAlgebra(format!(
                "singular triangular factor (diagonal {i} = {diag})"
            )));
        }
        b[i] = acc / diag;
    }
    Ok(())
}

/// `v^T (L L^T)^{-1} v`, i.e. `|L^{-1} v|^2`. `scratch` must hold `d` values.
pub fn mahalanobis_sq(l: &[f64], d: usize, v: &[f64], scratch: &mut [f64]) -> Result<f64> {
    scratch[..d].copy_from_slice(&v[..d]);
    solve_lower_in_place(l, d, &mut scratch[..d])?;
    Ok(scratch[..d].iter().map(|z| z * z).sum())
}

/// Cholesky factor of a symmetric positive-definite row-major matrix, written
/// into `out` (lower triangle, zeros above).
pub fn cholesky_into(a: &[f64], d: usize, out: &mut [f64]) -> Result<()> {
    out[..d * d].iter_mut().for_each(|v| *v = 0.0);
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= out[i * d + k] * out[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::LinearAlgebra(format!(
                        "matrix is not positive definite (pivot {i} = {s})"
                    )));
                }
                out[i * d + i] = s.sqrt();
            } else {
                out[i * d + j] = s / out[j * d + j];
            }
        }
    }
    Ok(())
}

/// `out = L L^T` for lower-triangular row-major `L`.
pub fn gram_lower(l: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..=i.min(j) {
                s += l[i * d + k] * l[j * d + k];
            }
            out[i * d + j] = s;
        }
    }
}

/// `out = A v` for row-major `d x d` `A`.
pub fn mat_vec(a: &[f64], d: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..d {
        out[i] = (0..d).map(|j| a[i * d + j] * v[j]).sum();
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &[f64], d: usize) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(d, d, a);
    m.symmetric_eigenvalues().min()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_round_trip() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let mut l = [0.0; 9];
        cholesky_into(&a, 3, &mut l).unwrap();
        let mut back = [0.0; 9];
        gram_lower(&l, 3, &mut back);
        for (x, y) in a.iter().zip(back.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn triangular_solves_invert_each_other() {
        let l = [2.0, 0.0, 0.5, 1.5];
        let mut b = [1.0, -2.0];
        solve_lower_in_place(&l, 2, &mut b).unwrap();
        // L b should give back the rhs.
        assert!((2.0 * b[0] - 1.0).abs() < 1e-15);
        assert!((0.5 * b[0] + 1.5 * b[1] + 2.0).abs() < 1e-15);

        let mut c = [1.0, -2.0];
        solve_lower_transpose_in_place(&l, 2, &mut c).unwrap();
        assert!((2.0 * c[0] + 0.5 * c[1] - 1.0).abs() < 1e-15);
        assert!((1.5 * c[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn not_positive_definite_is_reported() {
        let a = [1.0, 2.0, 2.0, 1.0];
        let mut l = [0.0; 4];
        assert!(matches!(
            cholesky_into(&a, 2, &mut l),
            Err(Error::LinearAlgebra(_))
        ));
    }

    #[test]
    fn singular_factor_is_reported() {
        let l = [1.0, 0.0, 3.0, 0.0];
        let mut b = [1.0, 1.0];
        assert!(solve_lower_in_place(&l, 2, &mut b).is_err());
    }
}
