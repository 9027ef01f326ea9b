//! Multidimensional conventions.
//!
//! A `VecD` is an element of `(R^d)^n` (rows `z^i in R^d`), a `MatD` an element of
//! `(R^d)^{n x n}` (entries `A^i_j in R^d`). The only products are
//! `(A z)_i = sum_j A^i_j . z^j`, `(A dB)^i_j = A^i_j . dB` and
//! `(A^2)^i_j = sum_k A^i_k . A^k_j`, all contracting over `R^d`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecD {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatD {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl VecD {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { n, d, data: vec![0.0; n * d] }
    }

    /// Rows given as `n` slices of length `d`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(LabError::Shape("VecD rows must be non-empty and of equal length".into()));
        }
        Ok(Self { n, d, data: rows.concat() })
    }

    pub fn from_flat(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(LabError::Shape(format!("VecD {n}x{d} needs {} entries, got {}", n * d, data.len())));
        }
        Ok(Self { n, d, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Euclidean norm over all `n * d` entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl MatD {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { n, d, data: vec![0.0; n * n * d] }
    }

    pub fn from_flat(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n * d {
            return Err(LabError::Shape(format!(
                "MatD {n}x{n}x{d} needs {} entries, got {}",
                n * n * d,
                data.len()
            )));
        }
        Ok(Self { n, d, data })
    }

    /// Plain `n x n` matrix embedded with `d = 1`.
    pub fn from_plain(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(LabError::Shape("plain matrix must be square and non-empty".into()));
        }
        Ok(Self { n, d: 1, data: rows.concat() })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.n + j) * self.d;
        &self.data[base..base + self.d]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `(A z)_i = sum_j A^i_j . z^j`.
pub fn contract_az(a: &MatD, z: &VecD) -> Result<Vec<f64>> {
    if a.n != z.n || a.d != z.d {
        return Err(LabError::Shape(format!(
            "cannot contract A in (R^{})^{{{}x{}}} with z in (R^{})^{}",
            a.d, a.n, a.n, z.d, z.n
        )));
    }
    let mut out = vec![0.0; a.n];
    contract_into(&a.data, &z.data, a.n, a.d, &mut out);
    Ok(out)
}

/// Raw form of [`contract_az`] on flat buffers; `out` is overwritten.
#[inline]
pub fn contract_into(a: &[f64], z: &[f64], n: usize, d: usize, out: &mut [f64]) {
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            let aij = &a[(i * n + j) * d..(i * n + j + 1) * d];
            let zj = &z[j * d..(j + 1) * d];
            for c in 0..d {
                s += aij[c] * zj[c];
            }
        }
        out[i] = s;
    }
}

/// Plain matrix `(A dB)^i_j = A^i_j . dB` (row-major `n x n`).
#[inline]
pub fn contract_increment(a: &[f64], db: &[f64], n: usize, d: usize, out: &mut [f64]) {
    for ij in 0..n * n {
        let e = &a[ij * d..(ij + 1) * d];
        out[ij] = e.iter().zip(db).map(|(x, y)| x * y).sum();
    }
}

/// Plain matrix `(A^2)^i_j = sum_k A^i_k . A^k_j`.
#[inline]
pub fn contracted_square(a: &[f64], n: usize, d: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                let x = &a[(i * n + k) * d..(i * n + k + 1) * d];
                let y = &a[(k * n + j) * d..(k * n + j + 1) * d];
                s += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            }
            out[i * n + j] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_scalar_contraction() {
        let a = MatD::from_plain(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let z = VecD::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(contract_az(&a, &z).unwrap(), vec![17.0, 39.0]);
    }

    #[test]
    fn zero_matrix_gives_zero() {
        let a = MatD::zeros(3, 2);
        let z = VecD::from_flat(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(contract_az(&a, &z).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn orthogonal_rows_contract_to_zero() {
        let a = MatD::from_flat(1, 2, vec![1.0, 0.0]).unwrap();
        let z = VecD::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(contract_az(&a, &z).unwrap(), vec![0.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = MatD::zeros(2, 1);
        let z = VecD::zeros(3, 1);
        assert!(contract_az(&a, &z).is_err());
        let z = VecD::zeros(2, 2);
        assert!(contract_az(&a, &z).is_err());
    }

    #[test]
    fn square_of_rotation_generator() {
        // J = [[0,1],[-1,0]] squares to -I.
        let j = [0.0, 1.0, -1.0, 0.0];
        let mut out = [0.0; 4];
        contracted_square(&j, 2, 1, &mut out);
        assert_eq!(out, [-1.0, 0.0, 0.0, -1.0]);
    }
}
