//! Least-squares conditional expectations on polynomial bases.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{LabError, Result};

/// Largest tolerated ratio of extreme Gram eigenvalues before the degree is lowered.
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone)]
struct RegimeFit {
    rows: Vec<usize>,
    /// Per-row basis values, `rows.len() x p`.
    design: Vec<f64>,
    p: usize,
    /// Pseudo-inverse of the normalized Gram matrix `X^T X / N`.
    gram_inv: Vec<f64>,
    degree: usize,
}

/// Projection onto polynomials (total degree `<= degree`) of standardized features,
/// fitted separately within each regime label.
#[derive(Debug, Clone)]
pub struct ConditionalProjector {
    len: usize,
    fits: Vec<RegimeFit>,
    warnings: Vec<String>,
}

/// One fitted target column.
#[derive(Debug, Clone)]
pub struct ColumnFit {
    pub fitted: Vec<f64>,
    /// Residual variance per regime (indexed like the projector's regimes).
    residual_var: Vec<f64>,
}

fn monomials(dims: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; dims]];
    for total in 1..=degree {
        let mut cur = vec![0; dims];
        fill(&mut out, &mut cur, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    if cur.is_empty() {
        return;
    }
    for v in (0..=left).rev() {
        cur[pos] = v;
        fill(out, cur, pos + 1, left - v);
    }
    cur[pos] = 0;
}

impl ConditionalProjector {
    /// `features` is `len x dim` row-major; `regimes` optionally labels each row.
    pub fn new(features: &[f64], dim: usize, regimes: Option<&[usize]>, degree: usize) -> Result<Self> {
        if dim == 0 && !features.is_empty() {
            return Err(LabError::Shape("feature dimension 0 with non-empty features".into()));
        }
        let len = if dim == 0 {
            regimes.map_or(0, <[usize]>::len)
        } else {
            features.len() / dim
        };
        if len == 0 {
            return Err(LabError::Empty);
        }
        let labels: Vec<usize> = match regimes {
            Some(r) if r.len() != len => {
                return Err(LabError::Shape("regime labels do not match feature rows".into()))
            }
            Some(r) => r.to_vec(),
            None => vec![0; len],
        };
        let n_regimes = labels.iter().copied().max().unwrap_or(0) + 1;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_regimes];
        for (i, &l) in labels.iter().enumerate() {
            groups[l].push(i);
        }
        let mut fits = Vec::new();
        let mut warnings = Vec::new();
        for rows in groups.into_iter().filter(|g| !g.is_empty()) {
            let (fit, warn) = fit_regime(features, dim, rows, degree);
            if let Some(w) = warn {
                warnings.push(w);
            }
            fits.push(fit);
        }
        Ok(Self { len, fits, warnings })
    }

    /// Conditioning on nothing: every projection is the sample mean.
    pub fn constant(len: usize) -> Result<Self> {
        Self::new(&[], 0, Some(&vec![0; len]), 0)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Smallest degree actually used over all regimes.
    pub fn effective_degree(&self) -> usize {
        self.fits.iter().map(|f| f.degree).min().unwrap_or(0)
    }

    /// Projects `width` interleaved target columns (`len x width` row-major).
    pub fn project(&self, targets: &[f64], width: usize) -> Vec<f64> {
        assert_eq!(targets.len(), self.len * width, "target buffer has wrong length");
        let mut out = vec![0.0; targets.len()];
        for fit in &self.fits {
            let coefs: Vec<Vec<f64>> = (0..width).map(|c| fit.coefficients(targets, width, c)).collect();
            let p = fit.p;
            let vals: Vec<(usize, Vec<f64>)> = fit
                .rows
                .par_iter()
                .enumerate()
                .map(|(r, &row)| {
                    let x = &fit.design[r * p..(r + 1) * p];
                    let v = coefs
                        .iter()
                        .map(|b| x.iter().zip(b).map(|(u, w)| u * w).sum())
                        .collect();
                    (row, v)
                })
                .collect();
            for (row, v) in vals {
                out[row * width..(row + 1) * width].copy_from_slice(&v);
            }
        }
        out
    }

    /// Single column fit with residual variances for prediction error bars.
    pub fn fit_column(&self, target: &[f64]) -> ColumnFit {
        let fitted = self.project(target, 1);
        let residual_var = self
            .fits
            .iter()
            .map(|f| {
                let nr = f.rows.len();
                if nr <= f.p {
                    return 0.0;
                }
                let ss: f64 = f.rows.iter().map(|&r| (target[r] - fitted[r]).powi(2)).sum();
                ss / (nr - f.p) as f64
            })
            .collect();
        ColumnFit { fitted, residual_var }
    }

    /// Standard error of the fitted conditional mean at `row`.
    pub fn prediction_se(&self, fit: &ColumnFit, row: usize) -> f64 {
        for (g, f) in self.fits.iter().enumerate() {
            if let Some(r) = f.rows.iter().position(|&x| x == row) {
                let p = f.p;
                let x = &f.design[r * p..(r + 1) * p];
                let mut q = 0.0;
                for i in 0..p {
                    for j in 0..p {
                        q += x[i] * f.gram_inv[i * p + j] * x[j];
                    }
                }
                return (fit.residual_var[g] * q.max(0.0) / f.rows.len() as f64).sqrt();
            }
        }
        0.0
    }
}

impl RegimeFit {
    fn coefficients(&self, targets: &[f64], width: usize, col: usize) -> Vec<f64> {
        let p = self.p;
        let nr = self.rows.len() as f64;
        let mut xty = vec![0.0; p];
        for (r, &row) in self.rows.iter().enumerate() {
            let y = targets[row * width + col];
            let x = &self.design[r * p..(r + 1) * p];
            for i in 0..p {
                xty[i] += x[i] * y;
            }
        }
        (0..p)
            .map(|i| (0..p).map(|j| self.gram_inv[i * p + j] * xty[j] / nr).sum())
            .collect()
    }
}

fn fit_regime(features: &[f64], dim: usize, rows: Vec<usize>, degree: usize) -> (RegimeFit, Option<String>) {
    let nr = rows.len();
    // Standardize; constant coordinates drop out.
    let mut active = Vec::new();
    let mut center = Vec::new();
    let mut scale = Vec::new();
    for a in 0..dim {
        let mean = rows.iter().map(|&r| features[r * dim + a]).sum::<f64>() / nr as f64;
        let var = rows.iter().map(|&r| (features[r * dim + a] - mean).powi(2)).sum::<f64>() / nr as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * (1.0 + mean.abs()) {
            active.push(a);
            center.push(mean);
            scale.push(sd);
        }
    }
    let requested = if active.is_empty() { 0 } else { degree };
    let mut warning = None;
    let mut deg = requested;
    loop {
        let exps = monomials(active.len(), deg);
        let p = exps.len();
        if p > nr && deg > 0 {
            deg -= 1;
            continue;
        }
        let mut design = vec![0.0; nr * p];
        design.par_chunks_mut(p).zip(rows.par_iter()).for_each(|(out, &r)| {
            let z: Vec<f64> = active
                .iter()
                .enumerate()
                .map(|(c, &a)| (features[r * dim + a] - center[c]) / scale[c])
                .collect();
            for (slot, e) in out.iter_mut().zip(&exps) {
                *slot = e.iter().zip(&z).map(|(&k, &v)| v.powi(k as i32)).product();
            }
        });
        let mut gram = DMatrix::<f64>::zeros(p, p);
        for r in 0..nr {
            let x = &design[r * p..(r + 1) * p];
            for i in 0..p {
                for j in i..p {
                    gram[(i, j)] += x[i] * x[j];
                }
            }
        }
        for i in 0..p {
            for j in i..p {
                let v = gram[(i, j)] / nr as f64;
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(gram);
        let max_ev = eig.eigenvalues.max();
        let min_ev = eig.eigenvalues.min();
        if deg > 0 && (min_ev <= 0.0 || max_ev / min_ev > MAX_CONDITION) {
            deg -= 1;
            continue;
        }
        let mut inv = DMatrix::<f64>::zeros(p, p);
        for (k, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev > max_ev * 1e-14 {
                let v = eig.eigenvectors.column(k);
                inv += (v * v.transpose()) / ev;
            }
        }
        if deg < requested {
            warning = Some(format!(
                "rank-deficient regression: basis degree lowered from {requested} to {deg} on a regime of {nr} rows"
            ));
        }
        let gram_inv = (0..p * p).map(|ij| inv[(ij / p, ij % p)]).collect();
        return (
            RegimeFit {
                rows,
                design,
                p,
                gram_inv,
                degree: deg,
            },
            warning,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 3).len(), 4);
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(0, 3).len(), 1);
    }

    #[test]
    fn reproduces_polynomials_exactly() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 10.0 - 2.5).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * v - 0.5 * v * v).collect();
        let proj = ConditionalProjector::new(&x, 1, None, 3).unwrap();
        let f = proj.project(&y, 1);
        for (a, b) in f.iter().zip(&y) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn constant_features_reduce_to_mean() {
        let x = vec![0.0; 10];
        let y: Vec<f64> = (0..10).map(f64::from).collect();
        let proj = ConditionalProjector::new(&x, 1, None, 3).unwrap();
        let f = proj.project(&y, 1);
        assert!(f.iter().all(|v| (v - 4.5).abs() < 1e-12));
    }

    #[test]
    fn regimes_fit_separately() {
        let x: Vec<f64> = (0..20).map(|i| (i % 10) as f64).collect();
        let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let y: Vec<f64> = (0..20).map(|i| if i < 10 { 1.0 } else { 5.0 }).collect();
        let proj = ConditionalProjector::new(&x, 1, Some(&labels), 1).unwrap();
        let f = proj.project(&y, 1);
        assert_abs_diff_eq!(f[3], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(f[13], 5.0, epsilon = 1e-10);
    }

    #[test]
    fn degree_is_lowered_when_rows_are_scarce() {
        let x = vec![0.0, 1.0, 2.0];
        let proj = ConditionalProjector::new(&x, 1, None, 5).unwrap();
        assert!(proj.effective_degree() <= 2);
        assert!(!proj.warnings().is_empty());
    }
}
