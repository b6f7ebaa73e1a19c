//! Dense symmetric matrices and the cyclic Jacobi eigensolver.
//!
//! Everything downstream (trace functions, gradients, PSD order tests) goes
//! through [`eig_sym`]. Matrices here are small (the solver is intended for
//! `n <= 64`), so all storage is a flat row-major `Vec<f64>`.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigensolver tolerance, measured against the Frobenius norm.
pub const TOL_EIG: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// A real symmetric `n x n` matrix.
///
/// Every constructor symmetrizes its input as `(M + M^T) / 2`, so
/// `get(i, j) == get(j, i)` holds bit-for-bit.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Builds a matrix from row-major entries, symmetrizing them.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidMatrix("dimension must be positive".into()));
        }
        if data.len() != n * n {
            return Err(Error::InvalidMatrix(format!(
                "expected {} entries for n = {n}, found {}",
                n * n,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!("non-finite entry {bad}")));
        }
        let mut m = SymMatrix { n, data };
        m.symmetrize();
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidMatrix("rows must form a square matrix".into()));
        }
        Self::new(n, rows.iter().flatten().copied().collect())
    }

    pub fn zeros(n: usize) -> Self {
        assert!(n > 0, "dimension must be positive");
        SymMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = s;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// The rank-one matrix `v v^T`.
    pub fn outer(v: &[f64]) -> Self {
        let n = v.len();
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = v[i] * v[j];
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.data[i * self.n + i]).sum()
    }

    /// Frobenius inner product `<A, B> = tr(A B)`.
    pub fn inner(&self, other: &SymMatrix) -> f64 {
        assert_eq!(self.n, other.n, "dimension mismatch in inner product");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &SymMatrix, alpha: f64) {
        assert_eq!(self.n, other.n, "dimension mismatch in add_scaled");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, s: f64) -> SymMatrix {
        SymMatrix {
            n: self.n,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn check_dim(&self, other: &SymMatrix) -> Result<()> {
        if self.n != other.n {
            return Err(Error::Shape {
                expected: self.n,
                found: other.n,
            });
        }
        Ok(())
    }

    fn symmetrize(&mut self) {
        let n = self.n;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = avg;
                self.data[j * n + i] = avg;
            }
        }
    }
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.chunks(self.n)).finish()
    }
}

impl From<SymMatrix> for Vec<Vec<f64>> {
    fn from(m: SymMatrix) -> Self {
        m.rows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for SymMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        SymMatrix::from_rows(&rows)
    }
}

impl Add for &SymMatrix {
    type Output = SymMatrix;

    fn add(self, rhs: &SymMatrix) -> SymMatrix {
        let mut out = self.clone();
        out.add_scaled(rhs, 1.0);
        out
    }
}

impl Sub for &SymMatrix {
    type Output = SymMatrix;

    fn sub(self, rhs: &SymMatrix) -> SymMatrix {
        let mut out = self.clone();
        out.add_scaled(rhs, -1.0);
        out
    }
}

impl Mul<f64> for &SymMatrix {
    type Output = SymMatrix;

    fn mul(self, rhs: f64) -> SymMatrix {
        self.scaled(rhs)
    }
}

/// Eigenvalues in non-increasing order together with orthonormal eigenvectors.
#[derive(Clone, Debug)]
pub struct EigenPair {
    pub values: Vec<f64>,
    /// Row-major `n x n`; column `k` is the eigenvector for `values[k]`.
    pub vectors: Vec<f64>,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, k: usize) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| self.vectors[i * n + k]).collect()
    }

    pub fn max(&self) -> f64 {
        self.values[0]
    }

    pub fn min(&self) -> f64 {
        self.values[self.dim() - 1]
    }

    /// `V diag(d) V^T` for an arbitrary diagonal `d`.
    pub fn compose(&self, diag: &[f64]) -> SymMatrix {
        let n = self.dim();
        assert_eq!(diag.len(), n);
        let v = &self.vectors;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..n).map(|k| v[i * n + k] * diag[k] * v[j * n + k]).sum();
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        SymMatrix { n, data }
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.compose(&self.values)
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn eig_sym(m: &SymMatrix) -> Result<EigenPair> {
    if !m.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entries".into()));
    }
    let n = m.n;
    let mut a = m.data.clone();
    let mut v = SymMatrix::identity(n).data;
    let scale = m.frobenius_norm();

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off == 0.0 || off.sqrt() <= f64::EPSILON * 1e-2 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + theta.hypot(1.0))
                };
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&k| a[k * n + k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &k) in order.iter().enumerate() {
        for i in 0..n {
            vectors[i * n + col] = v[i * n + k];
        }
    }
    Ok(EigenPair { values, vectors })
}

pub fn eigenvalues(m: &SymMatrix) -> Result<Vec<f64>> {
    Ok(eig_sym(m)?.values)
}

/// `V diag(f(lambda_i)) V^T`.
pub fn spectral_apply(m: &SymMatrix, f: impl Fn(f64) -> f64) -> Result<SymMatrix> {
    let eig = eig_sym(m)?;
    apply_to_eigen(&eig, f)
}

pub fn apply_to_eigen(eig: &EigenPair, f: impl Fn(f64) -> f64) -> Result<SymMatrix> {
    let mapped = eig
        .values
        .iter()
        .map(|&l| {
            let v = f(l);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Domain(l))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(eig.compose(&mapped))
}

/// `lambda_min(B - A)`: non-negative exactly when `A <= B` in the PSD order.
pub fn psd_order_gap(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    a.check_dim(b)?;
    Ok(eig_sym(&(b - a))?.min())
}

/// Fails with [`Error::NotPsd`] when an eigenvalue sits below `-TOL_EIG * ||M||_F`.
pub fn check_psd(eig: &EigenPair, m: &SymMatrix) -> Result<()> {
    let tol = TOL_EIG * m.frobenius_norm().max(1.0);
    let min_eig = eig.min();
    if min_eig < -tol {
        return Err(Error::NotPsd { min_eig, tol });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_product(a: &SymMatrix, b: &SymMatrix) -> Vec<f64> {
        let n = a.dim();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n).map(|k| a.get(i, k) * b.get(k, j)).sum();
            }
        }
        out
    }

    fn sym_strategy(n: usize) -> impl Strategy<Value = SymMatrix> {
        prop::collection::vec(-5.0f64..5.0, n * n)
            .prop_map(move |d| SymMatrix::new(n, d).unwrap())
    }

    fn orthonormality_error(e: &EigenPair) -> f64 {
        let n = e.dim();
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n).map(|i| e.vectors[i * n + a] * e.vectors[i * n + b]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let e = eig_sym(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        assert!(orthonormality_error(&e) < 1e-14);
    }

    #[test]
    fn diagonal_sorted_descending() {
        let e = eig_sym(&SymMatrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert!((e.vector(0)[1].abs() - 1.0).abs() < 1e-15);
        assert!((e.vector(1)[0].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_matches_quadratic_formula() {
        let cases = [(1.3, -0.4, 2.7), (0.0, 1.0, 0.0), (-2.0, 1e-3, 5.0), (4.0, 4.0, 4.0)];
        for (a, b, d) in cases {
            let m = SymMatrix::from_rows(&[vec![a, b], vec![b, d]]).unwrap();
            let e = eig_sym(&m).unwrap();
            let mean = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            assert!((e.values[0] - (mean + rad)).abs() <= 1e-10);
            assert!((e.values[1] - (mean - rad)).abs() <= 1e-10);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            SymMatrix::new(2, vec![1.0, f64::NAN, 0.0, 1.0]),
            Err(Error::InvalidMatrix(_))
        ));
        let bad = SymMatrix {
            n: 1,
            data: vec![f64::INFINITY],
        };
        assert!(matches!(eig_sym(&bad), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn apply_log1p() {
        let ln2 = 2f64.ln();
        let out = spectral_apply(&SymMatrix::identity(2), |u| u.ln_1p()).unwrap();
        assert!((&out - &SymMatrix::scaled_identity(2, ln2)).max_abs() < 1e-15);
        let out = spectral_apply(&SymMatrix::diag(&[3.0, 1.0]), |u| u.ln_1p()).unwrap();
        assert!((&out - &SymMatrix::diag(&[4f64.ln(), ln2])).max_abs() < 1e-15);
    }

    #[test]
    fn apply_square_matches_product() {
        let b = SymMatrix::from_rows(&[
            vec![1.0, 0.3, -0.2],
            vec![0.7, -1.1, 0.4],
            vec![0.05, 0.9, 1.3],
        ])
        .unwrap();
        let psd = SymMatrix::new(3, dense_product(&b, &b)).unwrap();
        let sq = spectral_apply(&psd, |u| u * u).unwrap();
        let direct = dense_product(&psd, &psd);
        for (x, y) in sq.as_slice().iter().zip(&direct) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn undefined_function_reports_domain() {
        let m = SymMatrix::diag(&[1.0, -1.0]);
        assert!(matches!(spectral_apply(&m, |u| u.ln()), Err(Error::Domain(_))));
    }

    #[test]
    fn order_gap_cases() {
        let z = SymMatrix::zeros(3);
        let i = SymMatrix::identity(3);
        assert!((psd_order_gap(&z, &i).unwrap() - 1.0).abs() < 1e-15);
        assert!((psd_order_gap(&i, &z).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            psd_order_gap(&z, &SymMatrix::identity(2)),
            Err(Error::Shape { .. })
        ));
        let a = SymMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, -1.0]]).unwrap();
        let mut b = a.clone();
        b.add_scaled(&SymMatrix::outer(&[0.3, -1.7]), 1.0);
        assert!(psd_order_gap(&a, &b).unwrap() >= -1e-12);
    }

    #[test]
    fn serde_rows_roundtrip() {
        let m = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 5.0]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[1.0,2.0],[2.0,5.0]]");
        let back: SymMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<SymMatrix>("[[1.0,2.0]]").is_err());
    }

    proptest! {
        #[test]
        fn reconstruction_and_orthonormality(m in (1usize..7).prop_flat_map(sym_strategy)) {
            let e = eig_sym(&m).unwrap();
            let tol = TOL_EIG * m.frobenius_norm().max(1.0);
            prop_assert!((&e.reconstruct() - &m).max_abs() <= tol);
            prop_assert!(orthonormality_error(&e) <= 1e-10);
            prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn identity_map_and_trace(m in (1usize..6).prop_flat_map(sym_strategy)) {
            let tol = TOL_EIG * m.frobenius_norm().max(1.0);
            let same = spectral_apply(&m, |u| u).unwrap();
            prop_assert!((&same - &m).max_abs() <= tol);
            let f = |u: f64| u.sin() + 0.5 * u * u;
            let applied = spectral_apply(&m, f).unwrap();
            let direct: f64 = eigenvalues(&m).unwrap().into_iter().map(f).sum();
            prop_assert!((applied.trace() - direct).abs() <= 1e3 * tol);
        }

        #[test]
        fn shift_moves_every_eigenvalue(m in (1usize..6).prop_flat_map(sym_strategy), eps in -3.0f64..3.0) {
            let n = m.dim();
            let shifted = &m + &SymMatrix::scaled_identity(n, eps);
            let a = eigenvalues(&m).unwrap();
            let b = eigenvalues(&shifted).unwrap();
            let tol = TOL_EIG * shifted.frobenius_norm().max(1.0);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x + eps - y).abs() <= tol);
            }
        }

        #[test]
        fn applied_function_commutes(m in (2usize..5).prop_flat_map(sym_strategy)) {
            let f = spectral_apply(&m, |u| (-u).exp()).unwrap();
            let fm = dense_product(&f, &m);
            let mf = dense_product(&m, &f);
            let scale = f.frobenius_norm().max(1.0) * m.frobenius_norm().max(1.0);
            for (x, y) in fm.iter().zip(&mf) {
                prop_assert!((x - y).abs() <= TOL_EIG * scale);
            }
        }
    }
}
