//! Symmetric matrices on the positive-semidefinite cone.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Relative PSD tolerance applied to the smallest eigenvalue.
pub const PSD_REL_TOL: f64 = 1e-9;
const PSD_ABS_TOL: f64 = 1e-13;

/// A symmetric positive-semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    m: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PsdOrdering {
    LessEq,
    GreaterEq,
    Equal,
    Incomparable,
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl CovMatrix {
    /// Symmetrizes `m` and checks it lies in the PSD cone.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "covariance must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite covariance entry".into()));
        }
        let m = symmetrize(&m);
        if m.nrows() > 0 {
            let lo = SymmetricEigen::new(m.clone()).eigenvalues.min();
            let tol = PSD_REL_TOL * m.trace().abs() + PSD_ABS_TOL;
            if lo < -tol {
                return Err(Error::NotPsd { min_eig: lo });
            }
        }
        Ok(Self { m })
    }

    /// Symmetrizes without the eigenvalue check. Callers guarantee PSD by construction.
    pub(crate) fn from_sym_unchecked(m: DMatrix<f64>) -> Self {
        Self { m: symmetrize(&m) }
    }

    pub fn zeros(d: usize) -> Self {
        Self { m: DMatrix::zeros(d, d) }
    }

    pub fn identity(d: usize) -> Self {
        Self { m: DMatrix::identity(d, d) }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(crate::matrix_from_rows(rows)?)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    /// Sum of two PSD matrices (stays in the cone).
    pub fn add(&self, other: &CovMatrix) -> Result<CovMatrix> {
        check_dims(self, other)?;
        Ok(Self { m: &self.m + &other.m })
    }

    /// Nonnegative scaling.
    pub fn scale(&self, c: f64) -> CovMatrix {
        assert!(c >= 0.0, "negative scale leaves the PSD cone");
        Self { m: &self.m * c }
    }

    /// (1-beta) a + beta b for beta in [0,1].
    pub fn convex(&self, other: &CovMatrix, beta: f64) -> Result<CovMatrix> {
        check_dims(self, other)?;
        Ok(Self { m: &self.m * (1.0 - beta) + &other.m * beta })
    }

    /// trace(w * self), computed without forming the product.
    pub fn trace_product(&self, w: &DMatrix<f64>) -> f64 {
        self.m.component_mul(&w.transpose()).sum()
    }

    pub fn frobenius_dist(&self, other: &CovMatrix) -> f64 {
        (&self.m - &other.m).norm()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        crate::matrix_to_rows(&self.m)
    }
}

fn check_dims(a: &CovMatrix, b: &CovMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("{} vs {}", a.dim(), b.dim())));
    }
    Ok(())
}

impl Serialize for CovMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CovMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        CovMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig(a: &CovMatrix) -> Result<f64> {
    min_eig_sym(a.matrix())
}

pub fn min_eig_sym(m: &DMatrix<f64>) -> Result<f64> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite matrix entry".into()));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    Ok(SymmetricEigen::new(symmetrize(m)).eigenvalues.min())
}

/// Loewner comparison of `a` and `b`.
pub fn psd_order(a: &CovMatrix, b: &CovMatrix, tol: f64) -> Result<PsdOrdering> {
    check_dims(a, b)?;
    let diff = b.matrix() - a.matrix();
    let le = min_eig_sym(&diff)? >= -tol;
    let ge = min_eig_sym(&(-diff))? >= -tol;
    Ok(match (le, ge) {
        (true, true) => PsdOrdering::Equal,
        (true, false) => PsdOrdering::LessEq,
        (false, true) => PsdOrdering::GreaterEq,
        (false, false) => PsdOrdering::Incomparable,
    })
}

/// Solves `a x = rhs` for symmetric positive definite `a` via Cholesky.
pub fn sym_solve_spd(a: &CovMatrix, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_solve(a.matrix(), rhs)
}

pub(crate) fn spd_solve(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != rhs.nrows() || !a.is_square() {
        return Err(Error::Dimension(format!(
            "solve {}x{} against {} rows",
            a.nrows(),
            a.ncols(),
            rhs.nrows()
        )));
    }
    let tr = a.trace();
    let floor = 1e-12 * tr.abs();
    if !(tr > 0.0) {
        return Err(Error::SingularMatrix("trace is not positive".into()));
    }
    let chol = nalgebra::Cholesky::new(symmetrize(a))
        .ok_or_else(|| Error::SingularMatrix("Cholesky factorization failed".into()))?;
    let lmin = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(*v));
    // diag(L)^2 bounds the pivots; a tiny pivot means numerical singularity.
    if lmin * lmin <= floor {
        return Err(Error::SingularMatrix(format!("pivot {:e} below floor", lmin * lmin)));
    }
    Ok(chol.solve(rhs))
}
