//! Small dense symmetric positive definite algebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dense symmetric matrix expected to be positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    data: DMatrix<f64>,
}

impl SpdMatrix {
    /// Wraps a square matrix after checking symmetry to 1e-12 (relative to the
    /// largest entry).
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(Error::Dimension(format!(
                "expected a square matrix, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        let scale = data.amax().max(1.0);
        let d = data.nrows();
        for i in 0..d {
            for j in 0..i {
                if (data[(i, j)] - data[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::NotSpd(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { data })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            data: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(i, j)]
    }

    pub fn factorize(&self) -> Result<CholeskyFactor> {
        let chol = nalgebra::linalg::Cholesky::new(self.data.clone())
            .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
        let lower = chol.l();
        if (0..lower.nrows()).any(|i| !(lower[(i, i)] > 0.0)) {
            return Err(Error::NotSpd("non-positive pivot".into()));
        }
        Ok(CholeskyFactor { lower })
    }
}

/// Lower-triangular `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::Dimension(format!(
                "vector of length {len} against factor of dimension {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let y = self.solve_lower(b)?;
        self.solve_upper(&y)
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check(b.len())?;
        let v = DVector::from_column_slice(b);
        let x = self
            .lower
            .solve_lower_triangular(&v)
            .ok_or_else(|| Error::NotSpd("singular factor".into()))?;
        Ok(x.as_slice().to_vec())
    }

    /// `L⁻ᵀ b`.
    pub fn solve_upper(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check(b.len())?;
        let v = DVector::from_column_slice(b);
        let x = self
            .lower
            .tr_solve_lower_triangular(&v)
            .ok_or_else(|| Error::NotSpd("singular factor".into()))?;
        Ok(x.as_slice().to_vec())
    }

    /// `vᵀ A v = ‖Lᵀ v‖²`.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        self.check(v.len())?;
        let d = self.dim();
        let mut total = 0.0;
        for j in 0..d {
            let mut s = 0.0;
            for i in j..d {
                s += self.lower[(i, j)] * v[i];
            }
            total += s * s;
        }
        Ok(total)
    }

    /// `vᵀ A⁻¹ v = ‖L⁻¹ v‖²`, one triangular solve, no explicit inverse.
    pub fn inverse_quad_form(&self, v: &[f64]) -> Result<f64> {
        let w = self.solve_lower(v)?;
        Ok(w.iter().map(|x| x * x).sum())
    }

    /// `max |L Lᵀ − A|`, for residual checks.
    pub fn residual(&self, a: &SpdMatrix) -> f64 {
        let llt = &self.lower * self.lower.transpose();
        (llt - a.as_matrix()).amax()
    }
}
