//! Small dense-matrix kernel: pseudoinverse, PSD and range-inclusion tests.
//!
//! Matrices here are at most a few dozen rows. Everything is backed by
//! nalgebra's dynamically sized types; the rank and definiteness decisions
//! that floating point forces on us are made explicit through [`Tolerances`].
//! Singular value decompositions go through faer: nalgebra's SVD returns
//! factors that do not reconstruct the input on a small fraction of
//! rank-deficient matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Numerical thresholds used for rank, definiteness, and range decisions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Singular values below `rank_rel_tol * sigma_max` count as zero.
    pub rank_rel_tol: f64,
    /// Eigenvalue slack for positive semidefiniteness.
    pub psd_tol: f64,
    /// Bound for range-inclusion residuals and symmetry checks.
    pub residual_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rank_rel_tol: 1e-10,
            psd_tol: 1e-9,
            residual_tol: 1e-9,
        }
    }
}

impl Tolerances {
    pub fn new(rank_rel_tol: f64, psd_tol: f64, residual_tol: f64) -> Result<Self> {
        let t = Tolerances {
            rank_rel_tol,
            psd_tol,
            residual_tol,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rank_rel_tol", self.rank_rel_tol),
            ("psd_tol", self.psd_tol),
            ("residual_tol", self.residual_tol),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    /// Same tolerances with a different residual bound.
    pub fn with_residual_tol(mut self, residual_tol: f64) -> Self {
        self.residual_tol = residual_tol;
        self
    }
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn is_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// `x' M y`.
pub fn quad_form(x: &Vector, m: &Matrix, y: &Vector) -> f64 {
    x.dot(&(m * y))
}

/// Moore-Penrose pseudoinverse via SVD with a relative rank cutoff.
pub fn pinv(m: &Matrix, tol: &Tolerances) -> Result<Matrix> {
    if !is_finite(m) {
        return Err(Error::invalid("pinv: matrix has non-finite entries"));
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(Matrix::zeros(cols, rows));
    }
    let (u, sv, v) = thin_svd(m)?;
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    let mut out = Matrix::zeros(cols, rows);
    if sigma_max == 0.0 {
        return Ok(out);
    }
    let cutoff = tol.rank_rel_tol * sigma_max;
    for (k, &s) in sv.iter().enumerate() {
        if s > cutoff {
            // out += v_k u_k' / s
            out += (v.column(k) * u.column(k).transpose()) / s;
        }
    }
    Ok(out)
}

fn to_faer(m: &Matrix) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Thin SVD `m = U diag(s) V'`.
fn thin_svd(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let svd = to_faer(m)
        .thin_svd()
        .map_err(|e| Error::invalid(format!("svd did not converge: {e:?}")))?;
    let (u, v) = (svd.U(), svd.V());
    let k = u.ncols();
    let s = (0..k).map(|i| svd.S()[i]).collect();
    Ok((
        Matrix::from_fn(m.nrows(), k, |i, j| u[(i, j)]),
        s,
        Matrix::from_fn(m.ncols(), k, |i, j| v[(i, j)]),
    ))
}

/// Largest violation of the four Penrose identities, in max-norm.
pub fn penrose_residual(m: &Matrix, m_pinv: &Matrix) -> f64 {
    let mm = m * m_pinv;
    let pm = m_pinv * m;
    let r1 = max_abs(&(&mm * m - m));
    let r2 = max_abs(&(&pm * m_pinv - m_pinv));
    let r3 = max_abs(&(mm.transpose() - &mm));
    let r4 = max_abs(&(pm.transpose() - &pm));
    r1.max(r2).max(r3).max(r4)
}

fn require_square(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid(format!(
            "{what}: expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    require_square(m, "sym_eigenvalues")?;
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    Ok(vals)
}

pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    Ok(sym_eigenvalues(m)?.first().cloned().unwrap_or(0.0))
}

/// True iff every eigenvalue of the (symmetrized) matrix is `>= -psd_tol`.
pub fn psd_check(m: &Matrix, tol: &Tolerances) -> Result<bool> {
    require_square(m, "psd_check")?;
    if !is_finite(m) {
        return Err(Error::invalid("psd_check: matrix has non-finite entries"));
    }
    let asym = max_abs(&(m - m.transpose()));
    if asym > tol.residual_tol * (1.0 + max_abs(m)) {
        return Err(Error::invalid(format!(
            "psd_check: matrix is not symmetric (asymmetry {asym:e})"
        )));
    }
    Ok(min_eigenvalue(m)? >= -tol.psd_tol)
}

/// Residual `||(I - R R^+) M||_max` of projecting the columns of `m` onto
/// the range of the square matrix `rhat`.
pub fn range_residual(m: &Matrix, rhat: &Matrix, tol: &Tolerances) -> Result<f64> {
    require_square(rhat, "range_subset")?;
    if m.nrows() != rhat.nrows() {
        return Err(Error::invalid(format!(
            "range_subset: row mismatch ({} vs {})",
            m.nrows(),
            rhat.nrows()
        )));
    }
    let rp = pinv(rhat, tol)?;
    let proj = rhat * rp;
    Ok(max_abs(&(m - proj * m)))
}

/// True iff `Range(m) ⊆ Range(rhat)` up to `residual_tol * (1 + ||m||_max)`.
pub fn range_subset(m: &Matrix, rhat: &Matrix, tol: &Tolerances) -> Result<bool> {
    let res = range_residual(m, rhat, tol)?;
    Ok(res <= tol.residual_tol * (1.0 + max_abs(m)))
}

/// Orthogonal projector onto `ker(rhat)` for square `rhat`: `I - R^+ R`.
pub fn kernel_projector(rhat: &Matrix, tol: &Tolerances) -> Result<Matrix> {
    let rp = pinv(rhat, tol)?;
    Ok(Matrix::identity(rhat.ncols(), rhat.ncols()) - rp * rhat)
}

/// Condition number `sigma_max / sigma_min` (infinite for singular input).
pub fn condition_number(m: &Matrix) -> f64 {
    let Ok(sv) = to_faer(m).singular_values() else {
        return f64::INFINITY;
    };
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
