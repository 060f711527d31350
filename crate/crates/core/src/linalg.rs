//! Small helpers for complex Hermitian matrix work on top of nalgebra.
//!
//! Everything here operates on dynamically sized `Complex64` matrices; the
//! problem sizes are tiny (antenna/path counts), so dense routines are fine.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const LN2: f64 = std::f64::consts::LN_2;

/// Largest entry magnitude, 0 for empty matrices.
pub fn max_abs(a: &CMat) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

/// Largest entrywise deviation from Hermitian symmetry.
pub fn hermitian_defect(a: &CMat) -> f64 {
    let ah = a.adjoint();
    max_abs(&(a - ah))
}

/// (A + A^H) / 2.
pub fn hermitize(a: &CMat) -> CMat {
    (a + a.adjoint()).scale(0.5)
}

/// Eigendecomposition of a Hermitian matrix: unitary U and real eigenvalues,
/// sorted descending. The input is symmetrized first; callers that care about
/// the defect should check it themselves.
pub fn herm_eigen(a: &CMat) -> (CMat, DVector<f64>) {
    let se = hermitize(a).symmetric_eigen();
    let n = se.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        se.eigenvalues[j]
            .partial_cmp(&se.eigenvalues[i])
            .expect("non-finite eigenvalue")
    });
    let mut u = CMat::zeros(n, n);
    let mut vals = DVector::zeros(n);
    for (k, &i) in order.iter().enumerate() {
        u.set_column(k, &se.eigenvectors.column(i));
        vals[k] = se.eigenvalues[i];
    }
    (u, vals)
}

/// Hermitian PSD square root; eigenvalues below zero are clipped to zero.
pub fn psd_sqrt(a: &CMat) -> CMat {
    let (u, vals) = herm_eigen(a);
    let d = CMat::from_diagonal(&CVec::from_iterator(
        vals.len(),
        vals.iter().map(|&v| Complex64::new(v.max(0.0).sqrt(), 0.0)),
    ));
    &u * d * u.adjoint()
}

/// log2 det of a Hermitian positive definite matrix, from its eigenvalues.
/// Reports the offending spectrum when the argument is not PD.
pub fn logdet2_hpd(a: &CMat) -> Result<f64> {
    let defect = hermitian_defect(a);
    if defect > 1e-6 {
        return Err(Error::Numerical(format!(
            "log-det argument not Hermitian (defect {defect:.3e})"
        )));
    }
    let (_, vals) = herm_eigen(a);
    if let Some(bad) = vals.iter().find(|&&v| v <= 0.0) {
        return Err(Error::Numerical(format!(
            "log-det argument not positive definite (eigenvalue {bad:.6e}, spectrum {:?})",
            vals.as_slice()
        )));
    }
    Ok(vals.iter().map(|v| v.log2()).sum())
}

/// log2 det(I + X) for Hermitian PSD-ish X via Cholesky, falling back to
/// eigenvalues clipped at 1e-14 when rounding makes I + X non-PD.
pub fn logdet2_i_plus(x: &CMat) -> f64 {
    let n = x.nrows();
    let m = CMat::identity(n, n) + hermitize(x);
    if let Some(chol) = m.clone().cholesky() {
        let mut acc = 0.0;
        for i in 0..n {
            acc += chol.l()[(i, i)].re.ln();
        }
        return 2.0 * acc / LN2;
    }
    let (_, vals) = herm_eigen(&m);
    vals.iter().map(|&v| v.max(1e-14).log2()).sum()
}

/// Matrix inverse via LU; the context string names the matrix in errors.
pub fn inv(a: &CMat, context: &str) -> Result<CMat> {
    a.clone().try_inverse().ok_or_else(|| {
        Error::Numerical(format!(
            "singular matrix in {context} (max entry {:.3e})",
            max_abs(a)
        ))
    })
}

/// Real part of the trace, erroring when the imaginary residue is large.
pub fn real_trace(a: &CMat, tol: f64, context: &str) -> Result<f64> {
    let tr = a.trace();
    if tr.im.abs() > tol * (1.0 + tr.re.abs()) {
        return Err(Error::Numerical(format!(
            "trace of {context} has imaginary residue {:.3e}",
            tr.im
        )));
    }
    Ok(tr.re)
}

/// Diagonal matrix from complex entries.
pub fn diag(entries: &CVec) -> CMat {
    CMat::from_diagonal(entries)
}

/// Diagonal matrix from real entries.
pub fn diag_re(entries: &[f64]) -> CMat {
    CMat::from_diagonal(&CVec::from_iterator(
        entries.len(),
        entries.iter().map(|&v| Complex64::new(v, 0.0)),
    ))
}
