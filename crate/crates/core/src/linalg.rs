//! Small dense linear-algebra helpers shared by the filter, the planner and
//! the heatmap projection. Everything SPD goes through a guarded Cholesky.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Upper bound on the condition number accepted by [`cholesky`].
pub const CONDITION_LIMIT: f64 = 1e12;

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factorization with a condition guard.
///
/// The condition estimate is the squared ratio of the largest to the smallest
/// diagonal entry of the factor, a lower bound on the true 2-norm condition
/// number that is free once the factor exists.
pub fn cholesky(m: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what}: expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(what));
    }
    let chol = Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite(what))?;
    let l = chol.l_dirty();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..m.nrows() {
        let d = l[(i, i)];
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite(what));
        }
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if m.nrows() > 0 {
        let cond = (hi / lo).powi(2);
        if cond > CONDITION_LIMIT {
            return Err(Error::IllConditioned(cond));
        }
    }
    Ok(chol)
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(m, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    Ok(cholesky(m, what)?.solve(b))
}

/// Determinant of an SPD matrix from its Cholesky factor.
pub fn spd_det(m: &DMatrix<f64>, what: &'static str) -> Result<f64> {
    let chol = cholesky(m, what)?;
    let l = chol.l_dirty();
    let mut det = 1.0;
    for i in 0..m.nrows() {
        det *= l[(i, i)] * l[(i, i)];
    }
    Ok(det)
}

/// Loewner order test `a ⪰ b`.
///
/// Diagonal differences are decided exactly; otherwise the smallest
/// eigenvalue of `a - b` must be nonnegative up to round-off.
pub fn loewner_geq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let d = a - b;
    let n = d.nrows();
    let mut diagonal = true;
    'outer: for i in 0..n {
        for j in 0..n {
            if i != j && d[(i, j)] != 0.0 {
                diagonal = false;
                break 'outer;
            }
        }
    }
    if diagonal {
        return (0..n).all(|i| d[(i, i)] >= 0.0);
    }
    let scale = a.amax().max(b.amax()).max(1.0);
    let eig = nalgebra::SymmetricEigen::new(d);
    eig.eigenvalues.iter().all(|&l| l >= -1e-12 * scale)
}

/// Extracts the `size`×`size` diagonal block starting at `start`.
pub fn diagonal_block(m: &DMatrix<f64>, start: usize, size: usize) -> DMatrix<f64> {
    m.view((start, start), (size, size)).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guarded_cholesky_rejects_indefinite_and_ill_conditioned() {
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky(&indefinite, "m"), Err(Error::NotPositiveDefinite(_))));
        let ill = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-13]));
        assert!(matches!(cholesky(&ill, "m"), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn determinant_and_inverse_agree() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        assert!((spd_det(&m, "m").unwrap() - 11.0).abs() < 1e-12);
        let inv = spd_inverse(&m, "m").unwrap();
        let eye = &m * &inv;
        assert!((eye - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn loewner_order() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 2.0]);
        let b = DMatrix::<f64>::identity(2, 2);
        assert!(loewner_geq(&a, &b));
        assert!(!loewner_geq(&b, &a));
        assert!(loewner_geq(&b, &b));
    }
}
