//! Dense symmetric kernels shared by the filter, the estimator and the
//! path-selection code.
//!
//! Everything is double precision. Covariance chains are symmetrized after
//! every update with [`symmetrize`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative asymmetry accepted by [`SymmetricPsd::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A symmetric positive definite matrix together with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct SymmetricPsd {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl SymmetricPsd {
    /// Factorizes `matrix`. `role` names the matrix in the error if the
    /// factorization fails.
    pub fn new(matrix: DMatrix<f64>, role: &'static str) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Dimension(format!(
                "`{role}` is {}x{}, expected square",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if !is_symmetric(&matrix, SYMMETRY_TOL) {
            return Err(Error::NotSymmetric { role });
        }
        let chol = Cholesky::new(matrix.clone()).ok_or(Error::NotPositiveDefinite { role })?;
        Ok(Self { matrix, chol })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Lower-triangular factor `L` with `A = L Lᵀ`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    /// `log det A` as twice the sum of the log-diagonal of the factor.
    pub fn logdet(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..self.dim()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }
}

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

/// Smallest eigenvalue of the symmetric part of `m`. Returns `+inf` for an
/// empty matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Checks symmetry and `λ_min ≥ −rel_tol · |trace|`.
pub fn check_psd(m: &DMatrix<f64>, rel_tol: f64, role: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("`{role}` must be square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("`{role}` has non-finite entries")));
    }
    if !is_symmetric(m, 1e-9) {
        return Err(Error::NotSymmetric { role });
    }
    let tol = rel_tol * m.trace().abs() + f64::EPSILON * m.amax();
    // `m + tol·I` positive definite already implies `λ_min > −tol`.
    let mut shifted = m.clone();
    symmetrize(&mut shifted);
    for i in 0..shifted.nrows() {
        shifted[(i, i)] += tol;
    }
    if tol > 0.0 && shifted.cholesky().is_some() {
        return Ok(());
    }
    let min = min_eigenvalue(m);
    if min < -tol {
        return Err(Error::NotPsd {
            role,
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// Projects a symmetric matrix onto the PSD cone by flooring eigenvalues at 0.
pub fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let floored = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// Factor `L` with `L Lᵀ ≈ m`, for drawing correlated noise.
///
/// A zero matrix gets a zero factor. A matrix that fails Cholesky gets a
/// single diagonal shift of `1e-9 · trace / n`; failing again is an error.
pub fn psd_factor(m: &DMatrix<f64>, role: &'static str) -> Result<DMatrix<f64>> {
    check_psd(m, 1e-10, role)?;
    let n = m.nrows();
    if m.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol.l());
    }
    let shift = 1e-9 * m.trace() / n as f64;
    let shifted = m + DMatrix::identity(n, n) * shift;
    Cholesky::new(shifted)
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite { role })
}

/// Grows the inverse of `A_SS + I` by one index.
///
/// Given `V = (A_SS + I)⁻¹`, the cross column `w = A_{S,s}` and the Schur
/// scalar `d = A_ss − wᵀVw + 1`, returns
/// `[[V + uuᵀ/d, u/d], [uᵀ/d, 1/d]]` with `u = −Vw`.
pub fn rank_one_extend_inverse(v: &DMatrix<f64>, w: &DVector<f64>, d: f64) -> Result<DMatrix<f64>> {
    let n = v.nrows();
    if w.len() != n {
        return Err(Error::Dimension(format!(
            "extension column has length {}, inverse is {n}x{n}",
            w.len()
        )));
    }
    if !(d > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rank-one extension needs d > 0, got {d:e}"
        )));
    }
    let u = -(v * w);
    let mut out = DMatrix::zeros(n + 1, n + 1);
    out.view_mut((0, 0), (n, n)).copy_from(&(v + &u * u.transpose() / d));
    for i in 0..n {
        out[(i, n)] = u[i] / d;
        out[(n, i)] = u[i] / d;
    }
    out[(n, n)] = 1.0 / d;
    Ok(out)
}

/// Block version of [`rank_one_extend_inverse`].
///
/// With `V = A⁻¹`, cross block `w` (n×k) and new diagonal block `c` (k×k),
/// returns the inverse of `[[A, w], [wᵀ, c]]` and `log det` of the Schur
/// complement `c − wᵀVw`.
pub fn block_extend_inverse(
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    let n = v.nrows();
    let k = c.nrows();
    if w.nrows() != n || w.ncols() != k || !c.is_square() {
        return Err(Error::Dimension("block extension shapes disagree".into()));
    }
    let vw = v * w;
    let mut schur = c - w.transpose() * &vw;
    symmetrize(&mut schur);
    let schur = SymmetricPsd::new(schur, "schur complement")?;
    let schur_inv = schur.inverse();
    let u = -vw;
    let mut out = DMatrix::zeros(n + k, n + k);
    let top_left = v + &u * &schur_inv * u.transpose();
    out.view_mut((0, 0), (n, n)).copy_from(&top_left);
    let cross = &u * &schur_inv;
    out.view_mut((0, n), (n, k)).copy_from(&cross);
    out.view_mut((n, 0), (k, n)).copy_from(&cross.transpose());
    out.view_mut((n, n), (k, k)).copy_from(&schur_inv);
    symmetrize(&mut out);
    Ok((out, schur.logdet()))
}

/// Submatrix with the given row and column index lists.
pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Principal submatrix on `idx`.
pub fn principal(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    submatrix(m, idx, idx)
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn select_cols(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Sorted indices in `0..n` that are not in `idx`.
pub fn complement(n: usize, idx: &[usize]) -> Vec<usize> {
    let mut taken = vec![false; n];
    for &i in idx {
        if i < n {
            taken[i] = true;
        }
    }
    (0..n).filter(|&i| !taken[i]).collect()
}

/// `|S| × n` selection matrix whose rows are the canonical vectors of `idx`.
pub fn selection_matrix(n: usize, idx: &[usize]) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(idx.len(), n);
    for (row, &i) in idx.iter().enumerate() {
        s[(row, i)] = 1.0;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = random_matrix(rng, n, n);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn identity_logdet_and_solve() {
        let id = SymmetricPsd::new(DMatrix::identity(4, 4), "identity").unwrap();
        assert_eq!(id.logdet(), 0.0);
        let rhs = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        assert_eq!(id.solve_vec(&rhs), rhs);
    }

    #[test]
    fn diagonal_logdet() {
        let m = SymmetricPsd::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 8.0])), "diag")
            .unwrap();
        assert!((m.logdet() - 16f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn empty_matrix_factorizes() {
        let m = SymmetricPsd::new(DMatrix::zeros(0, 0), "empty").unwrap();
        assert_eq!(m.logdet(), 0.0);
        assert_eq!(m.inverse().nrows(), 0);
    }

    #[test]
    fn solve_residual_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_spd(&mut rng, 6);
            let b = DVector::from_fn(6, |_, _| rng.random_range(-5.0..5.0));
            let f = SymmetricPsd::new(a.clone(), "a").unwrap();
            let x = f.solve_vec(&b);
            assert!((&a * x - &b).norm() <= 1e-9 * b.norm());
        }
    }

    #[test]
    fn logdet_matches_lu_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(&mut rng, 5);
        let f = SymmetricPsd::new(a.clone(), "a").unwrap();
        assert!((f.logdet() - a.determinant().ln()).abs() < 1e-10);
    }

    #[test]
    fn non_pd_names_role() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match SymmetricPsd::new(m, "innovation") {
            Err(Error::NotPositiveDefinite { role }) => assert_eq!(role, "innovation"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn woodbury_matches_direct_inverse() {
        // (A + U C Vᵀ)⁻¹ = A⁻¹ − A⁻¹U(C⁻¹ + VᵀA⁻¹U)⁻¹VᵀA⁻¹
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_spd(&mut rng, 5);
            let c = random_spd(&mut rng, 2);
            let u = random_matrix(&mut rng, 5, 2);
            let direct = (&a + &u * &c * u.transpose()).try_inverse().unwrap();
            let a_inv = SymmetricPsd::new(a, "a").unwrap().inverse();
            let c_inv = SymmetricPsd::new(c, "c").unwrap().inverse();
            let mut inner = c_inv + u.transpose() * &a_inv * &u;
            symmetrize(&mut inner);
            let inner_inv = SymmetricPsd::new(inner, "inner").unwrap().inverse();
            let woodbury = &a_inv - &a_inv * &u * inner_inv * u.transpose() * &a_inv;
            assert!((&woodbury - &direct).norm() <= 1e-10 * direct.norm());
        }
    }

    #[test]
    fn sylvester_determinant_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 6, 3);
            let b = random_matrix(&mut rng, 6, 3);
            let lhs = (DMatrix::identity(6, 6) + &a * b.transpose()).determinant();
            let rhs = (DMatrix::identity(3, 3) + b.transpose() * &a).determinant();
            assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1e-12));
        }
    }

    #[test]
    fn rank_one_extension_inverts_grown_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let u = random_matrix(&mut rng, 6, 6);
        let phi = &u * u.transpose();
        let order = [4usize, 1, 5, 0];
        let mut v = DMatrix::from_element(1, 1, 1.0 / (phi[(4, 4)] + 1.0));
        for k in 1..order.len() {
            let chosen = &order[..k];
            let s = order[k];
            let w = DVector::from_iterator(k, chosen.iter().map(|&i| phi[(i, s)]));
            let d = phi[(s, s)] - w.dot(&(&v * &w)) + 1.0;
            v = rank_one_extend_inverse(&v, &w, d).unwrap();
            let grown = principal(&phi, &order[..=k]) + DMatrix::identity(k + 1, k + 1);
            let residual = &v * grown - DMatrix::identity(k + 1, k + 1);
            assert!(residual.amax() < 1e-9);
        }
    }

    #[test]
    fn rank_one_extension_rejects_nonpositive_d() {
        let v = DMatrix::identity(1, 1);
        let w = DVector::from_vec(vec![0.0]);
        assert!(rank_one_extend_inverse(&v, &w, 0.0).is_err());
        assert!(rank_one_extend_inverse(&v, &w, -1.0).is_err());
    }

    #[test]
    fn block_extension_inverts_and_reports_schur_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a = random_spd(&mut rng, 7);
        let first = [0usize, 3];
        let second = [1usize, 6, 2];
        let v = SymmetricPsd::new(principal(&a, &first), "a11").unwrap().inverse();
        let w = submatrix(&a, &first, &second);
        let c = principal(&a, &second);
        let (grown, schur_logdet) = block_extend_inverse(&v, &w, &c).unwrap();
        let all = [0usize, 3, 1, 6, 2];
        let full = principal(&a, &all);
        assert!((&grown * &full - DMatrix::identity(5, 5)).amax() < 1e-9);
        let expected = full.determinant().ln() - principal(&a, &first).determinant().ln();
        assert!((schur_logdet - expected).abs() < 1e-9);
    }

    #[test]
    fn psd_factor_handles_zero_and_singular() {
        let z = psd_factor(&DMatrix::zeros(3, 3), "zero").unwrap();
        assert_eq!(z, DMatrix::zeros(3, 3));
        // rank one
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &x * x.transpose();
        let l = psd_factor(&m, "rank one").unwrap();
        assert!((&l * l.transpose() - &m).amax() < 1e-6);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(psd_factor(&bad, "bad").is_err());
    }

    #[test]
    fn projection_floors_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = project_psd(&m);
        assert!(min_eigenvalue(&p) > -1e-12);
        assert!((p[(0, 0)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn complement_is_sorted_and_disjoint() {
        assert_eq!(complement(6, &[4, 1, 3]), vec![0, 2, 5]);
        assert_eq!(complement(3, &[]), vec![0, 1, 2]);
        assert!(complement(3, &[0, 1, 2]).is_empty());
    }
}
