use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Relative symmetry tolerance accepted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues down to `-PSD_TOL * trace` are accepted as roundoff.
pub const PSD_TOL: f64 = 1e-10;
/// Pivots below `PIVOT_TOL * max(diag)` are rejected by [`cholesky`].
pub const PIVOT_TOL: f64 = 1e-12;
/// Relative diagonal jitter added to kernel matrices used as covariances.
pub const JITTER_REL: f64 = 1e-8;

/// Dense symmetric positive semi-definite matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Validates symmetry and positive semi-definiteness (up to roundoff).
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::shape(format!("SymMatrix needs a square matrix, got {:?}", m.shape())));
        }
        let scale = m.max_abs().max(f64::MIN_POSITIVE);
        let n = m.rows();
        for i in 0..n {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotPsd(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        if !m.is_finite() {
            return Err(Error::NotPsd("non-finite entries".into()));
        }
        let trace = m.trace();
        if trace < 0.0 {
            return Err(Error::NotPsd("negative trace".into()));
        }
        if m.max_abs() > 0.0 {
            // lambda_min(m) > -shift  <=>  m + shift*I is positive definite
            let shift = (PSD_TOL * trace).max(f64::MIN_POSITIVE * n as f64);
            let mut shifted = m.symmetrize();
            for i in 0..n {
                shifted[(i, i)] += shift;
            }
            cholesky_with_threshold(&shifted, 0.0)
                .map_err(|_| Error::NotPsd("negative eigenvalue beyond tolerance".into()))?;
        }
        Ok(SymMatrix(m))
    }

    /// Wraps a matrix that is symmetric PSD by construction (e.g. `F F^T`).
    pub fn from_matrix_unchecked(m: Matrix) -> Self {
        debug_assert!(m.is_square());
        SymMatrix(m)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(Matrix::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Copy with `JITTER_REL * mean(diag)` added to the diagonal.
    pub fn with_jitter(&self) -> SymMatrix {
        SymMatrix(add_jitter(&self.0))
    }
}

/// Adds `JITTER_REL * mean(diag)` to the diagonal of a square matrix.
pub fn add_jitter(m: &Matrix) -> Matrix {
    let n = m.rows();
    let mut out = m.clone();
    if n == 0 {
        return out;
    }
    let jitter = JITTER_REL * m.trace() / n as f64;
    for i in 0..n {
        out[(i, i)] += jitter;
    }
    out
}

/// P x min(P, nu) lower-trapezoidal matrix: entries `(i, j)` with `j > i` are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerTrapezoid(Matrix);

impl LowerTrapezoid {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.cols() > m.rows() {
            return Err(Error::shape(format!(
                "lower trapezoid needs cols <= rows, got {:?}",
                m.shape()
            )));
        }
        for i in 0..m.rows() {
            for j in (i + 1)..m.cols() {
                if m[(i, j)] != 0.0 {
                    return Err(Error::shape(format!("nonzero strictly-upper entry at ({i}, {j})")));
                }
            }
        }
        Ok(LowerTrapezoid(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix) -> Self {
        LowerTrapezoid(m)
    }

    pub fn identity(n: usize) -> Self {
        LowerTrapezoid(Matrix::identity(n))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn is_square(&self) -> bool {
        self.0.is_square()
    }

    pub fn diag(&self) -> Vec<f64> {
        self.0.diag()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// `self * self^T`.
    pub fn gram(&self) -> SymMatrix {
        SymMatrix(self.0.matmul_nt(&self.0))
    }
}

/// Cholesky factor `L` with `L L^T = m`.
pub fn cholesky(m: &SymMatrix) -> Result<LowerTrapezoid> {
    cholesky_matrix(m.as_matrix()).map(LowerTrapezoid)
}

/// Cholesky on a raw square matrix; only the lower triangle is read.
pub fn cholesky_matrix(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::shape(format!("cholesky of non-square {:?}", m.shape())));
    }
    let max_diag = m.diag().into_iter().fold(0.0_f64, f64::max);
    cholesky_with_threshold(m, PIVOT_TOL * max_diag)
}

fn cholesky_with_threshold(m: &Matrix, threshold: f64) -> Result<Matrix> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        {
            let lj = l.row(j);
            d -= lj[..j].iter().map(|x| x * x).sum::<f64>();
        }
        if !(d > threshold) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite(j));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let s: f64 = {
                let (li, lj) = (l.row(i), l.row(j));
                li[..j].iter().zip(&lj[..j]).map(|(a, b)| a * b).sum()
            };
            l[(i, j)] = (m[(i, j)] - s) / djj;
        }
    }
    Ok(l)
}

/// Solves `l x = b` for square lower-triangular `l` by forward substitution.
pub fn tri_solve(l: &LowerTrapezoid, b: &Matrix) -> Result<Matrix> {
    if !l.is_square() {
        return Err(Error::shape("tri_solve needs a square factor"));
    }
    tri_solve_lower(l.as_matrix(), b)
}

/// Forward substitution on a raw lower-triangular matrix (upper part ignored).
pub fn tri_solve_lower(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    if !l.is_square() || b.rows() != n {
        return Err(Error::shape(format!(
            "tri_solve: factor {:?}, rhs {:?}",
            l.shape(),
            b.shape()
        )));
    }
    for i in 0..n {
        if l[(i, i)] == 0.0 {
            return Err(Error::SingularTriangular(i));
        }
    }
    let m = b.cols();
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            if lik == 0.0 {
                continue;
            }
            for c in 0..m {
                let v = x[(k, c)];
                x[(i, c)] -= lik * v;
            }
        }
        let d = l[(i, i)];
        for c in 0..m {
            x[(i, c)] /= d;
        }
    }
    Ok(x)
}

/// Back substitution: solves `l^T x = b` for lower-triangular `l`.
pub fn tri_solve_lower_transpose(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    if !l.is_square() || b.rows() != n {
        return Err(Error::shape("tri_solve_lower_transpose shape mismatch"));
    }
    for i in 0..n {
        if l[(i, i)] == 0.0 {
            return Err(Error::SingularTriangular(i));
        }
    }
    let m = b.cols();
    let mut x = b.clone();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[(k, i)];
            if lki == 0.0 {
                continue;
            }
            for c in 0..m {
                let v = x[(k, c)];
                x[(i, c)] -= lki * v;
            }
        }
        let d = l[(i, i)];
        for c in 0..m {
            x[(i, c)] /= d;
        }
    }
    Ok(x)
}

/// `log det(m)` for symmetric positive definite `m`.
pub fn logdet_spd(m: &Matrix) -> Result<f64> {
    let l = cholesky_matrix(m)?;
    Ok(2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>())
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    let l = cholesky_matrix(m)?;
    let linv = tri_solve_lower(&l, &Matrix::identity(m.rows()))?;
    Ok(linv.matmul_tn(&linv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&SymMatrix::identity(3)).unwrap();
        assert_eq!(l.as_matrix(), &Matrix::identity(3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let m = SymMatrix::new(Matrix::from_rows(&[&[4.0, 2.0], &[2.0, 5.0]])).unwrap();
        let l = cholesky(&m).unwrap();
        assert_eq!(l.as_matrix(), &Matrix::from_rows(&[&[2.0, 0.0], &[1.0, 2.0]]));
    }

    #[test]
    fn cholesky_rank_one_fails_at_second_pivot() {
        let m = SymMatrix::new(Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap();
        assert_eq!(cholesky(&m), Err(Error::NotPositiveDefinite(1)));
    }

    #[test]
    fn tri_solve_examples() {
        let b = Matrix::column(&[3.0, 7.0]);
        assert_eq!(tri_solve(&LowerTrapezoid::identity(2), &b).unwrap(), b);

        let l = LowerTrapezoid::new(Matrix::from_rows(&[&[2.0, 0.0], &[1.0, 2.0]])).unwrap();
        let x = tri_solve(&l, &Matrix::column(&[2.0, 3.0])).unwrap();
        assert_eq!(x, Matrix::column(&[1.0, 1.0]));

        let singular = LowerTrapezoid::new(Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert_eq!(
            tri_solve(&singular, &Matrix::column(&[1.0, 1.0])),
            Err(Error::SingularTriangular(1))
        );
    }

    #[test]
    fn sym_matrix_rejects_indefinite_and_asymmetric() {
        assert!(SymMatrix::new(Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]])).is_err());
        assert!(SymMatrix::new(Matrix::from_rows(&[&[1.0, 0.5], &[0.4, 1.0]])).is_err());
        assert!(SymMatrix::new(Matrix::zeros(2, 2)).is_ok());
        // rank-deficient but PSD
        assert!(SymMatrix::new(Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]])).is_ok());
    }

    #[test]
    fn lower_trapezoid_rejects_upper_entries() {
        assert!(LowerTrapezoid::new(Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]])).is_err());
        assert!(LowerTrapezoid::new(Matrix::from_rows(&[&[1.0], &[2.0], &[3.0]])).is_ok());
        assert!(LowerTrapezoid::new(Matrix::zeros(2, 3)).is_err());
    }

    fn random_lower(n: usize, rng: &mut RngStream) -> Matrix {
        Matrix::from_fn(n, n, |i, j| {
            if j < i {
                rng.normal()
            } else if i == j {
                0.5 + rng.uniform()
            } else {
                0.0
            }
        })
    }

    #[test]
    fn cholesky_recovers_factor_over_seeds() {
        for seed in 0..100u64 {
            let mut rng = RngStream::new(seed, 0);
            let n = 1 + (seed as usize % 8);
            let l = random_lower(n, &mut rng);
            let m = l.matmul_nt(&l);
            let back = cholesky_matrix(&m).unwrap();
            assert!(back.max_abs_diff(&l) < 1e-8, "seed {seed}");
            let recon = back.matmul_nt(&back);
            assert!(recon.sub(&m).frobenius_norm() <= 1e-10 * m.frobenius_norm());
        }
    }

    proptest! {
        #[test]
        fn tri_solve_inverts_product(seed in any::<u64>(), n in 1usize..7, k in 1usize..4) {
            let mut rng = RngStream::new(seed, 1);
            let l = random_lower(n, &mut rng);
            let x = Matrix::from_fn(n, k, |_, _| rng.normal());
            let solved = tri_solve_lower(&l, &l.matmul(&x)).unwrap();
            prop_assert!(solved.max_abs_diff(&x) < 1e-9 * (1.0 + x.max_abs()));
            let solved_t = tri_solve_lower_transpose(&l, &l.transpose().matmul(&x)).unwrap();
            prop_assert!(solved_t.max_abs_diff(&x) < 1e-9 * (1.0 + x.max_abs()));
        }
    }
}
