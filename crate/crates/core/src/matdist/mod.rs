//! Gamma, Gaussian, Bartlett/singular Wishart and generalized singular
//! Wishart distributions.
//!
//! Wishart-type densities are always evaluated through the lower-trapezoidal
//! factor `A` of `G = L A A^T L^T`, never by refactorizing `G`, which may be
//! singular.

pub mod diff;

use std::f64::consts::{LN_2, PI};

use crate::autodiff::{gamma_logpdf_scalar, implicit_gamma_shape_grad};
use crate::error::{Error, Result};
use crate::numerics::{
    cholesky_matrix, inv_reg_inc_gamma, log_multigamma, tri_solve_lower, LowerTrapezoid, Matrix,
    RngStream, SymMatrix,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gamma distribution in the shape/rate parameterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::domain(format!("Gamma(shape = {shape}, rate = {rate})")));
        }
        Ok(GammaParams { shape, rate })
    }
}

pub fn gamma_logpdf(x: f64, p: &GammaParams) -> Result<f64> {
    gamma_logpdf_scalar(x, p.shape, p.rate)
}

/// A reparameterized Gamma draw with its pathwise derivatives.
#[derive(Clone, Copy, Debug)]
pub struct GammaDraw {
    pub value: f64,
    /// Underlying uniform; fixing it fixes the draw.
    pub uniform: f64,
    pub d_shape: f64,
    pub d_rate: f64,
}

/// Draws `z = P^-1(shape, u) / rate` with `u ~ U(0, 1)` from `rng`.
pub fn gamma_sample_reparam(p: &GammaParams, rng: &mut RngStream) -> Result<GammaDraw> {
    gamma_from_uniform(p, rng.uniform())
}

pub fn gamma_from_uniform(p: &GammaParams, u: f64) -> Result<GammaDraw> {
    let g = inv_reg_inc_gamma(p.shape, u)?;
    let value = g / p.rate;
    Ok(GammaDraw {
        value,
        uniform: u,
        d_shape: implicit_gamma_shape_grad(p.shape, g)? / p.rate,
        d_rate: -value / p.rate,
    })
}

pub fn normal_logpdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * LN_2PI - std.ln() - 0.5 * z * z
}

/// Standard Bartlett factor: `P x min(P, nu)` lower trapezoid with
/// `A_jj^2 ~ Gamma((nu - j + 1) / 2, 1 / 2)` and standard normal sub-diagonal.
pub fn bartlett_sample(p: usize, nu: usize, rng: &mut RngStream) -> Result<LowerTrapezoid> {
    if p == 0 || nu == 0 {
        return Err(Error::domain(format!("bartlett_sample(P = {p}, nu = {nu})")));
    }
    let params = GenWishartParams::defaults(LowerTrapezoid::identity(p), nu)?;
    Ok(sample_factor(&params, rng)?.0)
}

/// `log |dG / dLambda|` for `G = Lambda Lambda^T` restricted to the
/// trapezoid coordinates: `sum_{i <= min(P, nu)} [log 2 + (P + 1 - i) log Lambda_ii]`.
pub fn logjac_chol_product(lambda: &LowerTrapezoid) -> Result<f64> {
    let p = lambda.rows();
    let mut acc = 0.0;
    for (i, d) in lambda.diag().into_iter().enumerate() {
        if !(d > 0.0) {
            return Err(Error::domain(format!("logjac_chol_product: diagonal {i} is {d}")));
        }
        acc += LN_2 + (p - i) as f64 * d.ln();
    }
    Ok(acc)
}

/// `log |dLambda / dA|` for `Lambda = L A` on `P x min(P, nu)` trapezoids:
/// `sum_i min(i, nu) log L_ii`.
pub fn logjac_left_mult(l: &LowerTrapezoid, p: usize, nu: usize) -> Result<f64> {
    if !l.is_square() || l.rows() != p {
        return Err(Error::shape(format!(
            "logjac_left_mult: L is {}x{}, P = {p}",
            l.rows(),
            l.cols()
        )));
    }
    let mut acc = 0.0;
    for (i, d) in l.diag().into_iter().enumerate() {
        if !(d > 0.0) {
            return Err(Error::domain(format!("logjac_left_mult: diagonal {i} is {d}")));
        }
        acc += (i + 1).min(nu) as f64 * d.ln();
    }
    Ok(acc)
}

/// Closed-form density of the standard (identity-scale) possibly singular
/// Wishart, with `nt = min(nu, p)`:
/// `(nu (nt - p) / 2) log pi - (nu p / 2) log 2 - log Gamma_nt(nu / 2)
///  + ((nu - p - 1) / 2) log |Z[..nt, ..nt]| - tr(Z) / 2`.
pub fn std_singular_wishart_logpdf(z: &SymMatrix, nu: usize) -> Result<f64> {
    if nu == 0 {
        return Err(Error::domain("std_singular_wishart_logpdf: nu = 0"));
    }
    let p = z.dim();
    let nt = nu.min(p);
    let m = z.as_matrix();
    let lead = cholesky_matrix(&m.block(0, nt, 0, nt)).map_err(|_| Error::SingularLeadingBlock)?;
    let logdet: f64 = 2.0 * lead.diag().iter().map(|d| d.ln()).sum::<f64>();
    let (nu_f, p_f, nt_f) = (nu as f64, p as f64, nt as f64);
    Ok(nu_f * (nt_f - p_f) / 2.0 * PI.ln() - nu_f * p_f / 2.0 * LN_2
        - log_multigamma(nt, nu_f / 2.0)?
        + (nu_f - p_f - 1.0) / 2.0 * logdet
        - m.trace() / 2.0)
}

/// Full-rank Wishart `W(G; Sigma, nu)` density, `nu > P - 1`.
pub fn wishart_logpdf(g: &SymMatrix, sigma: &SymMatrix, nu: f64) -> Result<f64> {
    let p = g.dim();
    if sigma.dim() != p {
        return Err(Error::shape("wishart_logpdf: G and Sigma differ in size"));
    }
    if !(nu > p as f64 - 1.0) {
        return Err(Error::domain(format!("wishart_logpdf: nu = {nu} <= P - 1")));
    }
    let lg = cholesky_matrix(g.as_matrix())?;
    let ls = cholesky_matrix(sigma.as_matrix())?;
    let logdet = |l: &Matrix| 2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>();
    // tr(Sigma^-1 G) = ||Ls^-1 Lg||_F^2
    let w = tri_solve_lower(&ls, &lg)?;
    let tr = w.as_slice().iter().map(|x| x * x).sum::<f64>();
    let pf = p as f64;
    Ok((nu - pf - 1.0) / 2.0 * logdet(&lg) - tr / 2.0
        - nu * pf / 2.0 * LN_2
        - nu / 2.0 * logdet(&ls)
        - log_multigamma(p, nu / 2.0)?)
}

/// Variational parameters of the generalized singular Wishart
/// `G = L A A^T L^T` with `A_jj^2 ~ Gamma(alpha_j, beta_j)` and
/// `A_ij ~ N(mu_ij, sigma_ij^2)` for `i > j`.
///
/// `means` and `stds` are stored as full `P x min(P, nu)` matrices; only the
/// strictly lower entries are used.
#[derive(Clone, Debug, PartialEq)]
pub struct GenWishartParams {
    pub scale_chol: LowerTrapezoid,
    pub dof: usize,
    pub shapes: Vec<f64>,
    pub rates: Vec<f64>,
    pub means: Matrix,
    pub stds: Matrix,
}

impl GenWishartParams {
    /// Parameters under which `G ~ W(L L^T, nu)`.
    pub fn defaults(scale_chol: LowerTrapezoid, dof: usize) -> Result<Self> {
        if !scale_chol.is_square() || dof == 0 {
            return Err(Error::domain("GenWishartParams: need square L and nu >= 1"));
        }
        let p = scale_chol.rows();
        let nt = p.min(dof);
        let out = GenWishartParams {
            shapes: (0..nt).map(|j| (dof - j) as f64 / 2.0).collect(),
            rates: vec![0.5; nt],
            means: Matrix::zeros(p, nt),
            stds: Matrix::filled(p, nt, 1.0),
            scale_chol,
            dof,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.scale_chol.rows()
    }

    /// Number of factor columns, `min(P, nu)`.
    pub fn rank(&self) -> usize {
        self.dim().min(self.dof)
    }

    pub fn validate(&self) -> Result<()> {
        let (p, nt) = (self.dim(), self.rank());
        if !self.scale_chol.is_square() || self.dof == 0 {
            return Err(Error::domain("GenWishartParams: need square L and nu >= 1"));
        }
        if self.shapes.len() != nt || self.rates.len() != nt {
            return Err(Error::shape(format!(
                "GenWishartParams: expected {nt} diagonal parameters"
            )));
        }
        if self.means.shape() != (p, nt) || self.stds.shape() != (p, nt) {
            return Err(Error::shape(format!(
                "GenWishartParams: expected {p}x{nt} off-diagonal parameters"
            )));
        }
        if self.shapes.iter().chain(&self.rates).any(|&x| !(x > 0.0)) {
            return Err(Error::domain("GenWishartParams: Gamma parameters must be positive"));
        }
        for i in 0..p {
            for j in 0..nt.min(i) {
                if !(self.stds[(i, j)] > 0.0) || !self.means[(i, j)].is_finite() {
                    return Err(Error::domain(format!("GenWishartParams: entry ({i}, {j})")));
                }
            }
        }
        Ok(())
    }
}

/// Factor draw plus the uniforms and normals it consumed. Diagonal uniforms
/// are drawn first, then sub-diagonal normals in row-major order.
fn sample_factor(params: &GenWishartParams, rng: &mut RngStream) -> Result<(LowerTrapezoid, Vec<f64>)> {
    let (p, nt) = (params.dim(), params.rank());
    let mut a = Matrix::zeros(p, nt);
    let mut uniforms = Vec::with_capacity(nt);
    for j in 0..nt {
        let u = rng.uniform();
        let g = inv_reg_inc_gamma(params.shapes[j], u)? / params.rates[j];
        a[(j, j)] = g.sqrt();
        uniforms.push(u);
    }
    for i in 0..p {
        for j in 0..nt.min(i) {
            a[(i, j)] = params.means[(i, j)] + params.stds[(i, j)] * rng.normal();
        }
    }
    Ok((LowerTrapezoid::from_matrix_unchecked(a), uniforms))
}

/// Draws `(G, A)` with `G = L A A^T L^T`.
pub fn genwishart_sample(
    params: &GenWishartParams,
    rng: &mut RngStream,
) -> Result<(SymMatrix, LowerTrapezoid)> {
    params.validate()?;
    let (a, _) = sample_factor(params, rng)?;
    let lambda = params.scale_chol.as_matrix().matmul(a.as_matrix());
    let g = lambda.matmul_nt(&lambda).symmetrize();
    Ok((SymMatrix::from_matrix_unchecked(g), a))
}

/// Log-density of the factor `A` itself (Gamma on `A_jj^2` mapped to `A_jj`,
/// normals below the diagonal).
pub fn factor_logpdf(a: &LowerTrapezoid, params: &GenWishartParams) -> Result<f64> {
    let (p, nt) = (params.dim(), params.rank());
    if a.rows() != p || a.cols() != nt {
        return Err(Error::shape(format!(
            "factor is {}x{}, parameters expect {p}x{nt}",
            a.rows(),
            a.cols()
        )));
    }
    let m = a.as_matrix();
    let mut acc = 0.0;
    for j in 0..nt {
        let d = m[(j, j)];
        if !(d > 0.0) {
            return Err(Error::domain(format!("factor diagonal {j} is {d}")));
        }
        acc += gamma_logpdf_scalar(d * d, params.shapes[j], params.rates[j])? + (2.0 * d).ln();
    }
    for i in 0..p {
        for j in 0..nt.min(i) {
            acc += normal_logpdf(m[(i, j)], params.means[(i, j)], params.stds[(i, j)]);
        }
    }
    Ok(acc)
}

/// Log-density of `G = L A A^T L^T`, evaluated through `A`.
pub fn genwishart_logpdf(a: &LowerTrapezoid, params: &GenWishartParams) -> Result<f64> {
    params.validate()?;
    let (p, nu) = (params.dim(), params.dof);
    let lambda = LowerTrapezoid::from_matrix_unchecked(
        params.scale_chol.as_matrix().matmul(a.as_matrix()),
    );
    Ok(factor_logpdf(a, params)?
        - logjac_left_mult(&params.scale_chol, p, nu)?
        - logjac_chol_product(&lambda)?)
}

/// Conditional law `F_t | F_i ~ MN(K_ti K_ii^-1 F_i, K_tt.i, I)`.
#[derive(Clone, Debug)]
pub struct MatrixNormalCond {
    pub mean: Matrix,
    pub row_cov: SymMatrix,
}

impl MatrixNormalCond {
    /// `k_it` is `P_i x P_t`; `f_i` is `P_i x nu`. `k_ii` must already carry
    /// any jitter.
    pub fn new(k_ii: &SymMatrix, k_it: &Matrix, k_tt: &SymMatrix, f_i: &Matrix) -> Result<Self> {
        let (pi, pt) = (k_ii.dim(), k_tt.dim());
        if k_it.shape() != (pi, pt) || f_i.rows() != pi {
            return Err(Error::shape("matnorm_cond: inconsistent partition"));
        }
        let l = cholesky_matrix(k_ii.as_matrix())?;
        let w = tri_solve_lower(&l, k_it)?;
        let mean = w.matmul_tn(&tri_solve_lower(&l, f_i)?);
        let cov = k_tt.as_matrix().sub(&w.matmul_tn(&w)).symmetrize();
        Ok(MatrixNormalCond {
            mean,
            row_cov: SymMatrix::from_matrix_unchecked(cov),
        })
    }

    /// Per-row conditional variances, clamped at zero.
    pub fn row_variances(&self) -> Vec<f64> {
        self.row_cov.as_matrix().diag().into_iter().map(|v| v.max(0.0)).collect()
    }

    /// Samples each row independently with variance `diag(K_tt.i)`.
    pub fn sample(&self, rng: &mut RngStream) -> Matrix {
        let sd: Vec<f64> = self.row_variances().into_iter().map(f64::sqrt).collect();
        let mut out = self.mean.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                out[(i, j)] += sd[i] * rng.normal();
            }
        }
        out
    }
}

pub fn matnorm_cond_sample(
    k_ii: &SymMatrix,
    k_it: &Matrix,
    k_tt: &SymMatrix,
    f_i: &Matrix,
    rng: &mut RngStream,
) -> Result<Matrix> {
    Ok(MatrixNormalCond::new(k_ii, k_it, k_tt, f_i)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lt(rows: &[&[f64]]) -> LowerTrapezoid {
        LowerTrapezoid::new(Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn gamma_logpdf_examples() {
        let e = gamma_logpdf(1.0, &GammaParams::new(1.0, 1.0).unwrap()).unwrap();
        assert!((e + 1.0).abs() < 1e-15);
        let h = gamma_logpdf(1.0, &GammaParams::new(0.5, 0.5).unwrap()).unwrap();
        assert!((h - -1.418_938_533_204_672_7).abs() < 1e-12);
        assert!(gamma_logpdf(0.0, &GammaParams::new(1.0, 1.0).unwrap()).is_err());
        assert!(GammaParams::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn gamma_density_integrates_to_one() {
        let p = GammaParams::new(3.0, 2.0).unwrap();
        let (lo, hi, n) = (1e-4, 50.0, 200_000);
        let h = (hi - lo) / n as f64;
        let mut s = 0.0;
        for k in 0..=n {
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            s += w * gamma_logpdf(lo + k as f64 * h, &p).unwrap().exp();
        }
        assert!((s * h - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gamma_rate_derivative_is_scale_family() {
        let p = GammaParams::new(2.3, 1.7).unwrap();
        let d = gamma_from_uniform(&p, 0.3).unwrap();
        assert!((d.d_rate + d.value / p.rate).abs() < 1e-15);
        let h = 1e-6;
        let up = gamma_from_uniform(&GammaParams::new(2.3 + h, 1.7).unwrap(), 0.3).unwrap();
        let dn = gamma_from_uniform(&GammaParams::new(2.3 - h, 1.7).unwrap(), 0.3).unwrap();
        let fd = (up.value - dn.value) / (2.0 * h);
        assert!((fd - d.d_shape).abs() / fd.abs() < 1e-5);
    }

    #[test]
    fn logjac_examples() {
        assert!((logjac_chol_product(&LowerTrapezoid::identity(3)).unwrap() - 3.0 * LN_2).abs() < 1e-15);
        assert!((logjac_chol_product(&lt(&[&[2.0]])).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(logjac_left_mult(&LowerTrapezoid::identity(3), 3, 2).unwrap(), 0.0);
        let l = lt(&[&[2.0, 0.0], &[1.0, 3.0]]);
        let v = logjac_left_mult(&l, 2, 2).unwrap();
        assert!((v - (LN_2 + 2.0 * 3f64.ln())).abs() < 1e-15);
        assert!(logjac_chol_product(&lt(&[&[0.0]])).is_err());
    }

    #[test]
    fn singular_wishart_closed_form_examples() {
        let z = 1.7;
        let v = std_singular_wishart_logpdf(&SymMatrix::new(Matrix::scalar(z)).unwrap(), 1).unwrap();
        assert!((v - (-0.5 * (2.0 * PI * z).ln() - z / 2.0)).abs() < 1e-13);
        let v = std_singular_wishart_logpdf(&SymMatrix::identity(2), 3).unwrap();
        assert!((v - -3.531_024_246_969_290_8).abs() < 1e-12);
        let bad = SymMatrix::from_matrix_unchecked(Matrix::zeros(2, 2));
        assert_eq!(std_singular_wishart_logpdf(&bad, 1), Err(Error::SingularLeadingBlock));
    }

    #[test]
    fn bartlett_shape_contract() {
        let mut rng = RngStream::new(3, 0);
        let a = bartlett_sample(3, 2, &mut rng).unwrap();
        assert_eq!((a.rows(), a.cols()), (3, 2));
        assert!(a.diag().iter().all(|&d| d > 0.0));
        assert_eq!(a.as_matrix()[(0, 1)], 0.0);
        let sq = bartlett_sample(2, 5, &mut rng).unwrap();
        assert_eq!((sq.rows(), sq.cols()), (2, 2));
    }

    #[test]
    fn default_density_matches_textbook_wishart() {
        let mut rng = RngStream::new(4, 0);
        let l = lt(&[&[1.3, 0.0, 0.0], &[0.4, 0.8, 0.0], &[-0.2, 0.5, 1.1]]);
        let sigma = l.gram();
        let params = GenWishartParams::defaults(l, 5).unwrap();
        for _ in 0..5 {
            let (g, a) = genwishart_sample(&params, &mut rng).unwrap();
            let ours = genwishart_logpdf(&a, &params).unwrap();
            let reference = wishart_logpdf(&g, &sigma, 5.0).unwrap();
            assert!((ours - reference).abs() < 1e-8, "{ours} vs {reference}");
        }
    }

    #[test]
    fn scalar_density_integrates_to_one() {
        // P = 1, nu = 2, general variational parameters: G = l^2 a^2
        let params = GenWishartParams {
            scale_chol: lt(&[&[1.5]]),
            dof: 2,
            shapes: vec![1.7],
            rates: vec![0.8],
            means: Matrix::zeros(1, 1),
            stds: Matrix::filled(1, 1, 1.0),
        };
        let (lo, hi, n) = (1e-8, 200.0, 400_000);
        let h = (hi - lo) / n as f64;
        let mut s = 0.0;
        for k in 0..=n {
            let g: f64 = lo + k as f64 * h;
            let a = lt(&[&[g.sqrt() / 1.5]]);
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            s += w * genwishart_logpdf(&a, &params).unwrap().exp();
        }
        assert!((s * h - 1.0).abs() < 1e-3, "{}", s * h);
    }

    #[test]
    fn matnorm_zero_conditional_variance_is_deterministic() {
        let k = Matrix::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]]);
        let kii = SymMatrix::new(k.clone()).unwrap();
        let kit = k.block(0, 2, 0, 1);
        let ktt = SymMatrix::new(Matrix::scalar(2.0)).unwrap();
        let fi = Matrix::from_rows(&[&[1.0, -1.0], &[0.3, 2.0]]);
        let mut rng = RngStream::new(5, 0);
        let ft = matnorm_cond_sample(&kii, &kit, &ktt, &fi, &mut rng).unwrap();
        assert!(ft.max_abs_diff(&fi.block(0, 1, 0, 2)) < 1e-6);
    }
}
