//! Tape versions of the generalized Wishart factor sampler and densities.

use std::f64::consts::LN_2;
use std::rc::Rc;

use crate::autodiff::{gamma_reparam, Var};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Unconstrained-to-constrained factor parameters, already on the tape.
///
/// `shapes` and `rates` are `1 x r`; `means` and `stds` are `P x r` with only
/// the strictly lower entries meaningful, where `r = min(P, nu)`.
#[derive(Clone, Copy, Debug)]
pub struct FactorVars<'t> {
    pub shapes: Var<'t>,
    pub rates: Var<'t>,
    pub means: Var<'t>,
    pub stds: Var<'t>,
}

impl<'t> FactorVars<'t> {
    pub fn dim(&self) -> usize {
        self.means.rows()
    }

    pub fn rank(&self) -> usize {
        self.means.cols()
    }

    fn check(&self) -> Result<()> {
        let (p, r) = (self.dim(), self.rank());
        if r > p
            || self.shapes.shape() != (1, r)
            || self.rates.shape() != (1, r)
            || self.stds.shape() != (p, r)
        {
            return Err(Error::shape("inconsistent factor parameter shapes"));
        }
        Ok(())
    }

    /// Same parameters with gradients blocked.
    pub fn detached(&self) -> FactorVars<'t> {
        FactorVars {
            shapes: self.shapes.stop_gradient(),
            rates: self.rates.stop_gradient(),
            means: self.means.stop_gradient(),
            stds: self.stds.stop_gradient(),
        }
    }
}

/// `P x r` mask of the strictly lower entries.
pub fn strict_lower_mask(p: usize, r: usize) -> Rc<Matrix> {
    Rc::new(Matrix::from_fn(p, r, |i, j| if j < i { 1.0 } else { 0.0 }))
}

/// `P x r` mask of the leading diagonal.
pub fn diag_mask(p: usize, r: usize) -> Rc<Matrix> {
    Rc::new(Matrix::from_fn(p, r, |i, j| if i == j { 1.0 } else { 0.0 }))
}

/// Diagonal of a `P x r` (`r <= P`) matrix as an `r x 1` column.
pub fn trapezoid_diag<'t>(a: &Var<'t>) -> Result<Var<'t>> {
    Ok(a.mask(diag_mask(a.rows(), a.cols()))?.t().row_sum())
}

/// Reparameterized factor `A`: `A_jj = sqrt(P^-1(alpha_j, u_j) / beta_j)`,
/// `A_ij = mu_ij + sigma_ij xi_ij` below the diagonal.
///
/// `uniforms` has `r` entries; `normals` is `P x r` (only the strictly lower
/// entries matter).
pub fn sample_factor<'t>(v: &FactorVars<'t>, uniforms: &[f64], normals: &Matrix) -> Result<Var<'t>> {
    v.check()?;
    let (p, r) = (v.dim(), v.rank());
    if normals.shape() != (p, r) {
        return Err(Error::shape("sample_factor: normals shape"));
    }
    let tape = v.means.tape();
    let diag = gamma_reparam(&v.shapes, &v.rates, uniforms)?.sqrt().t().diag_embed()?;
    let diag = if p > r {
        diag.vstack(&tape.constant(Matrix::zeros(p - r, r)))?
    } else {
        diag
    };
    let xi = tape.constant(normals.clone());
    let off = v.means.add(&v.stds.mul(&xi)?)?.mask(strict_lower_mask(p, r))?;
    diag.add(&off)
}

/// `log Q(A)`: Gamma density of `A_jj^2` carried to `A_jj` plus the normal
/// densities below the diagonal.
pub fn factor_logpdf<'t>(a: &Var<'t>, v: &FactorVars<'t>) -> Result<Var<'t>> {
    v.check()?;
    let (p, r) = (v.dim(), v.rank());
    if a.shape() != (p, r) {
        return Err(Error::shape("factor_logpdf: factor shape"));
    }
    let d = trapezoid_diag(a)?.t();
    let gam = d.square().gamma_logpdf(&v.shapes, &v.rates)?.sum();
    let jac = d.ln().sum().add(&a.tape().scalar_const(r as f64 * LN_2))?;
    // off-strict-lower entries are compared against themselves, then masked
    let mask = strict_lower_mask(p, r);
    let x = a.mask(mask.clone())?;
    let mu = v.means.mask(mask.clone())?;
    let nrm = x.normal_logpdf(&mu, &v.stds)?.mask(mask)?.sum();
    gam.add(&jac)?.add(&nrm)
}

/// `sum_{i <= r} [log 2 + (P + 1 - i) log Lambda_ii]`.
pub fn logjac_chol_product<'t>(lambda: &Var<'t>) -> Result<Var<'t>> {
    let (p, r) = lambda.shape();
    let w = Matrix::from_fn(r, 1, |i, _| (p - i) as f64);
    let logd = trapezoid_diag(lambda)?.ln();
    logd.mask(Rc::new(w))?
        .sum()
        .add(&lambda.tape().scalar_const(r as f64 * LN_2))
}

/// `sum_i min(i, nu) log L_ii` for a square lower-triangular `L`.
pub fn logjac_left_mult<'t>(l: &Var<'t>, nu: usize) -> Result<Var<'t>> {
    let p = l.rows();
    let w = Matrix::from_fn(p, 1, |i, _| (i + 1).min(nu) as f64);
    l.diag()?.ln().mask(Rc::new(w)).map(|v| v.sum())
}
