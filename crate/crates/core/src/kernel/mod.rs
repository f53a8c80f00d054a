//! Squared-exponential kernels on Gram matrices and, for the input layer,
//! on raw features with per-dimension lengthscales.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SymMatrix, JITTER_REL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub variance: f64,
    pub lengthscale: f64,
    pub ard: Option<Vec<f64>>,
}

impl KernelConfig {
    pub fn new(variance: f64, lengthscale: f64) -> Result<Self> {
        let c = KernelConfig {
            variance,
            lengthscale,
            ard: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_ard(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let c = KernelConfig {
            variance,
            lengthscale: 1.0,
            ard: Some(lengthscales),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        if !ok(self.variance) || !ok(self.lengthscale) {
            return Err(Error::domain("kernel variance and lengthscale must be positive"));
        }
        if let Some(a) = &self.ard {
            if a.is_empty() || !a.iter().all(|&x| ok(x)) {
                return Err(Error::domain("ARD lengthscales must be positive"));
            }
        }
        Ok(())
    }
}

/// `R_ij = G_ii - 2 G_ij + G_jj`, with small negatives clamped to zero.
pub fn gram_to_sqdist(g: &SymMatrix) -> SymMatrix {
    let m = g.as_matrix();
    let d = m.diag();
    let n = d.len();
    let r = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (d[i] - 2.0 * m[(i, j)] + d[j]).max(0.0)
        }
    });
    SymMatrix::from_matrix_unchecked(r.symmetrize())
}

/// `s^2 exp(-R / (2 l^2))` plus jitter on the diagonal.
pub fn sqexp_from_gram(g: &SymMatrix, cfg: &KernelConfig) -> Result<SymMatrix> {
    cfg.validate()?;
    let r = gram_to_sqdist(g);
    let c = 0.5 / (cfg.lengthscale * cfg.lengthscale);
    let mut k = r.as_matrix().map(|x| cfg.variance * (-c * x).exp());
    jitter_diag(&mut k, cfg.variance);
    Ok(SymMatrix::from_matrix_unchecked(k))
}

/// `s^2 exp(-1/2 sum_d (X_id - X_jd)^2 / l_d^2)` plus jitter on the diagonal.
pub fn sqexp_ard_from_inputs(x: &Matrix, cfg: &KernelConfig) -> Result<SymMatrix> {
    cfg.validate()?;
    let ard = cfg
        .ard
        .as_ref()
        .ok_or_else(|| Error::Config("ARD kernel needs per-dimension lengthscales".into()))?;
    let k0 = sqexp_ard_cross(x, x, cfg.variance, ard)?;
    let mut k = k0.symmetrize();
    jitter_diag(&mut k, cfg.variance);
    Ok(SymMatrix::from_matrix_unchecked(k))
}

/// Cross-covariance between the rows of `x` and `z` under the ARD kernel.
pub fn sqexp_ard_cross(x: &Matrix, z: &Matrix, variance: f64, ard: &[f64]) -> Result<Matrix> {
    if x.cols() != ard.len() || z.cols() != ard.len() {
        return Err(Error::shape(format!(
            "ARD kernel: inputs have {} and {} columns, {} lengthscales",
            x.cols(),
            z.cols(),
            ard.len()
        )));
    }
    Ok(Matrix::from_fn(x.rows(), z.rows(), |i, j| {
        let r: f64 = (0..ard.len())
            .map(|d| {
                let t = (x[(i, d)] - z[(j, d)]) / ard[d];
                t * t
            })
            .sum();
        variance * (-0.5 * r).exp()
    }))
}

fn jitter_diag(k: &mut Matrix, variance: f64) {
    for i in 0..k.rows() {
        k[(i, i)] += JITTER_REL * variance;
    }
}

/// `1 / (2 l^2)` on the tape.
fn half_inv_sq<'t>(ls: &Var<'t>) -> Var<'t> {
    ls.ln().scale(-2.0).exp().scale(0.5)
}

/// `s^2 exp(-max(R, 0) / (2 l^2))` on the tape.
pub fn sqexp_from_sqdist_var<'t>(r: &Var<'t>, variance: &Var<'t>, ls: &Var<'t>) -> Result<Var<'t>> {
    r.clamp_min(0.0)
        .scale_by(&half_inv_sq(ls))?
        .neg()
        .exp()
        .scale_by(variance)
}

/// Squared distances from a cross Gram block: `g_a 1^T + 1 g_b^T - 2 G_ab`,
/// where `g_a` (`n x 1`) and `g_b` (`m x 1`) are the self-inner-products.
pub fn sqdist_from_gram_var<'t>(g_ab: &Var<'t>, g_a: &Var<'t>, g_b: &Var<'t>) -> Result<Var<'t>> {
    g_ab.scale(-2.0).add_col(g_a)?.add_row(&g_b.t())
}

/// Kernel of a square Gram matrix on the tape.
pub fn sqexp_gram_var<'t>(g: &Var<'t>, variance: &Var<'t>, ls: &Var<'t>) -> Result<Var<'t>> {
    let d = g.diag()?;
    let r = sqdist_from_gram_var(g, &d, &d)?;
    sqexp_from_sqdist_var(&r, variance, ls)
}

/// ARD cross-kernel between rows of `x` (`n x D`) and `z` (`m x D`) on the
/// tape; `ls` is `1 x D`.
pub fn sqexp_ard_var<'t>(
    x: &Var<'t>,
    z: &Var<'t>,
    variance: &Var<'t>,
    ls: &Var<'t>,
) -> Result<Var<'t>> {
    let inv = ls.ln().neg().exp();
    let xs = x.mul_row(&inv)?;
    let zs = z.mul_row(&inv)?;
    let r = sqdist_from_gram_var(&xs.matmul_nt(&zs)?, &xs.square().row_sum(), &zs.square().row_sum())?;
    r.clamp_min(0.0).scale(-0.5).exp().scale_by(variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck_many, Tape};
    use crate::numerics::RngStream;

    fn sym(rows: &[&[f64]]) -> SymMatrix {
        SymMatrix::new(Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn sqdist_examples() {
        let r = gram_to_sqdist(&SymMatrix::identity(2));
        assert_eq!(r.as_matrix(), &Matrix::from_rows(&[&[0.0, 2.0], &[2.0, 0.0]]));
        let r = gram_to_sqdist(&sym(&[&[1.0, 1.0], &[1.0, 1.0]]));
        assert_eq!(r.as_matrix(), &Matrix::zeros(2, 2));
        let r = gram_to_sqdist(&sym(&[&[4.0, 1.0], &[1.0, 1.0]]));
        assert_eq!(r.as_matrix()[(0, 1)], 3.0);
    }

    #[test]
    fn sqexp_examples() {
        let cfg = KernelConfig::new(1.0, 1.0).unwrap();
        let k = sqexp_from_gram(&SymMatrix::identity(3), &cfg).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { (-1.0f64).exp() };
                assert!((k.as_matrix()[(i, j)] - want).abs() < 1e-7);
            }
        }
        let ones = sym(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let k = sqexp_from_gram(&ones, &KernelConfig::new(2.5, 0.3).unwrap()).unwrap();
        assert!((k.as_matrix()[(0, 1)] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn ard_examples() {
        let x = Matrix::from_rows(&[&[0.0], &[2.0], &[0.0]]);
        let cfg = KernelConfig::with_ard(1.5, vec![1.0]).unwrap();
        let k = sqexp_ard_from_inputs(&x, &cfg).unwrap();
        assert!((k.as_matrix()[(0, 1)] - 1.5 * (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(k.as_matrix()[(0, 2)], 1.5);
        let wide = KernelConfig::with_ard(1.5, vec![1e12]).unwrap();
        let k = sqexp_ard_from_inputs(&x, &wide).unwrap();
        assert!((k.as_matrix()[(0, 1)] - 1.5).abs() < 1e-12);
        let bad = Matrix::zeros(2, 3);
        assert!(matches!(sqexp_ard_from_inputs(&bad, &cfg), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn gram_path_matches_feature_path() {
        let mut rng = RngStream::new(31, 0);
        for &(p, nu) in &[(4, 2), (5, 7), (3, 3)] {
            let f = Matrix::from_fn(p, nu, |_, _| rng.normal());
            let g = f.matmul_nt(&f).scale(1.0 / nu as f64);
            let cfg = KernelConfig::new(1.3, 0.8).unwrap();
            let k = sqexp_from_gram(&SymMatrix::from_matrix_unchecked(g), &cfg).unwrap();
            // feature path: squared distances between rows of F / sqrt(nu)
            let ard = KernelConfig::with_ard(1.3, vec![0.8 * (nu as f64).sqrt(); nu]).unwrap();
            let kf = sqexp_ard_from_inputs(&f, &ard).unwrap();
            assert!(k.as_matrix().max_abs_diff(kf.as_matrix()) < 1e-10);
        }
    }

    #[test]
    fn tape_kernels_match_and_gradcheck() {
        let mut rng = RngStream::new(32, 0);
        let f = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let g = f.matmul_nt(&f).scale(0.2);
        let cfg = KernelConfig::new(1.3, 0.8).unwrap();
        let k = sqexp_from_gram(&SymMatrix::from_matrix_unchecked(g.clone()), &cfg).unwrap();
        let tape = Tape::new();
        let kv = sqexp_gram_var(&tape.leaf(g.clone()), &tape.scalar(1.3), &tape.scalar(0.8)).unwrap();
        let mut kj = kv.value();
        for i in 0..4 {
            kj[(i, i)] += JITTER_REL * 1.3;
        }
        assert!(kj.max_abs_diff(k.as_matrix()) < 1e-14);

        let z = Matrix::from_fn(2, 3, |_, _| rng.normal());
        let direct = sqexp_ard_cross(&f, &z, 0.7, &[0.5, 1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let kv = sqexp_ard_var(
            &tape.leaf(f.clone()),
            &tape.leaf(z.clone()),
            &tape.scalar(0.7),
            &tape.leaf(Matrix::row_vector(&[0.5, 1.0, 2.0])),
        )
        .unwrap();
        assert!(kv.value().max_abs_diff(&direct) < 1e-13);

        let pts = vec![
            f.clone(),
            z,
            Matrix::scalar(0.7),
            Matrix::row_vector(&[0.5, 1.0, 2.0]),
            g,
            Matrix::scalar(0.9),
        ];
        let rep = gradcheck_many(
            |_, v| {
                let a = sqexp_ard_var(&v[0], &v[1], &v[2], &v[3])?.square().sum();
                let s = v[4].add(&v[4].t())?;
                let b = sqexp_gram_var(&s, &v[2], &v[5])?.sum();
                a.add(&b)
            },
            &pts,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }
}
