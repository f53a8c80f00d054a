//! Reverse-mode automatic differentiation over dense matrices.

mod tape;

pub use tape::{gamma_logpdf_scalar, gamma_reparam, implicit_gamma_shape_grad, Gradients, Tape, Var};

use crate::error::Result;
use crate::numerics::Matrix;

/// Largest relative discrepancy between tape gradients and fourth-order
/// central differences of `f` at `point`, `|a - fd| / (|a| + 1e-8)`.
pub fn gradcheck<F>(f: F, point: &Matrix, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let report = gradcheck_many(
        |t, xs| f(t, xs[0]),
        std::slice::from_ref(point),
        h,
    )?;
    Ok(report.max_rel_err)
}

/// Per-input outcome of [`gradcheck_many`].
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Multi-input form of [`gradcheck`]; every input is a leaf.
pub fn gradcheck_many<F>(f: F, points: &[Matrix], h: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Matrix> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = points.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.gradients(&out)?;
        vars.iter().map(|v| grads.wrt(v)).collect()
    };
    let eval = |pts: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut per_input = Vec::with_capacity(points.len());
    let mut work: Vec<Matrix> = points.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for idx in 0..points[k].len() {
            let x0 = points[k].as_slice()[idx];
            let mut at = |t: f64| -> Result<f64> {
                work[k].as_mut_slice()[idx] = x0 + t;
                eval(&work)
            };
            let fd = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            work[k].as_mut_slice()[idx] = x0;
            let an = a.as_slice()[idx];
            worst = worst.max((an - fd).abs() / (an.abs() + 1e-8));
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradcheckReport {
        max_rel_err,
        per_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use std::rc::Rc;

    fn randn(r: usize, c: usize, rng: &mut RngStream) -> Matrix {
        Matrix::from_vec(r, c, rng.normal_vec(r * c))
    }

    fn spd(n: usize, rng: &mut RngStream) -> Matrix {
        let a = randn(n, n, rng);
        a.matmul_nt(&a).add(&Matrix::identity(n).scale(n as f64))
    }

    #[test]
    fn matmul_trace_example() {
        let tape = Tape::new();
        let a = tape.leaf(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(Matrix::from_rows(&[&[0.5, -1.0], &[2.0, 0.0]]));
        let y = a.matmul(&b).unwrap().trace().unwrap();
        let g = tape.gradients(&y).unwrap();
        assert_eq!(g.wrt(&a), b.value().transpose());
        assert_eq!(g.wrt(&b), a.value().transpose());
    }

    #[test]
    fn elementwise_ops_pass_gradcheck() {
        let mut rng = RngStream::new(11, 0);
        let x = randn(3, 2, &mut rng).map(|v| v.abs() + 0.5);
        let err = gradcheck(
            |_, x| {
                let a = x.exp().mul(&x.ln())?;
                let b = x.sqrt().add(&x.square())?.softplus();
                let c = x.sigmoid().scale(3.0).sub(&a)?;
                Ok(b.mul(&c)?.sum())
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn broadcast_and_shape_ops_pass_gradcheck() {
        let mut rng = RngStream::new(12, 0);
        let pts = vec![
            randn(3, 4, &mut rng),
            randn(1, 4, &mut rng),
            randn(3, 1, &mut rng),
            randn(1, 1, &mut rng),
        ];
        let mask = Rc::new(Matrix::from_fn(3, 4, |i, j| if j <= i { 1.0 } else { 0.0 }));
        let rep = gradcheck_many(
            |_, v| {
                let a = v[0].add_row(&v[1])?.mul_col(&v[2])?;
                let b = v[0].mul_row(&v[1])?.add_col(&v[2])?.scale_by(&v[3])?;
                let c = a.mask(mask.clone())?.add(&b)?.add_scalar(&v[3])?;
                let d = c.slice_cols(1, 3)?.pad_cols(5)?.vstack(&c.pad_cols(5)?)?;
                let e = d.row_sum().square().sum();
                let f = c.t().matmul(&c)?.diag()?.diag_embed()?.trace()?;
                e.add(&f)
            },
            &pts,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn cholesky_gradcheck_symmetric_parametrization() {
        let mut rng = RngStream::new(13, 0);
        for n in 1..=5 {
            let a0 = spd(n, &mut rng);
            let w = randn(n, n, &mut rng);
            let err = gradcheck(
                |t, x| {
                    let s = x.add(&x.t())?.scale(0.5);
                    let l = s.cholesky()?;
                    let wv = t.constant(w.clone());
                    l.mul(&wv)?.sum().add(&l.log_diag_sum()?)
                },
                &a0,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "n = {n}: {err}");
        }
    }

    #[test]
    fn tri_solve_gradcheck() {
        let mut rng = RngStream::new(14, 0);
        let l0 = cholesky_lower(&spd(4, &mut rng));
        let b0 = randn(4, 3, &mut rng);
        let mask = Rc::new(Matrix::from_fn(4, 4, |i, j| if j <= i { 1.0 } else { 0.0 }));
        let rep = gradcheck_many(
            |_, v| {
                let l = v[0].mask(mask.clone())?;
                Ok(l.tri_solve(&v[1])?.square().sum())
            },
            &[l0, b0],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    fn cholesky_lower(a: &Matrix) -> Matrix {
        crate::numerics::cholesky_matrix(a).unwrap()
    }

    #[test]
    fn densities_pass_gradcheck() {
        let pts = vec![
            Matrix::from_rows(&[&[0.7, 2.5, 0.1]]),
            Matrix::from_rows(&[&[1.5, 0.3, 4.0]]),
            Matrix::from_rows(&[&[2.0, 0.5, 1.2]]),
        ];
        let rep = gradcheck_many(
            |_, v| {
                let g = v[0].gamma_logpdf(&v[1], &v[2])?.sum();
                let n = v[0].normal_logpdf(&v[1], &v[2])?.sum();
                g.add(&n)
            },
            &pts,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
        assert!(
            (gamma_logpdf_scalar(1.0, 0.5, 0.5).unwrap() - -1.418_938_533_204_672_7).abs() < 1e-12
        );
    }

    #[test]
    fn gamma_reparam_gradcheck_with_fixed_uniforms() {
        let mut rng = RngStream::new(15, 0);
        let u: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
        let pts = vec![
            Matrix::from_vec(1, 6, vec![0.3, 0.8, 1.5, 2.0, 5.0, 40.0]),
            Matrix::from_vec(1, 6, vec![0.5, 1.0, 2.0, 0.7, 3.0, 1.0]),
        ];
        let rep = gradcheck_many(
            |_, v| Ok(gamma_reparam(&v[0], &v[1], &u)?.ln().sum()),
            &pts,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(2.0));
        let y = x.square().stop_gradient().mul(&x).unwrap();
        let g = tape.gradients(&y).unwrap();
        assert_eq!(g.wrt(&x).item(), 4.0);
        assert_eq!(tape.last_backward_visits(), tape.len());
    }

    #[test]
    fn non_scalar_output_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(tape.gradients(&x).is_err());
        assert!(x.matmul(&tape.leaf(Matrix::zeros(3, 1))).is_err());
    }
}
