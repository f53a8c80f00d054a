//! One Monte Carlo sample of the doubly-stochastic ELBO on a tape.

use std::f64::consts::PI;
use std::rc::Rc;

use super::params::{LayerParams, ModelConfig, OutputLayerParams, ParamTree, StlFlags};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::{sqdist_from_gram_var, sqexp_ard_var, sqexp_from_sqdist_var, sqexp_gram_var};
use crate::matdist::diff::{
    factor_logpdf, logjac_chol_product, logjac_left_mult, sample_factor, FactorVars,
};
use crate::numerics::{Matrix, RngStream};

/// What a layer's kernel is evaluated on.
#[derive(Clone, Copy, Debug)]
pub enum LayerInput<'t> {
    /// Raw inducing inputs `z` (`P_i x D`) and batch inputs `x` (`B x D`).
    Features { z: Var<'t>, x: Var<'t> },
    /// Gram blocks: `g_ii` (`P_i x P_i`), `g_ti` (`B x P_i`), `g_tt` diagonal (`B x 1`).
    Gram {
        g_ii: Var<'t>,
        g_ti: Var<'t>,
        g_tt: Var<'t>,
    },
}

impl<'t> LayerInput<'t> {
    pub fn batch_len(&self) -> usize {
        match self {
            LayerInput::Features { x, .. } => x.rows(),
            LayerInput::Gram { g_ti, .. } => g_ti.rows(),
        }
    }
}

/// Kernel blocks; only the diagonal of `K_tt` is ever needed.
#[derive(Clone, Copy, Debug)]
pub struct KernelBlocks<'t> {
    pub k_ii: Var<'t>,
    /// `B x P_i`.
    pub k_ti: Var<'t>,
    /// `B x 1`.
    pub k_tt: Var<'t>,
}

pub fn kernel_blocks<'t>(
    input: &LayerInput<'t>,
    var_raw: &Var<'t>,
    ls_raw: &Var<'t>,
) -> Result<KernelBlocks<'t>> {
    let var = var_raw.softplus();
    let ls = ls_raw.softplus();
    let tape = var.tape();
    let b = input.batch_len();
    let k_tt = tape.constant(Matrix::filled(b, 1, 1.0)).scale_by(&var)?;
    match input {
        LayerInput::Features { z, x } => Ok(KernelBlocks {
            k_ii: sqexp_ard_var(z, z, &var, &ls)?,
            k_ti: sqexp_ard_var(x, z, &var, &ls)?,
            k_tt,
        }),
        LayerInput::Gram { g_ii, g_ti, g_tt } => {
            let d_i = g_ii.diag()?;
            let r_ti = sqdist_from_gram_var(g_ti, g_tt, &d_i)?;
            Ok(KernelBlocks {
                k_ii: sqexp_gram_var(g_ii, &var, &ls)?,
                k_ti: sqexp_from_sqdist_var(&r_ti, &var, &ls)?,
                k_tt,
            })
        }
    }
}

fn jitter_eye<'t>(tape: &'t Tape, n: usize, jitter: f64) -> Var<'t> {
    tape.constant(Matrix::identity(n).scale(jitter))
}

/// Output of one Wishart layer for one sample.
#[derive(Clone, Copy, Debug)]
pub struct WishartLayerSample<'t> {
    pub g_ii: Var<'t>,
    pub g_ti: Var<'t>,
    pub g_tt: Var<'t>,
    /// Bartlett-type factor `A` (`P_i x r`).
    pub a: Var<'t>,
    pub log_p: Var<'t>,
    pub log_q: Var<'t>,
}

/// `(1 - p) K / nu + p V V^T` on the tape.
pub fn build_scale_var<'t>(k: &Var<'t>, nu: usize, v: &Var<'t>, p: &Var<'t>) -> Result<Var<'t>> {
    let one_minus_p = k.tape().scalar_const(1.0).sub(p)?;
    k.scale(1.0 / nu as f64)
        .scale_by(&one_minus_p)?
        .add(&v.matmul_nt(v)?.scale_by(p)?)
}

/// Samples `G_ii = L A A^T L^T` from `q`, scores it under `q` and under the
/// conditional prior `W(K / nu, nu)`, and samples the train/test blocks
/// from the conditional prior row by row.
///
/// The prior density is evaluated on `A_p = L_p^-1 L A`, the prior-side
/// factor of the same `G_ii`; the `dG/dLambda` Jacobian is shared.
pub fn wishart_layer<'t>(
    blocks: &KernelBlocks<'t>,
    params: &LayerParams<Var<'t>>,
    nu: usize,
    jitter: f64,
    stl: StlFlags,
    rng: &mut RngStream,
) -> Result<WishartLayerSample<'t>> {
    let tape = blocks.k_ii.tape();
    let pi = blocks.k_ii.rows();
    let b = blocks.k_ti.rows();
    let r = pi.min(nu);
    let inv_nu = 1.0 / nu as f64;

    let sig_p = blocks.k_ii.scale(inv_nu).add(&jitter_eye(tape, pi, jitter))?;
    let l_p = sig_p.cholesky().map_err(|e| e.at(0, "prior scale cholesky"))?;
    let p = params.p_logit.sigmoid();
    let sig_q = build_scale_var(&blocks.k_ii, nu, &params.v, &p)?.add(&jitter_eye(tape, pi, jitter))?;
    let l_q = sig_q.cholesky().map_err(|e| e.at(0, "posterior scale cholesky"))?;

    let fv = FactorVars {
        shapes: params.alpha_raw.softplus(),
        rates: params.beta_raw.softplus(),
        means: params.mu,
        stds: params.sigma_raw.softplus(),
    };
    let uniforms: Vec<f64> = (0..r).map(|_| rng.uniform()).collect();
    let xi = Matrix::from_vec(pi, r, rng.normal_vec(pi * r));
    let a = sample_factor(&fv, &uniforms, &xi)?;
    let lam = l_q.matmul(&a)?;

    let fq = FactorVars {
        shapes: if stl.alpha { fv.shapes.stop_gradient() } else { fv.shapes },
        rates: if stl.beta { fv.rates.stop_gradient() } else { fv.rates },
        means: if stl.mu { fv.means.stop_gradient() } else { fv.means },
        stds: if stl.sigma { fv.stds.stop_gradient() } else { fv.stds },
    };
    let jac_g = logjac_chol_product(&lam).map_err(|e| e.at(0, "log Q"))?;
    let log_q = factor_logpdf(&a, &fq)
        .map_err(|e| e.at(0, "log Q"))?
        .sub(&logjac_left_mult(&l_q, nu)?)?
        .sub(&jac_g)?;

    let a_p = l_p.tri_solve(&lam)?;
    let prior = FactorVars {
        shapes: tape.constant(Matrix::from_fn(1, r, |_, j| (nu - j) as f64 / 2.0)),
        rates: tape.constant(Matrix::filled(1, r, 0.5)),
        means: tape.constant(Matrix::zeros(pi, r)),
        stds: tape.constant(Matrix::filled(pi, r, 1.0)),
    };
    let log_p = factor_logpdf(&a_p, &prior)
        .map_err(|e| e.at(0, "log P"))?
        .sub(&logjac_left_mult(&l_p, nu)?)?
        .sub(&jac_g)?;

    let g_ii = lam.matmul_nt(&lam)?;

    // conditional prior for the batch rows: F_t | F_i with F_i = [L A | 0]
    let w = l_p.tri_solve(&blocks.k_ti.t().scale(inv_nu))?;
    let mean = w.t().matmul(&a_p)?;
    let mean = if nu > r { mean.pad_cols(nu)? } else { mean };
    let var = blocks
        .k_tt
        .scale(inv_nu)
        .sub(&w.square().t().row_sum())?
        .clamp_min(1e-12);
    let xi_t = tape.constant(Matrix::from_vec(b, nu, rng.normal_vec(b * nu)));
    let f_t = mean.add(&xi_t.mul_col(&var.sqrt())?)?;
    let g_ti = f_t.slice_cols(0, r)?.matmul_nt(&lam)?;
    let g_tt = f_t.square().row_sum();
    Ok(WishartLayerSample {
        g_ii,
        g_ti,
        g_tt,
        a,
        log_p,
        log_q,
    })
}

/// Output of the final GP layer for one sample.
#[derive(Clone, Copy, Debug)]
pub struct OutputSample<'t> {
    pub f_i: Var<'t>,
    /// Sampled predictions `B x c`.
    pub f_t: Var<'t>,
    /// Conditional predictive mean `B x c` and variance `B x 1` given `F_i`.
    pub mean: Var<'t>,
    pub var: Var<'t>,
    pub noise_var: Var<'t>,
    pub log_p: Var<'t>,
    pub log_q: Var<'t>,
}

/// Lower-triangular `S` from its raw form: strict lower as is, diagonal
/// through softplus.
pub fn output_chol<'t>(chol_raw: &Var<'t>) -> Result<Var<'t>> {
    let n = chol_raw.rows();
    let strict = Rc::new(Matrix::from_fn(n, n, |i, j| if j < i { 1.0 } else { 0.0 }));
    let diag = chol_raw.diag()?.softplus().diag_embed()?;
    chol_raw.mask(strict)?.add(&diag)
}

pub fn output_layer<'t>(
    blocks: &KernelBlocks<'t>,
    params: &OutputLayerParams<Var<'t>>,
    jitter: f64,
    rng: &mut RngStream,
) -> Result<OutputSample<'t>> {
    let tape = blocks.k_ii.tape();
    let pi = blocks.k_ii.rows();
    let b = blocks.k_ti.rows();
    let c = params.means.cols();
    let half_log_2pi = 0.5 * (2.0 * PI).ln();

    let l_p = blocks
        .k_ii
        .add(&jitter_eye(tape, pi, jitter))?
        .cholesky()
        .map_err(|e| e.at(0, "output prior cholesky"))?;
    // q(U) = N(means, S S^T) on whitened outputs, F_i = L_p U
    let s = output_chol(&params.chol_raw)?;
    let eps = tape.constant(Matrix::from_vec(pi, c, rng.normal_vec(pi * c)));
    let u = params.means.add(&s.matmul(&eps)?)?;
    let f_i = l_p.matmul(&u)?;

    let norm = tape.scalar_const(-((pi * c) as f64) * half_log_2pi);
    let log_jac = l_p.log_diag_sum()?.scale(c as f64);
    let quad_q = s.tri_solve(&u.sub(&params.means)?)?.square().sum().scale(-0.5);
    let log_q = norm
        .add(&quad_q)?
        .sub(&s.log_diag_sum()?.scale(c as f64))?
        .sub(&log_jac)?;
    let log_p = norm.add(&u.square().sum().scale(-0.5))?.sub(&log_jac)?;

    let w = l_p.tri_solve(&blocks.k_ti.t())?;
    let mean = w.t().matmul(&u)?;
    let var = blocks
        .k_tt
        .sub(&w.square().t().row_sum())?
        .clamp_min(1e-12);
    let xi = tape.constant(Matrix::from_vec(b, c, rng.normal_vec(b * c)));
    let f_t = mean.add(&xi.mul_col(&var.sqrt())?)?;
    Ok(OutputSample {
        f_i,
        f_t,
        mean,
        var,
        noise_var: params.noise_raw.softplus(),
        log_p,
        log_q,
    })
}

/// `sum log N(y; f, noise_var)` over all entries.
pub fn gaussian_loglik<'t>(y: &Var<'t>, f: &Var<'t>, noise_var: &Var<'t>) -> Result<Var<'t>> {
    let std = noise_var.sqrt();
    let stds = y.tape().constant(Matrix::filled(y.rows(), y.cols(), 1.0)).scale_by(&std)?;
    Ok(y.normal_logpdf(f, &stds)?.sum())
}

/// One ELBO sample: likelihood term already scaled by `N / B`, and one
/// `log P - log Q` term per Wishart layer followed by the output layer.
#[derive(Clone, Debug)]
pub struct ElboSample<'t> {
    pub loglik: Var<'t>,
    pub kl: Vec<Var<'t>>,
    pub output: OutputSample<'t>,
}

impl<'t> ElboSample<'t> {
    /// `loglik + anneal * sum(kl)`.
    pub fn objective(&self, anneal: f64) -> Result<Var<'t>> {
        let mut acc = self.loglik;
        for k in &self.kl {
            acc = acc.add(&k.scale(anneal))?;
        }
        Ok(acc)
    }
}

/// Runs every layer for one Monte Carlo sample. `y` may be `None` for
/// prediction-only passes, in which case the likelihood term is zero.
pub fn forward<'t>(
    tape: &'t Tape,
    cfg: &ModelConfig,
    params: &ParamTree<Var<'t>>,
    x: &Matrix,
    y: Option<&Matrix>,
    n_total: usize,
    stl: StlFlags,
    rng: &mut RngStream,
) -> Result<ElboSample<'t>> {
    if x.cols() != cfg.input_dim {
        return Err(Error::shape(format!(
            "batch has {} input columns, model expects {}",
            x.cols(),
            cfg.input_dim
        )));
    }
    let b = x.rows();
    let mut input = LayerInput::Features {
        z: params.inducing_inputs,
        x: tape.constant(x.clone()),
    };
    let mut kl = Vec::with_capacity(cfg.depth + 1);
    for (l, lp) in params.layers.iter().enumerate() {
        let blocks = kernel_blocks(&input, &lp.kern_var_raw, &lp.kern_ls_raw)
            .map_err(|e| e.at(l + 1, "kernel"))?;
        let s = wishart_layer(&blocks, lp, cfg.widths[l], cfg.jitter, stl, rng)
            .map_err(|e| relabel(e, l + 1))?;
        kl.push(s.log_p.sub(&s.log_q)?);
        input = LayerInput::Gram {
            g_ii: s.g_ii,
            g_ti: s.g_ti,
            g_tt: s.g_tt,
        };
    }
    let out_layer = cfg.depth + 1;
    let blocks = kernel_blocks(&input, &params.output.kern_var_raw, &params.output.kern_ls_raw)
        .map_err(|e| e.at(out_layer, "kernel"))?;
    let out = output_layer(&blocks, &params.output, cfg.jitter, rng).map_err(|e| relabel(e, out_layer))?;
    kl.push(out.log_p.sub(&out.log_q)?);
    let loglik = match y {
        Some(y) => {
            if y.shape() != (b, cfg.output_dim) {
                return Err(Error::shape(format!(
                    "targets are {:?}, expected ({b}, {})",
                    y.shape(),
                    cfg.output_dim
                )));
            }
            let yv = tape.constant(y.clone());
            gaussian_loglik(&yv, &out.f_t, &out.noise_var)
                .map_err(|e| e.at(out_layer, "likelihood"))?
                .scale(n_total as f64 / b.max(1) as f64)
        }
        None => tape.scalar_const(0.0),
    };
    Ok(ElboSample {
        loglik,
        kl,
        output: out,
    })
}

fn relabel(e: Error, layer: usize) -> Error {
    match e {
        Error::Numerical { term, source, .. } => Error::Numerical {
            layer,
            term,
            source,
        },
        e => e.at(layer, "layer"),
    }
}
