//! Executable oracles. Every check reports a measured error against a fixed
//! tolerance and passes when `measured <= tolerance`.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gamma_reparam, gradcheck_many, Tape, Var};
use crate::error::{Error, Result};
use crate::inference::{elbo_and_grad, elbo_batch, elbo_gradcheck, minibatch_indices};
use crate::kernel::{sqexp_ard_from_inputs, sqexp_from_gram, KernelConfig};
use crate::matdist::{
    bartlett_sample, genwishart_logpdf, genwishart_sample, logjac_chol_product, logjac_left_mult,
    std_singular_wishart_logpdf, wishart_logpdf, GenWishartParams, MatrixNormalCond,
};
use crate::model::{build_scale, dgp_prior_sample, dgp_prior_sample_rotated, dwp_prior_sample, DwpModel, ModelConfig, StlFlags};
use crate::numerics::{
    cholesky, reg_inc_gamma, tri_solve, LowerTrapezoid, Matrix, RngStream, SymMatrix, PSD_TOL,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Numerics,
    Jacobians,
    Density,
    Invariance,
    Gradients,
    PriorEquiv,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Numerics,
        Suite::Jacobians,
        Suite::Density,
        Suite::Invariance,
        Suite::Gradients,
        Suite::PriorEquiv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Numerics => "numerics",
            Suite::Jacobians => "jacobians",
            Suite::Density => "density",
            Suite::Invariance => "invariance",
            Suite::Gradients => "gradients",
            Suite::PriorEquiv => "prior-equiv",
        }
    }
}

/// A suite or every suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    One(Suite),
    All,
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Selection::All);
        }
        Suite::ALL
            .iter()
            .find(|x| x.name() == s)
            .map(|&x| Selection::One(x))
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Monte Carlo draws for moment checks.
    pub draws: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            draws: 100_000,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<12} {:<30} measured={:.3e} tol={:.1e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

struct Outcome {
    measured: f64,
    detail: String,
}

fn outcome(measured: f64, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        measured,
        detail: detail.into(),
    })
}

type CheckFn = fn(&VerifyOptions, RngStream) -> Result<Outcome>;

struct Check {
    suite: Suite,
    name: &'static str,
    tolerance: f64,
    run: CheckFn,
}

const CHECKS: &[Check] = &[
    Check { suite: Suite::Numerics, name: "cholesky-roundtrip", tolerance: 1e-8, run: cholesky_roundtrip },
    Check { suite: Suite::Numerics, name: "tri-solve-roundtrip", tolerance: 1e-9, run: tri_solve_roundtrip },
    Check { suite: Suite::Numerics, name: "inc-gamma-monotone-limits", tolerance: 1e-12, run: inc_gamma_monotone },
    Check { suite: Suite::Numerics, name: "rng-reproducible", tolerance: 0.0, run: rng_reproducible },
    Check { suite: Suite::Jacobians, name: "logjac-chol-product", tolerance: 1e-5, run: jac_chol_product },
    Check { suite: Suite::Jacobians, name: "logjac-left-mult", tolerance: 1e-5, run: jac_left_mult },
    Check { suite: Suite::Density, name: "singular-wishart-equivalence", tolerance: 1e-8, run: singular_equivalence },
    Check { suite: Suite::Density, name: "full-rank-wishart-scaled", tolerance: 1e-8, run: full_rank_scaled },
    Check { suite: Suite::Density, name: "sampler-density-pair", tolerance: 3.0, run: sampler_density_pair },
    Check { suite: Suite::Density, name: "wishart-mean", tolerance: 4.0, run: wishart_mean },
    Check { suite: Suite::Density, name: "wishart-variance", tolerance: 4.0, run: wishart_variance },
    Check { suite: Suite::Invariance, name: "conditional-factor-invariance", tolerance: 5.0, run: factor_invariance },
    Check { suite: Suite::Invariance, name: "unitary-feature-invariance", tolerance: 1e-12, run: unitary_invariance },
    Check { suite: Suite::Invariance, name: "kernel-feature-path", tolerance: 1e-10, run: kernel_feature_path },
    Check { suite: Suite::Invariance, name: "kernel-psd", tolerance: PSD_TOL, run: kernel_psd },
    Check { suite: Suite::Invariance, name: "gram-rank", tolerance: 0.0, run: gram_rank },
    Check { suite: Suite::Invariance, name: "scale-psd", tolerance: PSD_TOL, run: scale_psd },
    Check { suite: Suite::Invariance, name: "stl-primal-unchanged", tolerance: 0.0, run: stl_primal },
    Check { suite: Suite::Gradients, name: "primitive-gradcheck", tolerance: 1e-5, run: primitive_gradcheck },
    Check { suite: Suite::Gradients, name: "backward-visits-once", tolerance: 0.0, run: backward_visits },
    Check { suite: Suite::Gradients, name: "gamma-implicit-gradient", tolerance: 1e-3, run: gamma_implicit },
    Check { suite: Suite::Gradients, name: "elbo-gradcheck", tolerance: 1e-3, run: elbo_grad },
    Check { suite: Suite::Gradients, name: "elbo-minibatch-unbiased", tolerance: 4.0, run: elbo_unbiased },
    Check { suite: Suite::PriorEquiv, name: "dwp-dgp-moments", tolerance: 4.0, run: prior_equivalence },
];

/// Names of every registered check, in run order.
pub fn check_names(sel: Selection) -> Vec<&'static str> {
    selected(sel).map(|(_, c)| c.name).collect()
}

fn selected(sel: Selection) -> impl Iterator<Item = (usize, &'static Check)> {
    CHECKS
        .iter()
        .enumerate()
        .filter(move |(_, c)| sel == Selection::All || sel == Selection::One(c.suite))
}

fn execute(idx: usize, c: &Check, opts: &VerifyOptions) -> CheckResult {
    let rng = RngStream::new(opts.seed, 0x7665_7269_6679_0000 + idx as u64);
    let (measured, detail) = match (c.run)(opts, rng) {
        Ok(o) => (o.measured, o.detail),
        Err(e) => (f64::NAN, format!("error: {e}")),
    };
    CheckResult {
        suite: c.suite,
        name: c.name,
        measured,
        tolerance: c.tolerance,
        passed: measured <= c.tolerance,
        detail,
    }
}

/// Runs one check by name.
pub fn run_check(name: &str, opts: &VerifyOptions) -> Result<CheckResult> {
    let (idx, c) = selected(Selection::All)
        .find(|(_, c)| c.name == name)
        .ok_or_else(|| Error::Config(format!("unknown check `{name}`")))?;
    Ok(execute(idx, c, opts))
}

/// Runs the selected checks on separate threads, each with its own stream;
/// results come back in registration order.
pub fn run_suite(sel: Selection, opts: &VerifyOptions) -> Vec<CheckResult> {
    let picked: Vec<(usize, &Check)> = selected(sel).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = picked
            .iter()
            .map(|&(idx, c)| s.spawn(move || execute(idx, c, opts)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("check thread panicked")).collect()
    })
}

// ---------------------------------------------------------------- helpers

fn rand_lower(n: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => 0.5 + rng.uniform(),
        std::cmp::Ordering::Greater => 0.3 * rng.normal(),
        std::cmp::Ordering::Less => 0.0,
    })
}

fn rand_trapezoid(p: usize, r: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(p, r, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => 0.5 + rng.uniform(),
        std::cmp::Ordering::Greater => rng.normal(),
        std::cmp::Ordering::Less => 0.0,
    })
}

fn rand_spd(n: usize, rng: &mut RngStream) -> SymMatrix {
    let b = Matrix::from_fn(n, n, |_, _| rng.normal());
    let m = b.matmul_nt(&b).scale(1.0 / n as f64).add(&Matrix::identity(n).scale(0.5));
    SymMatrix::from_matrix_unchecked(m.symmetrize())
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn orthogonal(n: usize, rng: &mut RngStream) -> Matrix {
    let q = DMatrix::from_fn(n, n, |_, _| rng.normal()).qr().q();
    Matrix::from_fn(n, n, |i, j| q[(i, j)])
}

/// `max(0, -lambda_min / trace)`.
fn psd_violation(m: &Matrix) -> f64 {
    let e = to_na(&m.symmetrize()).symmetric_eigen().eigenvalues;
    let lo = e.iter().cloned().fold(f64::INFINITY, f64::min);
    (-lo / m.trace().max(f64::MIN_POSITIVE)).max(0.0)
}

fn trapezoid_coords(p: usize, r: usize) -> Vec<(usize, usize)> {
    (0..p).flat_map(|i| (0..r.min(i + 1)).map(move |j| (i, j))).collect()
}

/// `log |det J|` of `f` restricted to trapezoid coordinates, by central
/// differences.
fn fd_logdet(f: impl Fn(&Matrix) -> Matrix, x0: &Matrix, coords: &[(usize, usize)], h: f64) -> f64 {
    let k = coords.len();
    let mut jac = DMatrix::zeros(k, k);
    for (c, &(a, b)) in coords.iter().enumerate() {
        let mut xp = x0.clone();
        xp[(a, b)] += h;
        let mut xm = x0.clone();
        xm[(a, b)] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for (r, &(i, j)) in coords.iter().enumerate() {
            jac[(r, c)] = (fp[(i, j)] - fm[(i, j)]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

#[derive(Clone, Copy, Debug)]
struct Stats {
    mean: f64,
    se_mean: f64,
    var: f64,
    se_var: f64,
}

fn stats(xs: &[f64]) -> Stats {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    Stats {
        mean,
        se_mean: (var / n).sqrt(),
        var,
        se_var: ((m4 - var * var).max(0.0) / n).sqrt(),
    }
}

/// Largest z-scores of mean and variance differences between two samples,
/// entry by entry.
fn two_sample_z(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
    let mut zm = 0.0f64;
    let mut zv = 0.0f64;
    for (xa, xb) in a.iter().zip(b) {
        let (sa, sb) = (stats(xa), stats(xb));
        zm = zm.max((sa.mean - sb.mean).abs() / sa.se_mean.hypot(sb.se_mean).max(1e-300));
        zv = zv.max((sa.var - sb.var).abs() / sa.se_var.hypot(sb.se_var).max(1e-300));
    }
    (zm, zv)
}

fn upper_entries(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect()
}

fn push_all(acc: &mut Vec<Vec<f64>>, vals: Vec<f64>) {
    if acc.is_empty() {
        acc.resize(vals.len(), Vec::new());
    }
    for (a, v) in acc.iter_mut().zip(vals) {
        a.push(v);
    }
}

// --------------------------------------------------------------- numerics

fn cholesky_roundtrip(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for s in 0..100 {
        let l = rand_lower(1 + s % 8, &mut rng);
        let g = SymMatrix::from_matrix_unchecked(l.matmul_nt(&l).symmetrize());
        worst = worst.max(cholesky(&g)?.as_matrix().max_abs_diff(&l));
    }
    outcome(worst, "100 factors, dims 1-8, max abs error")
}

fn tri_solve_roundtrip(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for s in 0..100 {
        let n = 1 + s % 8;
        let l = rand_lower(n, &mut rng);
        let x = Matrix::from_fn(n, 3, |_, _| rng.normal());
        let back = tri_solve(&LowerTrapezoid::new(l.clone())?, &l.matmul(&x))?;
        worst = worst.max(back.max_abs_diff(&x));
    }
    outcome(worst, "100 systems, dims 1-8, max abs error")
}

fn inc_gamma_monotone(_: &VerifyOptions, _: RngStream) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for &a in &[0.1, 0.5, 1.0, 2.5, 10.0, 50.0, 300.0] {
        worst = worst.max(reg_inc_gamma(a, 0.0)?.abs());
        worst = worst.max((1.0 - reg_inc_gamma(a, 1e6 * a)?).abs());
        let mut prev = 0.0;
        for k in 0..=600 {
            let x = a * 1e-4 * 1e7f64.powf(k as f64 / 600.0);
            let v = reg_inc_gamma(a, x)?;
            worst = worst.max(prev - v);
            prev = v;
        }
    }
    outcome(worst, "7 shapes x 601-point grid, max decrease or limit error")
}

fn rng_reproducible(opts: &VerifyOptions, _: RngStream) -> Result<Outcome> {
    let mut a = RngStream::new(opts.seed, 42);
    let mut b = RngStream::new(opts.seed, 42);
    let mut bad = (0..10_000).filter(|_| a.next_u64() != b.next_u64()).count();
    let (mut c, mut d) = (a.split(1), a.split(2));
    if (0..16).all(|_| c.next_u64() == d.next_u64()) {
        bad += 1;
    }
    outcome(bad as f64, "mismatched draws over 10000 plus sibling-stream collision")
}

// -------------------------------------------------------------- jacobians

fn regime(k: usize, rng: &mut RngStream) -> (usize, usize) {
    let p = 1 + rng.below(4);
    let nu = if k.is_multiple_of(2) && p > 1 { 1 + rng.below(p - 1) } else { p + rng.below(3) };
    (p, nu)
}

fn jac_chol_product(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for k in 0..50 {
        let (p, nu) = regime(k, &mut rng);
        let r = p.min(nu);
        let lam = rand_trapezoid(p, r, &mut rng);
        let analytic = logjac_chol_product(&LowerTrapezoid::new(lam.clone())?)?;
        let fd = fd_logdet(|m| m.matmul_nt(m), &lam, &trapezoid_coords(p, r), 1e-6);
        worst = worst.max((fd - analytic).abs() / analytic.abs().max(1.0));
    }
    outcome(worst, "50 instances, P <= 4, nu < P and nu >= P")
}

fn jac_left_mult(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for k in 0..50 {
        let (p, nu) = regime(k, &mut rng);
        let r = p.min(nu);
        let l = rand_lower(p, &mut rng);
        let a = rand_trapezoid(p, r, &mut rng);
        let analytic = logjac_left_mult(&LowerTrapezoid::new(l.clone())?, p, nu)?;
        let fd = fd_logdet(|m| l.matmul(m), &a, &trapezoid_coords(p, r), 1e-6);
        worst = worst.max((fd - analytic).abs() / analytic.abs().max(1.0));
    }
    outcome(worst, "50 instances, P <= 4, nu < P and nu >= P")
}

// ---------------------------------------------------------------- density

fn singular_equivalence(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for p in 1..=5 {
        for nu in 1..=5 {
            let params = GenWishartParams::defaults(LowerTrapezoid::identity(p), nu)?;
            for _ in 0..4 {
                let a = bartlett_sample(p, nu, &mut rng)?;
                let g = SymMatrix::from_matrix_unchecked(a.as_matrix().matmul_nt(a.as_matrix()).symmetrize());
                let d = genwishart_logpdf(&a, &params)? - std_singular_wishart_logpdf(&g, nu)?;
                worst = worst.max(d.abs());
            }
        }
    }
    outcome(worst, "P, nu in 1..=5, 4 draws each, max abs difference")
}

fn full_rank_scaled(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for p in 1..=4 {
        for nu in p..p + 4 {
            let sigma = rand_spd(p, &mut rng);
            let params = GenWishartParams::defaults(cholesky(&sigma)?, nu)?;
            let (g, a) = genwishart_sample(&params, &mut rng)?;
            let d = genwishart_logpdf(&a, &params)? - wishart_logpdf(&g, &sigma, nu as f64)?;
            worst = worst.max(d.abs());
        }
    }
    outcome(worst, "random scale, P <= 4, nu >= P, max abs difference")
}

fn sampler_density_pair(opts: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let n = (opts.draws / 10).max(1000);
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for p in 1..=3 {
        let nu = 1 + rng.below(4);
        let l = cholesky(&rand_spd(p, &mut rng))?;
        let base = GenWishartParams::defaults(l, nu)?;
        let r = base.rank();
        let mut q = base.clone();
        for j in 0..r {
            q.shapes[j] *= 0.8 + 0.4 * rng.uniform();
            q.rates[j] = 0.4 + 0.3 * rng.uniform();
        }
        q.means = Matrix::from_fn(p, r, |_, _| 0.2 * rng.normal());
        q.stds = Matrix::from_fn(p, r, |_, _| 0.8 + 0.4 * rng.uniform());
        // E_q[p0 / q] = 1 when q's sampler and density agree
        let w: Vec<f64> = (0..n)
            .map(|_| {
                let (_, a) = genwishart_sample(&q, &mut rng)?;
                Ok((genwishart_logpdf(&a, &base)? - genwishart_logpdf(&a, &q)?).exp())
            })
            .collect::<Result<_>>()?;
        let s = stats(&w);
        let z = (s.mean - 1.0).abs() / s.se_mean;
        worst = worst.max(z);
        detail.push_str(&format!("P={p},nu={nu}: {:.4}+-{:.4} ", s.mean, s.se_mean));
    }
    outcome(worst, detail.trim_end().to_string())
}

/// Max z-scores of sampled mean and variance against `nu Sigma` and
/// `nu (Sigma_ij^2 + Sigma_ii Sigma_jj)`.
fn wishart_moment_z(opts: &VerifyOptions, rng: &mut RngStream) -> Result<(f64, f64)> {
    let p = 3;
    let (mut zm, mut zv) = (0.0f64, 0.0f64);
    for random_scale in [false, true] {
        for nu in [2usize, 5] {
            let sigma = if random_scale { rand_spd(p, rng) } else { SymMatrix::identity(p) };
            let params = GenWishartParams::defaults(cholesky(&sigma)?, nu)?;
            let mut samples = Vec::new();
            for _ in 0..opts.draws {
                let (g, _) = genwishart_sample(&params, rng)?;
                push_all(&mut samples, upper_entries(g.as_matrix()));
            }
            let s = sigma.as_matrix();
            let nf = nu as f64;
            let coords: Vec<(usize, usize)> = (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect();
            for (xs, &(i, j)) in samples.iter().zip(&coords) {
                let st = stats(xs);
                let mean = nf * s[(i, j)];
                let var = nf * (s[(i, j)] * s[(i, j)] + s[(i, i)] * s[(j, j)]);
                zm = zm.max((st.mean - mean).abs() / st.se_mean);
                zv = zv.max((st.var - var).abs() / st.se_var);
            }
        }
    }
    Ok((zm, zv))
}

fn wishart_mean(opts: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let (zm, _) = wishart_moment_z(opts, &mut rng)?;
    outcome(zm, format!("max z over entries, Sigma in {{I, random}}, nu in {{2, 5}}, {} draws", opts.draws))
}

fn wishart_variance(opts: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let (_, zv) = wishart_moment_z(opts, &mut rng)?;
    outcome(zv, format!("max z over entries, Sigma in {{I, random}}, nu in {{2, 5}}, {} draws", opts.draws))
}

// ------------------------------------------------------------- invariance

/// Max z-scores between `G_ti`, `G_tt` moments obtained from the factor
/// `L A` of a fixed `G_ii` and from the rotated factor `L A U`.
pub fn factor_invariance_z(draws: usize, rng: &mut RngStream) -> Result<(f64, f64)> {
    let (pi, pt, nu) = (3, 2, 2);
    let x = Matrix::column(&[-1.0, 0.1, 0.9, -0.4, 1.6]);
    let k = sqexp_ard_from_inputs(&x, &KernelConfig::with_ard(1.0, vec![1.0])?)?;
    let sig = k.as_matrix().scale(1.0 / nu as f64);
    let k_ii = SymMatrix::from_matrix_unchecked(sig.block(0, pi, 0, pi));
    let k_it = sig.block(0, pi, pi, pi + pt);
    let k_tt = SymMatrix::from_matrix_unchecked(sig.block(pi, pi + pt, pi, pi + pt));
    let params = GenWishartParams::defaults(cholesky(&k_ii)?, nu)?;
    let (_, a) = genwishart_sample(&params, rng)?;
    let f1 = params.scale_chol.as_matrix().matmul(a.as_matrix());
    let f2 = f1.matmul(&orthogonal(nu, rng));
    let mut sets = Vec::new();
    for f in [&f1, &f2] {
        let cond = MatrixNormalCond::new(&k_ii, &k_it, &k_tt, f)?;
        let mut acc = Vec::new();
        for _ in 0..draws {
            let ft = cond.sample(rng);
            let mut vals = ft.matmul_nt(f).into_vec();
            vals.extend(ft.matmul_nt(&ft).diag());
            push_all(&mut acc, vals);
        }
        sets.push(acc);
    }
    Ok(two_sample_z(&sets[0], &sets[1]))
}

fn factor_invariance(opts: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let (zm, zv) = factor_invariance_z(opts.draws, &mut rng)?;
    outcome(zm.max(zv), format!("mean z {zm:.2}, variance z {zv:.2}, {} draws per factor", opts.draws))
}

fn small_kernels(d: usize, layers: usize) -> Result<Vec<KernelConfig>> {
    let mut ks = vec![KernelConfig::with_ard(1.0, vec![1.0; d])?];
    for _ in 0..layers {
        ks.push(KernelConfig::new(1.0, 1.0)?);
    }
    Ok(ks)
}

fn unitary_invariance(opts: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let widths = [3usize, 2, 4];
    let x = Matrix::from_fn(5, 2, |_, _| rng.normal());
    let ks = small_kernels(2, widths.len())?;
    let rots: Vec<Matrix> = widths.iter().map(|&w| orthogonal(w, &mut rng)).collect();
    let mut worst = 0.0f64;
    for s in 0..20 {
        let stream = RngStream::new(opts.seed, 1000 + s);
        let plain = dgp_prior_sample(&x, &widths, &ks, 1e-8, 1, &mut stream.clone())?;
        let rot = dgp_prior_sample_rotated(&x, &widths, &ks, 1e-8, 1, Some(&rots), &mut stream.clone())?;
        for (a, b) in plain.grams.iter().zip(&rot.grams) {
            worst = worst.max(a.as_matrix().max_abs_diff(b.as_matrix()) / a.as_matrix().max_abs());
        }
    }
    outcome(worst, "20 draws, 3 layers, max relative Gram difference")
}

fn kernel_feature_path(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for s in 0..20 {
        let (p, nu) = (2 + s % 5, 1 + s % 6);
        let f = Matrix::from_fn(p, nu, |_, _| rng.normal());
        let g = SymMatrix::from_matrix_unchecked(f.matmul_nt(&f).scale(1.0 / nu as f64).symmetrize());
        let (var, ls) = (0.5 + rng.uniform(), 0.5 + rng.uniform());
        let k = sqexp_from_gram(&g, &KernelConfig::new(var, ls)?)?;
        let kf = sqexp_ard_from_inputs(&f, &KernelConfig::with_ard(var, vec![ls * (nu as f64).sqrt(); nu])?)?;
        worst = worst.max(k.as_matrix().max_abs_diff(kf.as_matrix()));
    }
    outcome(worst, "20 random feature matrices, max abs difference")
}

fn kernel_psd(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for s in 0..20 {
        let n = 3 + s % 6;
        let mut x = Matrix::from_fn(n, 2, |_, _| rng.normal());
        // duplicated rows make the noiseless kernel singular
        let dup = x.row(0).to_vec();
        x.row_mut(n - 1).copy_from_slice(&dup);
        let k1 = sqexp_ard_from_inputs(&x, &KernelConfig::with_ard(1.0, vec![0.7, 1.3])?)?;
        let f = Matrix::from_fn(n, 1 + s % 3, |_, _| rng.normal());
        let g = SymMatrix::from_matrix_unchecked(f.matmul_nt(&f).symmetrize());
        let k2 = sqexp_from_gram(&g, &KernelConfig::new(1.0, 3.0)?)?;
        for k in [k1, k2] {
            SymMatrix::new(k.as_matrix().clone())?;
            worst = worst.max(psd_violation(k.as_matrix()));
        }
    }
    outcome(worst, "40 kernels incl. duplicated inputs and low-rank Grams")
}

fn gram_rank(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let widths = [2usize, 4, 6, 9];
    let x = Matrix::from_fn(6, 2, |_, _| rng.normal());
    let ks = small_kernels(2, widths.len())?;
    let mut bad = 0;
    for _ in 0..10 {
        let s = dwp_prior_sample(&x, &widths, &ks, 1e-8, 1, &mut rng)?;
        for (g, &nu) in s.grams.iter().zip(&widths) {
            let sv = to_na(g.as_matrix()).singular_values();
            let top = sv.max();
            let rank = sv.iter().filter(|&&v| v > 1e-8 * top).count();
            if rank != nu.min(6) {
                bad += 1;
            }
        }
    }
    outcome(bad as f64, "P = 6, nu in {2, 4, 6, 9}, 10 draws, layers with wrong rank")
}

fn scale_psd(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for s in 0..20 {
        let n = 2 + s % 5;
        let f = Matrix::from_fn(n, 1 + s % n, |_, _| rng.normal());
        let k = SymMatrix::from_matrix_unchecked(f.matmul_nt(&f).symmetrize());
        let v = Matrix::from_fn(n, n, |_, _| rng.normal());
        for p in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let sc = build_scale(&k, 1 + s % 4, &v, p)?;
            worst = worst.max(psd_violation(sc.as_matrix()));
        }
    }
    outcome(worst, "20 (K, V) pairs incl. singular K, p on a grid over [0, 1]")
}

fn tiny_problem(rng: &mut RngStream, n: usize, depth: usize) -> Result<(DwpModel, Matrix, Matrix)> {
    let x = Matrix::from_fn(n, 2, |_, _| rng.normal());
    let y = Matrix::from_fn(n, 1, |i, _| x[(i, 0)].sin() + 0.1 * rng.normal());
    let mut cfg = ModelConfig::new(depth, 4, 2);
    cfg.widths = vec![3; depth];
    let mut m = DwpModel::init(cfg, &x, rng)?;
    for (_, v) in m.params.entries_mut() {
        for e in v.as_mut_slice() {
            *e += 0.05 * rng.normal();
        }
    }
    Ok((m, x, y))
}

fn stl_primal(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let (m, x, y) = tiny_problem(&mut rng, 10, 2)?;
    let mut worst = 0.0f64;
    for s in 0..5 {
        let r = rng.split(s);
        let (a, _) = elbo_and_grad(&m, &x, &y, 10, 2, 1.0, StlFlags::ALL, &r)?;
        let (b, _) = elbo_and_grad(&m, &x, &y, 10, 2, 1.0, StlFlags::NONE, &r)?;
        worst = worst.max((a.total - b.total).abs());
        for (u, v) in a.kl_terms.iter().zip(&b.kl_terms) {
            worst = worst.max((u - v).abs());
        }
    }
    outcome(worst, "5 streams, |ELBO and KL differences| with and without STL")
}

// -------------------------------------------------------------- gradients

type PrimFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

struct Prim {
    name: &'static str,
    inputs: fn(usize, usize, &mut RngStream) -> Vec<Matrix>,
    f: PrimFn,
}

fn normals(r: usize, c: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.normal())
}

fn positives(r: usize, c: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(r, c, |_, _| 0.5 + 2.0 * rng.uniform())
}

fn away_from_zero(r: usize, c: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(r, c, |_, _| {
        let v = rng.normal();
        v + 0.2f64.copysign(v)
    })
}

fn alternating_mask(r: usize, c: usize) -> Rc<Matrix> {
    Rc::new(Matrix::from_fn(r, c, |i, j| ((i + j) % 2) as f64))
}

const PRIMS: &[Prim] = &[
    Prim { name: "add", inputs: |r, c, g| vec![normals(r, c, g), normals(r, c, g)], f: |_, v| v[0].add(&v[1]) },
    Prim { name: "sub", inputs: |r, c, g| vec![normals(r, c, g), normals(r, c, g)], f: |_, v| v[0].sub(&v[1]) },
    Prim { name: "mul", inputs: |r, c, g| vec![normals(r, c, g), normals(r, c, g)], f: |_, v| v[0].mul(&v[1]) },
    Prim { name: "scale", inputs: |r, c, g| vec![normals(r, c, g)], f: |_, v| Ok(v[0].scale(-1.7)) },
    Prim { name: "neg", inputs: |r, c, g| vec![normals(r, c, g)], f: |_, v| Ok(v[0].neg()) },
    Prim { name: "add_scalar", inputs: |r, c, g| vec![normals(r, c, g), normals(1, 1, g)], f: |_, v| v[0].add_scalar(&v[1]) },
    Prim { name: "scale_by", inputs: |r, c, g| vec![normals(r, c, g), normals(1, 1, g)], f: |_, v| v[0].scale_by(&v[1]) },
    Prim { name: "matmul", inputs: |r, c, g| { let k = 1 + g.below(6); vec![normals(r, k, g), normals(k, c, g)] }, f: |_, v| v[0].matmul(&v[1]) },
    Prim { name: "matmul_nt", inputs: |r, c, g| { let k = 1 + g.below(6); vec![normals(r, k, g), normals(c, k, g)] }, f: |_, v| v[0].matmul_nt(&v[1]) },
    Prim { name: "transpose", inputs: |r, c, g| vec![normals(r, c, g)], f: |_, v| Ok(v[0].t()) },
    Prim { name: "exp", inputs: |r, c, g| vec![normals(r, c, g)], f: |_, v| Ok(v[0].exp()) },
    Prim { name: "ln", inputs: |r, c, g| vec![positives(r, c, g)], f: |_, v| Ok(v[0].ln()) },
    Prim { name: "square", inputs: |r, c, g| vec![normals(r, c, g)], f: |_, v| Ok(v[0].square()) },
    Prim { name: "sqrt", inputs: |r, c, g| vec![positives(r, c, g)], f: |_, v| Ok(v[0].sqrt()) },
    Prim { name: "softplus", inputs: |r, c, g| vec![normals(r, c, g).scale(3.0)], f: |_, v| Ok(v[0].softplus()) },
    Prim { name: "sigmoid", inputs: |r, c, g| vec![normals(r, c, g).scale(3.0)], f: |_, v| Ok(v[0].sigmoid()) },
    Prim { name: "clamp_min", inputs: |r, c, g| vec![away_from_zero(r, c, g)], f: |_, v| Ok(v[0].clamp_min(0.0)) },
    Prim { name: "sum", inputs: |r, c, g| vec![normals(r, c, g)], f: |_, v| Ok(v[0].sum()) },
    Prim { name: "row_sum", inputs: |r, c, g| vec![normals(r, c, g)], f: |_, v| Ok(v[0].row_sum()) },
    Prim { name: "trace", inputs: |r, _, g| vec![normals(r, r, g)], f: |_, v| v[0].trace() },
    Prim { name: "diag", inputs: |r, _, g| vec![normals(r, r, g)], f: |_, v| v[0].diag() },
    Prim { name: "diag_embed", inputs: |r, _, g| vec![normals(r, 1, g)], f: |_, v| v[0].diag_embed() },
    Prim { name: "mask", inputs: |r, c, g| vec![normals(r, c, g)], f: |_, v| v[0].mask(alternating_mask(v[0].rows(), v[0].cols())) },
    Prim { name: "add_row", inputs: |r, c, g| vec![normals(r, c, g), normals(1, c, g)], f: |_, v| v[0].add_row(&v[1]) },
    Prim { name: "add_col", inputs: |r, c, g| vec![normals(r, c, g), normals(r, 1, g)], f: |_, v| v[0].add_col(&v[1]) },
    Prim { name: "mul_row", inputs: |r, c, g| vec![normals(r, c, g), normals(1, c, g)], f: |_, v| v[0].mul_row(&v[1]) },
    Prim { name: "mul_col", inputs: |r, c, g| vec![normals(r, c, g), normals(r, 1, g)], f: |_, v| v[0].mul_col(&v[1]) },
    Prim { name: "slice_cols", inputs: |r, c, g| vec![normals(r, c, g)], f: |_, v| v[0].slice_cols(v[0].cols() / 2, v[0].cols()) },
    Prim { name: "pad_cols", inputs: |r, c, g| vec![normals(r, c, g)], f: |_, v| v[0].pad_cols(v[0].cols() + 2) },
    Prim { name: "vstack", inputs: |r, c, g| { let r2 = 1 + g.below(6); vec![normals(r, c, g), normals(r2, c, g)] }, f: |_, v| v[0].vstack(&v[1]) },
    Prim {
        name: "cholesky",
        inputs: |r, _, g| vec![normals(r, r, g)],
        f: |t, v| v[0].matmul_nt(&v[0])?.add(&t.constant(Matrix::identity(v[0].rows())))?.cholesky(),
    },
    Prim { name: "tri_solve", inputs: |r, c, g| vec![rand_lower(r, g), normals(r, c, g)], f: |_, v| v[0].tri_solve(&v[1]) },
    Prim { name: "log_diag_sum", inputs: |r, _, g| vec![rand_lower(r, g)], f: |_, v| v[0].log_diag_sum() },
    Prim {
        name: "gamma_logpdf",
        inputs: |r, c, g| vec![positives(r, c, g), positives(r, c, g), positives(r, c, g)],
        f: |_, v| v[0].gamma_logpdf(&v[1], &v[2]),
    },
    Prim {
        name: "normal_logpdf",
        inputs: |r, c, g| vec![normals(r, c, g), normals(r, c, g), positives(r, c, g)],
        f: |_, v| v[0].normal_logpdf(&v[1], &v[2]),
    },
];

/// Fixed weights in `[0.5, 1.5]` so a scalar objective sees every output entry.
fn weighted_sum<'t>(t: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let w = Matrix::from_fn(y.rows(), y.cols(), |i, j| 1.0 + 0.5 * ((1 + 7 * i + 3 * j) as f64).cos());
    Ok(y.mul(&t.constant(w))?.sum())
}

fn eval_prim<'t>(p: &Prim, t: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    weighted_sum(t, (p.f)(t, v)?)
}

fn primitive_gradcheck(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut worst_name = "";
    for p in PRIMS {
        for _ in 0..50 {
            let (r, c) = (1 + rng.below(6), 1 + rng.below(6));
            let pts = (p.inputs)(r, c, &mut rng);
            let rep = gradcheck_many(|t, v| eval_prim(p, t, v), &pts, 1e-3)?;
            if rep.max_rel_err > worst {
                worst = rep.max_rel_err;
                worst_name = p.name;
            }
        }
    }
    outcome(worst, format!("{} primitives x 50 points, worst: {worst_name}", PRIMS.len()))
}

fn backward_visits(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let mut bad = 0;
    for p in PRIMS {
        let (r, c) = (1 + rng.below(6), 1 + rng.below(6));
        let pts = (p.inputs)(r, c, &mut rng);
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = pts.into_iter().map(|m| tape.leaf(m)).collect();
        let out = eval_prim(p, &tape, &vars)?;
        // a second use of an intermediate result must not revisit it
        let out = out.add(&out.square())?;
        tape.gradients(&out)?;
        if tape.last_backward_visits() != tape.len() {
            bad += 1;
        }
    }
    outcome(bad as f64, format!("{} graphs, tapes whose sweep count differs from node count", PRIMS.len()))
}

fn gamma_implicit(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for &a in &[0.2, 0.7, 1.0, 2.5, 7.0, 30.0] {
        let u: Vec<f64> = (0..4).map(|_| 0.02 + 0.96 * rng.uniform()).collect();
        let pts = [Matrix::filled(1, 4, a), Matrix::filled(1, 4, 0.3 + rng.uniform())];
        let rep = gradcheck_many(|t, v| weighted_sum(t, gamma_reparam(&v[0], &v[1], &u)?), &pts, 1e-5 * a.max(1.0))?;
        worst = worst.max(rep.max_rel_err);
    }
    outcome(worst, "shapes 0.2-30, 4 uniforms each, vs differences of the inverse CDF")
}

fn elbo_grad(_: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let (m, x, y) = tiny_problem(&mut rng, 8, 1)?;
    let rep = elbo_gradcheck(&m, &x, &y, 16, &rng.split(7), 1e-5)?;
    let (name, worst) = rep
        .into_iter()
        .fold((String::new(), 0.0f64), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    outcome(worst, format!("one Wishart layer, every parameter group, worst: {name}"))
}

fn elbo_unbiased(opts: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let n = 12;
    let (m, x, y) = tiny_problem(&mut rng, n, 1)?;
    let reps = (opts.draws / 10).clamp(1000, 10_000);
    let mut full = Vec::with_capacity(reps);
    let mut mini = Vec::with_capacity(reps);
    for k in 0..reps as u64 {
        full.push(elbo_batch(&m, &x, &y, n, 1, &rng.split(2 * k))?.total);
        let s = rng.split(2 * k + 1);
        let idx = minibatch_indices(n, 4, &s);
        mini.push(elbo_batch(&m, &x.select_rows(&idx), &y.select_rows(&idx), n, 1, &s.split(1))?.total);
    }
    let (a, b) = (stats(&full), stats(&mini));
    let z = (a.mean - b.mean).abs() / a.se_mean.hypot(b.se_mean);
    outcome(z, format!("full {:.4}, minibatch {:.4}, {reps} replicates", a.mean, b.mean))
}

// ------------------------------------------------------------ prior-equiv

/// Max z-scores between entrywise moments of `G_1`, `G_2` drawn from the
/// Wishart-process prior and from the explicit-feature prior (P = 3,
/// nu = 2, two layers).
pub fn prior_equivalence_z(draws: usize, rng: &mut RngStream) -> Result<(f64, f64)> {
    let x = Matrix::column(&[-1.0, 0.2, 1.3]);
    let widths = [2usize, 2];
    let ks = small_kernels(1, 2)?;
    let jitter = 1e-10;
    let mut dwp = Vec::new();
    let mut dgp = Vec::new();
    for _ in 0..draws {
        let a = dwp_prior_sample(&x, &widths, &ks, jitter, 1, rng)?;
        let b = dgp_prior_sample(&x, &widths, &ks, jitter, 1, rng)?;
        let flat = |s: &crate::model::PriorSample| -> Vec<f64> {
            s.grams.iter().flat_map(|g| upper_entries(g.as_matrix())).collect()
        };
        push_all(&mut dwp, flat(&a));
        push_all(&mut dgp, flat(&b));
    }
    Ok(two_sample_z(&dwp, &dgp))
}

fn prior_equivalence(opts: &VerifyOptions, mut rng: RngStream) -> Result<Outcome> {
    let (zm, zv) = prior_equivalence_z(opts.draws, &mut rng)?;
    outcome(zm.max(zv), format!("mean z {zm:.2}, variance z {zv:.2}, {} draws each", opts.draws))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Selection>().unwrap(), Selection::All);
        assert_eq!("prior-equiv".parse::<Selection>().unwrap(), Selection::One(Suite::PriorEquiv));
        assert!("nope".parse::<Selection>().is_err());
        assert!(check_names(Selection::All).len() >= 12);
        for s in Suite::ALL {
            assert!(!check_names(Selection::One(s)).is_empty());
        }
    }

    #[test]
    fn fast_checks_pass() {
        let opts = VerifyOptions {
            seed: 1,
            draws: 2000,
        };
        for name in ["cholesky-roundtrip", "logjac-chol-product", "logjac-left-mult", "singular-wishart-equivalence", "gram-rank"] {
            let r = run_check(name, &opts).unwrap();
            assert!(r.passed, "{r}");
        }
    }
}
