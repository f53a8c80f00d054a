//! Doubly-stochastic ELBO estimation, Adam, schedules and the training loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::forward::forward;
use crate::model::{DwpModel, ParamTree, StlFlags};
use crate::numerics::{logsumexp, Matrix, RngStream};

/// Averaged ELBO sample; `kl_terms` holds `log P - log Q` per Wishart layer,
/// then the output layer, so `total = loglik_term + sum(kl_terms)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub total: f64,
    pub loglik_term: f64,
    pub kl_terms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub steps: usize,
    pub lr_initial: f64,
    pub lr_drop_step: usize,
    pub lr_final: f64,
    pub kl_anneal_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            steps: 20_000,
            lr_initial: 1e-2,
            lr_drop_step: 10_000,
            lr_final: 1e-3,
            kl_anneal_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.lr_drop_step {
            self.lr_initial
        } else {
            self.lr_final
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.lr_initial) || !pos(self.lr_final) || !pos(self.eps) {
            return Err(Error::Config("learning rates and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `min(1, step / kl_anneal_steps)`; 1 when annealing is disabled.
pub fn kl_anneal_factor(step: usize, sched: &TrainSchedule) -> f64 {
    if sched.kl_anneal_steps == 0 {
        1.0
    } else {
        (step as f64 / sched.kl_anneal_steps as f64).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamTree<Matrix>,
    pub v: ParamTree<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamTree<Matrix>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam descent step on `grads` (gradients of a loss).
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamTree<Matrix>,
    grads: &ParamTree<Matrix>,
    state: &mut AdamState,
    lr: f64,
    sched: &TrainSchedule,
) -> Result<()> {
    for (name, g) in grads.entries() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (sched.beta1, sched.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let gs = grads.entries();
    let ms = state.m.entries_mut();
    let vs = state.v.entries_mut();
    let ps = params.entries_mut();
    for (((_, p), (_, m)), ((_, v), (_, g))) in ps.into_iter().zip(ms).zip(vs.into_iter().zip(gs)) {
        let (p, m, v, g) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice(), g.as_slice());
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * mh / (vh.sqrt() + sched.eps);
        }
    }
    Ok(())
}

/// Monte Carlo stream for sample `k` of a step; independent of how many
/// other samples are drawn.
fn sample_stream(rng: &RngStream, k: usize) -> RngStream {
    rng.split(1 + k as u64)
}

/// ELBO estimate averaged over `s` samples. Sample `k` draws all its noise
/// from `rng.split(k + 1)`, so repeated calls with the same `rng` reuse the
/// same random numbers.
pub fn elbo_batch(
    model: &DwpModel,
    x: &Matrix,
    y: &Matrix,
    n_total: usize,
    s: usize,
    rng: &RngStream,
) -> Result<ElboEstimate> {
    Ok(elbo_impl(model, x, y, n_total, s, 1.0, model.config.stl, rng, false)?.0)
}

/// Estimate plus gradients of the annealed objective
/// `mean_s [loglik + anneal * sum(kl)]` with respect to every parameter.
pub fn elbo_and_grad(
    model: &DwpModel,
    x: &Matrix,
    y: &Matrix,
    n_total: usize,
    s: usize,
    anneal: f64,
    stl: StlFlags,
    rng: &RngStream,
) -> Result<(ElboEstimate, ParamTree<Matrix>)> {
    let (est, g) = elbo_impl(model, x, y, n_total, s, anneal, stl, rng, true)?;
    Ok((est, g.expect("gradients requested")))
}

#[allow(clippy::too_many_arguments)]
fn elbo_impl(
    model: &DwpModel,
    x: &Matrix,
    y: &Matrix,
    n_total: usize,
    s: usize,
    anneal: f64,
    stl: StlFlags,
    rng: &RngStream,
    want_grad: bool,
) -> Result<(ElboEstimate, Option<ParamTree<Matrix>>)> {
    if s == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    if x.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let n_kl = model.config.depth + 1;
    let mut loglik = 0.0;
    let mut kl = vec![0.0; n_kl];
    let mut grads = if want_grad { Some(model.params.zeros_like()) } else { None };
    for k in 0..s {
        let tape = Tape::new();
        let leaves = model.params.leaves(&tape);
        let mut stream = sample_stream(rng, k);
        let out = forward(&tape, &model.config, &leaves, x, Some(y), n_total, stl, &mut stream)?;
        loglik += out.loglik.item();
        for (acc, v) in kl.iter_mut().zip(&out.kl) {
            *acc += v.item();
        }
        if let Some(gacc) = grads.as_mut() {
            let obj = out.objective(anneal)?;
            let g = tape.gradients(&obj)?;
            for ((_, acc), (_, leaf)) in gacc.entries_mut().into_iter().zip(leaves.entries()) {
                if let Some(gm) = g.get(leaf) {
                    acc.add_scaled_assign(1.0 / s as f64, gm);
                }
            }
        }
    }
    let sf = s as f64;
    let loglik_term = loglik / sf;
    let kl_terms: Vec<f64> = kl.into_iter().map(|v| v / sf).collect();
    let total = loglik_term + kl_terms.iter().sum::<f64>();
    Ok((
        ElboEstimate {
            total,
            loglik_term,
            kl_terms,
        },
        grads,
    ))
}

/// Per-group relative gradient error of a single-sample ELBO with common
/// random numbers: every group is perturbed coordinate by coordinate and
/// compared with central differences.
pub fn elbo_gradcheck(
    model: &DwpModel,
    x: &Matrix,
    y: &Matrix,
    n_total: usize,
    rng: &RngStream,
    h: f64,
) -> Result<Vec<(String, f64)>> {
    let (_, grads) = elbo_and_grad(model, x, y, n_total, 1, 1.0, StlFlags::NONE, rng)?;
    let eval = |m: &DwpModel| -> Result<f64> {
        Ok(elbo_impl(m, x, y, n_total, 1, 1.0, StlFlags::NONE, rng, false)?.0.total)
    };
    let mut work = model.clone();
    let mut out = Vec::new();
    let names: Vec<String> = model.params.entries().into_iter().map(|(n, _)| n).collect();
    for (gi, name) in names.iter().enumerate() {
        let analytic = grads.entries()[gi].1.clone();
        let mut worst = 0.0f64;
        for idx in 0..analytic.len() {
            let x0 = model.params.entries()[gi].1.as_slice()[idx];
            set_coord(&mut work, gi, idx, x0 + h);
            let fp = eval(&work)?;
            set_coord(&mut work, gi, idx, x0 - h);
            let fm = eval(&work)?;
            set_coord(&mut work, gi, idx, x0);
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice()[idx];
            worst = worst.max((a - fd).abs() / (a.abs() + 1e-8));
        }
        out.push((name.clone(), worst));
    }
    Ok(out)
}

fn set_coord(m: &mut DwpModel, group: usize, idx: usize, value: f64) {
    let mut entries = m.params.entries_mut();
    entries[group].1.as_mut_slice()[idx] = value;
}

/// One line of the metrics trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub elbo: f64,
    pub loglik_term: f64,
    pub kl_per_layer: Vec<f64>,
    pub lr: f64,
    pub anneal: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub seed: u64,
    pub batch_size: usize,
    pub samples: usize,
}

/// Minibatch rows for `step`: all rows if the batch covers the data,
/// otherwise a uniformly random subset without replacement.
pub fn minibatch_indices(n: usize, batch: usize, rng: &RngStream) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut perm = rng.split(0).permutation(n);
    perm.truncate(batch);
    perm
}

/// Runs `sched.steps` Adam steps on the annealed objective. Each record is
/// passed to `on_step` as it is produced. On a non-finite loss or gradient
/// the run stops with the model left at its last finite parameters.
pub fn train(
    model: &mut DwpModel,
    x: &Matrix,
    y: &Matrix,
    sched: &TrainSchedule,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&TraceRecord) -> Result<()>,
) -> Result<Vec<TraceRecord>> {
    sched.validate()?;
    if x.rows() == 0 || x.rows() != y.rows() {
        return Err(Error::EmptyDataset);
    }
    let n = x.rows();
    let base = RngStream::new(opts.seed, 0x74_7261_696e);
    let mut state = AdamState::new(&model.params);
    let mut trace = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let stream = base.split(step as u64);
        let idx = minibatch_indices(n, opts.batch_size, &stream);
        let xb = x.select_rows(&idx);
        let yb = y.select_rows(&idx);
        let anneal = kl_anneal_factor(step, sched);
        let lr = sched.lr_at(step);
        let (est, grads) = elbo_and_grad(
            model,
            &xb,
            &yb,
            n,
            opts.samples,
            anneal,
            model.config.stl,
            &stream.split(1),
        )?;
        if !est.total.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let loss_grads = grads.map(|_, g| g.scale(-1.0));
        let mut next = model.params.clone();
        adam_step(&mut next, &loss_grads, &mut state, lr, sched)?;
        if !next.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        model.params = next;
        let rec = TraceRecord {
            step,
            elbo: est.total,
            loglik_term: est.loglik_term,
            kl_per_layer: est.kl_terms,
            lr,
            anneal,
        };
        on_step(&rec)?;
        trace.push(rec);
    }
    Ok(trace)
}

/// Average per-point test log-likelihood in original target units:
/// per point, `logsumexp_s log N(y; m_s, v_s + noise) - log S`, where
/// `(m_s, v_s)` is the final layer's conditional predictive given sample `s`,
/// then minus `sum_c log(y_std_c)`.
pub fn test_loglik(
    model: &DwpModel,
    x: &Matrix,
    y: &Matrix,
    s: usize,
    rng: &RngStream,
    y_std: &[f64],
) -> Result<f64> {
    let per_point = predictive_logdensities(model, x, y, s, rng)?;
    let shift: f64 = y_std.iter().map(|v| v.ln()).sum();
    Ok(per_point.iter().sum::<f64>() / per_point.len() as f64 - shift)
}

/// Per-point mixture predictive log-density in standardized units.
pub fn predictive_logdensities(
    model: &DwpModel,
    x: &Matrix,
    y: &Matrix,
    s: usize,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    if x.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if y.shape() != (x.rows(), model.config.output_dim) {
        return Err(Error::shape("test targets do not match inputs"));
    }
    let n = x.rows();
    let mut logs = vec![Vec::with_capacity(s); n];
    for k in 0..s {
        let tape = Tape::new();
        let leaves = model.params.leaves(&tape);
        let mut stream = sample_stream(rng, k);
        let out = forward(&tape, &model.config, &leaves, x, None, n, StlFlags::NONE, &mut stream)?;
        let mean = out.output.mean.value();
        let var = out.output.var.value();
        let noise = out.output.noise_var.item();
        for i in 0..n {
            let v = var[(i, 0)] + noise;
            let mut lp = 0.0;
            for c in 0..y.cols() {
                let d = y[(i, c)] - mean[(i, c)];
                lp += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * d * d / v;
            }
            logs[i].push(lp);
        }
    }
    let ln_s = (s as f64).ln();
    Ok(logs.iter().map(|l| logsumexp(l) - ln_s).collect())
}

/// Mixture predictive mean, in standardized units.
pub fn predict_mean(model: &DwpModel, x: &Matrix, s: usize, rng: &RngStream) -> Result<Matrix> {
    let n = x.rows();
    let mut acc = Matrix::zeros(n, model.config.output_dim);
    for k in 0..s {
        let tape = Tape::new();
        let leaves = model.params.leaves(&tape);
        let mut stream = sample_stream(rng, k);
        let out = forward(&tape, &model.config, &leaves, x, None, n, StlFlags::NONE, &mut stream)?;
        acc.add_scaled_assign(1.0 / s as f64, &out.output.mean.value());
    }
    Ok(acc)
}
