use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::{sqexp_ard_from_inputs, sqexp_from_gram, KernelConfig};
use crate::numerics::{cholesky_matrix, softplus, softplus_inv, Matrix, RngStream, SymMatrix};

/// Which factor parameters are detached inside `log Q` ("sticking the
/// landing"). Primal values are unaffected; only gradients change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StlFlags {
    pub alpha: bool,
    pub beta: bool,
    pub mu: bool,
    pub sigma: bool,
}

impl StlFlags {
    pub const ALL: StlFlags = StlFlags {
        alpha: true,
        beta: true,
        mu: true,
        sigma: true,
    };
    pub const NONE: StlFlags = StlFlags {
        alpha: false,
        beta: false,
        mu: false,
        sigma: false,
    };
}

impl Default for StlFlags {
    fn default() -> Self {
        StlFlags::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of Wishart layers `L`; the output GP layer comes on top.
    pub depth: usize,
    /// Degrees of freedom `nu_l`, one per Wishart layer.
    pub widths: Vec<usize>,
    pub inducing: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Absolute diagonal jitter added to every kernel before factorizing.
    pub jitter: f64,
    pub init_noise: f64,
    pub init_kernel_variance: f64,
    /// First-layer ARD lengthscale at initialization; `None` means `sqrt(D)`.
    pub init_ard_lengthscale: Option<f64>,
    pub init_gram_lengthscale: f64,
    pub stl: StlFlags,
}

impl ModelConfig {
    /// Defaults with every width equal to the input dimension.
    pub fn new(depth: usize, inducing: usize, input_dim: usize) -> Self {
        ModelConfig {
            depth,
            widths: vec![input_dim; depth],
            inducing,
            input_dim,
            output_dim: 1,
            batch_size: 256,
            train_samples: 10,
            eval_samples: 100,
            jitter: 1e-6,
            init_noise: 0.1,
            init_kernel_variance: 1.0,
            init_ard_lengthscale: None,
            init_gram_lengthscale: 1.0,
            stl: StlFlags::ALL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.widths.len() != self.depth {
            return bad("widths must have one entry per layer");
        }
        if self.widths.contains(&0) {
            return bad("widths must be positive");
        }
        if self.inducing == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return bad("inducing, input_dim and output_dim must be positive");
        }
        if self.batch_size == 0 || self.train_samples == 0 || self.eval_samples == 0 {
            return bad("batch size and sample counts must be positive");
        }
        if !(self.jitter >= 0.0) || !(self.init_noise > 0.0) || !(self.init_kernel_variance > 0.0) {
            return bad("jitter must be >= 0, init noise and kernel variance > 0");
        }
        Ok(())
    }

    /// Factor columns of layer `l` (0-based): `min(P_i, nu_l)`.
    pub fn rank(&self, l: usize) -> usize {
        self.inducing.min(self.widths[l])
    }
}

/// Variational and kernel parameters of one Wishart layer, in unconstrained
/// form. `T` is `Matrix` for stored values and `Var` on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    /// `P_i x P_i`.
    pub v: T,
    /// `1 x 1`; `p = sigmoid(p_logit)`.
    pub p_logit: T,
    /// `1 x r`; `alpha = softplus(alpha_raw)`.
    pub alpha_raw: T,
    /// `1 x r`; `beta = softplus(beta_raw)`.
    pub beta_raw: T,
    /// `P_i x r`; strictly lower entries used.
    pub mu: T,
    /// `P_i x r`; `sigma = softplus(sigma_raw)`.
    pub sigma_raw: T,
    pub kern_var_raw: T,
    /// `1 x D` for a first layer (ARD), `1 x 1` otherwise.
    pub kern_ls_raw: T,
}

/// Final GP layer, whitened: `F_i = L U` with `L L^T = K(G_ii)` and
/// `q(U) = N(means_c, S S^T)` per output column `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputLayerParams<T> {
    /// `P_i x c`.
    pub means: T,
    /// `P_i x P_i`; lower triangle used, diagonal through softplus.
    pub chol_raw: T,
    pub kern_var_raw: T,
    pub kern_ls_raw: T,
    /// `1 x 1`; noise variance `softplus(noise_raw)`.
    pub noise_raw: T,
}

/// All model parameters in a fixed, named order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree<T> {
    /// `P_i x D` inducing inputs.
    pub inducing_inputs: T,
    pub layers: Vec<LayerParams<T>>,
    pub output: OutputLayerParams<T>,
}

impl<T> LayerParams<T> {
    const NAMES: [&'static str; 8] = [
        "v",
        "p_logit",
        "alpha_raw",
        "beta_raw",
        "mu",
        "sigma_raw",
        "kern_var_raw",
        "kern_ls_raw",
    ];

    fn fields(&self) -> [&T; 8] {
        [
            &self.v,
            &self.p_logit,
            &self.alpha_raw,
            &self.beta_raw,
            &self.mu,
            &self.sigma_raw,
            &self.kern_var_raw,
            &self.kern_ls_raw,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 8] {
        [
            &mut self.v,
            &mut self.p_logit,
            &mut self.alpha_raw,
            &mut self.beta_raw,
            &mut self.mu,
            &mut self.sigma_raw,
            &mut self.kern_var_raw,
            &mut self.kern_ls_raw,
        ]
    }

    fn from_fields(mut it: impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("field count");
        LayerParams {
            v: next(),
            p_logit: next(),
            alpha_raw: next(),
            beta_raw: next(),
            mu: next(),
            sigma_raw: next(),
            kern_var_raw: next(),
            kern_ls_raw: next(),
        }
    }
}

impl<T> OutputLayerParams<T> {
    const NAMES: [&'static str; 5] = ["means", "chol_raw", "kern_var_raw", "kern_ls_raw", "noise_raw"];

    fn fields(&self) -> [&T; 5] {
        [
            &self.means,
            &self.chol_raw,
            &self.kern_var_raw,
            &self.kern_ls_raw,
            &self.noise_raw,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 5] {
        [
            &mut self.means,
            &mut self.chol_raw,
            &mut self.kern_var_raw,
            &mut self.kern_ls_raw,
            &mut self.noise_raw,
        ]
    }

    fn from_fields(mut it: impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("field count");
        OutputLayerParams {
            means: next(),
            chol_raw: next(),
            kern_var_raw: next(),
            kern_ls_raw: next(),
            noise_raw: next(),
        }
    }
}

impl<T> ParamTree<T> {
    /// `(name, value)` pairs in canonical order, e.g. `layer1.alpha_raw`.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = vec![("inducing_inputs".to_string(), &self.inducing_inputs)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (n, v) in LayerParams::<T>::NAMES.iter().zip(layer.fields()) {
                out.push((format!("layer{}.{n}", l + 1), v));
            }
        }
        for (n, v) in OutputLayerParams::<T>::NAMES.iter().zip(self.output.fields()) {
            out.push((format!("output.{n}"), v));
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![("inducing_inputs".to_string(), &mut self.inducing_inputs)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (n, v) in LayerParams::<T>::NAMES.iter().zip(layer.fields_mut()) {
                out.push((format!("layer{}.{n}", l + 1), v));
            }
        }
        for (n, v) in OutputLayerParams::<T>::NAMES.iter().zip(self.output.fields_mut()) {
            out.push((format!("output.{n}"), v));
        }
        out
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<ParamTree<U>> {
        let mut vals = Vec::new();
        for (name, v) in self.entries() {
            vals.push(f(&name, v)?);
        }
        let mut it = vals.into_iter();
        let inducing_inputs = it.next().expect("inducing inputs");
        let layers = (0..self.layers.len())
            .map(|_| LayerParams::from_fields(it.by_ref().take(8)))
            .collect();
        let output = OutputLayerParams::from_fields(it);
        Ok(ParamTree {
            inducing_inputs,
            layers,
            output,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ParamTree<U> {
        self.try_map(|n, v| Ok(f(n, v))).expect("infallible")
    }
}

impl ParamTree<Matrix> {
    /// Every parameter as a differentiable leaf on `tape`.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> ParamTree<Var<'t>> {
        self.map(|_, m| tape.leaf(m.clone()))
    }

    pub fn zeros_like(&self) -> ParamTree<Matrix> {
        self.map(|_, m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, m)| m.is_finite())
    }
}

/// Effective (constrained) kernel settings for display and prior sampling.
pub fn kernel_of(var_raw: &Matrix, ls_raw: &Matrix) -> Result<KernelConfig> {
    let variance = softplus(var_raw.item());
    if ls_raw.len() == 1 && ls_raw.rows() == 1 && ls_raw.cols() == 1 {
        KernelConfig::new(variance, softplus(ls_raw.item()))
    } else {
        KernelConfig::with_ard(variance, ls_raw.as_slice().iter().map(|&x| softplus(x)).collect())
    }
}

fn scalar_raw(v: f64) -> Matrix {
    Matrix::scalar(softplus_inv(v))
}

fn chol_jittered(k: &Matrix, jitter: f64) -> Result<Matrix> {
    let n = k.rows();
    cholesky_matrix(&Matrix::from_fn(n, n, |i, j| {
        k[(i, j)] + if i == j { jitter } else { 0.0 }
    }))
}

/// Initial parameters: inducing inputs from a random subset of `x_train`,
/// factor parameters at their prior defaults, `p = 1/2`, and `V` (and the
/// output covariance) from the kernel chain evaluated at prior-mean Grams.
pub fn init_params(cfg: &ModelConfig, x_train: &Matrix, rng: &mut RngStream) -> Result<ParamTree<Matrix>> {
    cfg.validate()?;
    if x_train.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if x_train.cols() != cfg.input_dim {
        return Err(Error::shape(format!(
            "inputs have {} columns, config expects {}",
            x_train.cols(),
            cfg.input_dim
        )));
    }
    let pi = cfg.inducing;
    let n = x_train.rows();
    let perm = rng.permutation(n);
    let mut z = Matrix::zeros(pi, cfg.input_dim);
    for i in 0..pi {
        let src = x_train.row(perm[i % n]);
        let extra = i >= n;
        for (d, &x) in src.iter().enumerate() {
            z[(i, d)] = x + if extra { 0.01 * rng.normal() } else { 0.0 };
        }
    }

    let ard_ls = cfg
        .init_ard_lengthscale
        .unwrap_or((cfg.input_dim as f64).sqrt());
    let var_raw = scalar_raw(cfg.init_kernel_variance);
    let ard_raw = Matrix::filled(1, cfg.input_dim, softplus_inv(ard_ls));
    let gram_raw = scalar_raw(cfg.init_gram_lengthscale);

    // K_1 from the inducing inputs, then K_{l+1} from E[G_l] = K_l
    let mut k = sqexp_ard_from_inputs(&z, &kernel_of(&var_raw, &ard_raw)?)?.into_matrix();
    let mut layers = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let nu = cfg.widths[l];
        let r = cfg.rank(l);
        let v = chol_jittered(&k.scale(1.0 / nu as f64), cfg.jitter)?;
        let ls = if l == 0 { ard_raw.clone() } else { gram_raw.clone() };
        layers.push(LayerParams {
            v,
            p_logit: Matrix::scalar(0.0),
            alpha_raw: Matrix::from_fn(1, r, |_, j| softplus_inv((nu - j) as f64 / 2.0)),
            beta_raw: Matrix::filled(1, r, softplus_inv(0.5)),
            mu: Matrix::zeros(pi, r),
            sigma_raw: Matrix::filled(pi, r, softplus_inv(1.0)),
            kern_var_raw: var_raw.clone(),
            kern_ls_raw: ls,
        });
        let mean_gram = SymMatrix::from_matrix_unchecked(k.clone());
        let next_cfg = kernel_of(&var_raw, &gram_raw)?;
        k = sqexp_from_gram(&mean_gram, &next_cfg)?.into_matrix();
    }
    let out_ls = if cfg.depth == 0 { ard_raw } else { gram_raw };
    let chol_raw = Matrix::from_fn(pi, pi, |i, j| if i == j { softplus_inv(1.0) } else { 0.0 });
    Ok(ParamTree {
        inducing_inputs: z,
        layers,
        output: OutputLayerParams {
            means: Matrix::zeros(pi, cfg.output_dim),
            chol_raw,
            kern_var_raw: var_raw,
            kern_ls_raw: out_ls,
            noise_raw: scalar_raw(cfg.init_noise),
        },
    })
}

/// Checks every parameter against the shapes implied by `cfg`.
pub fn check_shapes(cfg: &ModelConfig, p: &ParamTree<Matrix>) -> Result<()> {
    let pi = cfg.inducing;
    let mut want: Vec<(usize, usize)> = vec![(pi, cfg.input_dim)];
    for l in 0..cfg.depth {
        let r = cfg.rank(l);
        let ls = if l == 0 { (1, cfg.input_dim) } else { (1, 1) };
        want.extend([(pi, pi), (1, 1), (1, r), (1, r), (pi, r), (pi, r), (1, 1), ls]);
    }
    let ls = if cfg.depth == 0 { (1, cfg.input_dim) } else { (1, 1) };
    want.extend([(pi, cfg.output_dim), (pi, pi), (1, 1), ls, (1, 1)]);
    if p.layers.len() != cfg.depth {
        return Err(Error::shape(format!("{} layers, config has {}", p.layers.len(), cfg.depth)));
    }
    for ((name, m), w) in p.entries().into_iter().zip(want) {
        if m.shape() != w {
            return Err(Error::shape(format!("{name}: {:?}, expected {w:?}", m.shape())));
        }
    }
    Ok(())
}
