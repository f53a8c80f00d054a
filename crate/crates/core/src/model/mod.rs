//! Layered deep Wishart process: generative model, variational family,
//! prior samplers and checkpoints.

pub mod forward;
mod params;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use params::{
    check_shapes, init_params, kernel_of, LayerParams, ModelConfig, OutputLayerParams, ParamTree,
    StlFlags,
};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::kernel::{sqexp_ard_from_inputs, sqexp_from_gram, KernelConfig};
use crate::matdist::{genwishart_sample, GenWishartParams};
use crate::numerics::{cholesky, Matrix, RngStream, SymMatrix};

/// `(1 - p) K / nu + p V V^T`.
pub fn build_scale(k: &SymMatrix, nu: usize, v: &Matrix, p: f64) -> Result<SymMatrix> {
    if v.shape() != (k.dim(), k.dim()) {
        return Err(Error::shape("build_scale: V must match K"));
    }
    if !(0.0..=1.0).contains(&p) || nu == 0 {
        return Err(Error::domain(format!("build_scale: p = {p}, nu = {nu}")));
    }
    let s = k
        .as_matrix()
        .scale((1.0 - p) / nu as f64)
        .add(&v.matmul_nt(v).scale(p))
        .symmetrize();
    Ok(SymMatrix::from_matrix_unchecked(s))
}

/// Gram matrices of one prior draw plus the final GP outputs.
#[derive(Clone, Debug)]
pub struct PriorSample {
    /// `G_1 .. G_L`.
    pub grams: Vec<SymMatrix>,
    /// `P x c` outputs of the final GP layer.
    pub f: Matrix,
}

fn jittered(k: &SymMatrix, jitter: f64) -> SymMatrix {
    let n = k.dim();
    SymMatrix::from_matrix_unchecked(k.as_matrix().add(&Matrix::identity(n).scale(jitter)))
}

fn check_prior_args(x: &Matrix, widths: &[usize], kernels: &[KernelConfig]) -> Result<()> {
    if kernels.len() != widths.len() + 1 {
        return Err(Error::Config(format!(
            "need {} kernels for {} layers, got {}",
            widths.len() + 1,
            widths.len(),
            kernels.len()
        )));
    }
    if kernels[0].ard.as_ref().map(|a| a.len()) != Some(x.cols()) {
        return Err(Error::Config("first kernel must be ARD over the input columns".into()));
    }
    if widths.contains(&0) || x.rows() == 0 {
        return Err(Error::Config("widths and point count must be positive".into()));
    }
    Ok(())
}

fn gp_outputs(k: &SymMatrix, jitter: f64, out_dim: usize, rng: &mut RngStream) -> Result<Matrix> {
    let l = cholesky(&jittered(k, jitter))?;
    let e = Matrix::from_vec(k.dim(), out_dim, rng.normal_vec(k.dim() * out_dim));
    Ok(l.as_matrix().matmul(&e))
}

/// Deep Wishart prior: `G_l | G_{l-1} ~ W(K_l(G_{l-1}) / nu_l, nu_l)`,
/// with `K_1` the ARD kernel of the rows of `x`.
pub fn dwp_prior_sample(
    x: &Matrix,
    widths: &[usize],
    kernels: &[KernelConfig],
    jitter: f64,
    out_dim: usize,
    rng: &mut RngStream,
) -> Result<PriorSample> {
    check_prior_args(x, widths, kernels)?;
    let mut k = sqexp_ard_from_inputs(x, &kernels[0])?;
    let mut grams = Vec::with_capacity(widths.len());
    for (l, &nu) in widths.iter().enumerate() {
        let sigma = SymMatrix::from_matrix_unchecked(k.as_matrix().scale(1.0 / nu as f64));
        let lchol = cholesky(&jittered(&sigma, jitter))?;
        let (g, _) = genwishart_sample(&GenWishartParams::defaults(lchol, nu)?, rng)?;
        k = sqexp_from_gram(&g, &kernels[l + 1])?;
        grams.push(g);
    }
    let f = gp_outputs(&k, jitter, out_dim, rng)?;
    Ok(PriorSample { grams, f })
}

/// Deep GP prior through explicit features: `F_l ~ N(0, K_l)` columnwise,
/// `G_l = F_l F_l^T / nu_l`. If `rotations` is given, features of layer `l`
/// are right-multiplied by `rotations[l]` before forming the Gram.
pub fn dgp_prior_sample_rotated(
    x: &Matrix,
    widths: &[usize],
    kernels: &[KernelConfig],
    jitter: f64,
    out_dim: usize,
    rotations: Option<&[Matrix]>,
    rng: &mut RngStream,
) -> Result<PriorSample> {
    check_prior_args(x, widths, kernels)?;
    let mut k = sqexp_ard_from_inputs(x, &kernels[0])?;
    let mut grams = Vec::with_capacity(widths.len());
    for (l, &nu) in widths.iter().enumerate() {
        let mut f = gp_outputs(&k, jitter, nu, rng)?;
        if let Some(rots) = rotations {
            f = f.matmul(&rots[l]);
        }
        let g = SymMatrix::from_matrix_unchecked(f.matmul_nt(&f).scale(1.0 / nu as f64).symmetrize());
        k = sqexp_from_gram(&g, &kernels[l + 1])?;
        grams.push(g);
    }
    let f = gp_outputs(&k, jitter, out_dim, rng)?;
    Ok(PriorSample { grams, f })
}

pub fn dgp_prior_sample(
    x: &Matrix,
    widths: &[usize],
    kernels: &[KernelConfig],
    jitter: f64,
    out_dim: usize,
    rng: &mut RngStream,
) -> Result<PriorSample> {
    dgp_prior_sample_rotated(x, widths, kernels, jitter, out_dim, None, rng)
}

/// One posterior draw of an inducing Gram matrix with its densities.
#[derive(Clone, Debug)]
pub struct LayerDraw {
    pub g: SymMatrix,
    pub a: Matrix,
    pub log_p: f64,
    pub log_q: f64,
}

/// Samples `G_ii` for one layer given the previous layer's inducing kernel
/// `k_ii` (already `K_l(G_{l-1})`).
pub fn layer_posterior_sample(
    k_ii: &SymMatrix,
    params: &LayerParams<Matrix>,
    nu: usize,
    jitter: f64,
    rng: &mut RngStream,
) -> Result<LayerDraw> {
    let tape = Tape::new();
    let pv = LayerParams {
        v: tape.leaf(params.v.clone()),
        p_logit: tape.leaf(params.p_logit.clone()),
        alpha_raw: tape.leaf(params.alpha_raw.clone()),
        beta_raw: tape.leaf(params.beta_raw.clone()),
        mu: tape.leaf(params.mu.clone()),
        sigma_raw: tape.leaf(params.sigma_raw.clone()),
        kern_var_raw: tape.leaf(params.kern_var_raw.clone()),
        kern_ls_raw: tape.leaf(params.kern_ls_raw.clone()),
    };
    let blocks = forward::KernelBlocks {
        k_ii: tape.constant(k_ii.as_matrix().clone()),
        k_ti: tape.constant(Matrix::zeros(0, k_ii.dim())),
        k_tt: tape.constant(Matrix::zeros(0, 1)),
    };
    let s = forward::wishart_layer(&blocks, &pv, nu, jitter, StlFlags::NONE, rng)?;
    Ok(LayerDraw {
        g: SymMatrix::from_matrix_unchecked(s.g_ii.value().symmetrize()),
        a: s.a.value(),
        log_p: s.log_p.item(),
        log_q: s.log_q.item(),
    })
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DwpModel {
    pub config: ModelConfig,
    pub params: ParamTree<Matrix>,
}

impl DwpModel {
    pub fn init(config: ModelConfig, x_train: &Matrix, rng: &mut RngStream) -> Result<Self> {
        let params = init_params(&config, x_train, rng)?;
        Ok(DwpModel { config, params })
    }

    pub fn new(config: ModelConfig, params: ParamTree<Matrix>) -> Result<Self> {
        config.validate()?;
        check_shapes(&config, &params)?;
        Ok(DwpModel { config, params })
    }

    pub fn noise_variance(&self) -> f64 {
        crate::numerics::softplus(self.params.output.noise_raw.item())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&Checkpoint::from_model(self))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.into_model()
    }
}

pub const CHECKPOINT_FORMAT: &str = "dwp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// JSON container: format tag, version, model config and a flat map from
/// parameter name (`inducing_inputs`, `layer{l}.{name}`, `output.{name}`)
/// to a row-major array.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

impl Checkpoint {
    pub fn from_model(m: &DwpModel) -> Self {
        let arrays = m
            .params
            .entries()
            .into_iter()
            .map(|(k, v)| {
                (
                    k,
                    ArrayEntry {
                        shape: [v.rows(), v.cols()],
                        data: v.as_slice().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: m.config.clone(),
            arrays,
        }
    }

    pub fn into_model(self) -> Result<DwpModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container {} v{}",
                self.format, self.version
            )));
        }
        self.config.validate()?;
        let template = template_params(&self.config);
        let params = template.try_map(|name, _| {
            let e = self
                .arrays
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
            if e.shape[0] * e.shape[1] != e.data.len() {
                return Err(Error::Checkpoint(format!("array `{name}` has wrong length")));
            }
            Ok(Matrix::from_vec(e.shape[0], e.shape[1], e.data.clone()))
        })?;
        if self.arrays.len() != params.entries().len() {
            return Err(Error::Checkpoint("unexpected extra arrays".into()));
        }
        DwpModel::new(self.config, params)
    }
}

/// Zero-filled parameters with the shapes implied by `cfg`.
fn template_params(cfg: &ModelConfig) -> ParamTree<Matrix> {
    let pi = cfg.inducing;
    let z = |r, c| Matrix::zeros(r, c);
    let layers = (0..cfg.depth)
        .map(|l| {
            let r = cfg.rank(l);
            LayerParams {
                v: z(pi, pi),
                p_logit: z(1, 1),
                alpha_raw: z(1, r),
                beta_raw: z(1, r),
                mu: z(pi, r),
                sigma_raw: z(pi, r),
                kern_var_raw: z(1, 1),
                kern_ls_raw: if l == 0 { z(1, cfg.input_dim) } else { z(1, 1) },
            }
        })
        .collect();
    ParamTree {
        inducing_inputs: z(pi, cfg.input_dim),
        layers,
        output: OutputLayerParams {
            means: z(pi, cfg.output_dim),
            chol_raw: z(pi, pi),
            kern_var_raw: z(1, 1),
            kern_ls_raw: if cfg.depth == 0 { z(1, cfg.input_dim) } else { z(1, 1) },
            noise_raw: z(1, 1),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softplus_inv;

    #[test]
    fn build_scale_examples() {
        let k = SymMatrix::new(Matrix::identity(2).scale(2.0)).unwrap();
        let v = Matrix::from_rows(&[&[1.0, 0.0], &[0.3, 0.7]]);
        let s0 = build_scale(&k, 2, &v, 0.0).unwrap();
        assert_eq!(s0.as_matrix(), &Matrix::identity(2));
        let s1 = build_scale(&k, 2, &v, 1.0).unwrap();
        assert_eq!(s1.as_matrix(), &v.matmul_nt(&v));
        let s = build_scale(&k, 2, &Matrix::identity(2), 0.5).unwrap();
        assert_eq!(s.as_matrix(), &Matrix::identity(2));
    }

    fn prior_layer(pi: usize, nu: usize) -> LayerParams<Matrix> {
        let r = pi.min(nu);
        LayerParams {
            v: Matrix::identity(pi),
            p_logit: Matrix::scalar(f64::NEG_INFINITY),
            alpha_raw: Matrix::from_fn(1, r, |_, j| softplus_inv((nu - j) as f64 / 2.0)),
            beta_raw: Matrix::filled(1, r, softplus_inv(0.5)),
            mu: Matrix::zeros(pi, r),
            sigma_raw: Matrix::filled(pi, r, softplus_inv(1.0)),
            kern_var_raw: Matrix::scalar(0.0),
            kern_ls_raw: Matrix::scalar(0.0),
        }
    }

    #[test]
    fn prior_valued_posterior_has_zero_kl() {
        let mut rng = RngStream::new(41, 0);
        let x = Matrix::from_fn(4, 2, |_, _| rng.normal());
        let k = sqexp_ard_from_inputs(&x, &KernelConfig::with_ard(1.0, vec![1.0, 1.0]).unwrap()).unwrap();
        for &nu in &[2, 4, 6] {
            let d = layer_posterior_sample(&k, &prior_layer(4, nu), nu, 1e-6, &mut rng).unwrap();
            assert!((d.log_p - d.log_q).abs() < 1e-9, "nu = {nu}: {}", d.log_p - d.log_q);
        }
    }

    #[test]
    fn initial_output_layer_matches_its_prior() {
        let mut rng = RngStream::new(44, 0);
        let x = Matrix::from_fn(12, 2, |_, _| rng.normal());
        for depth in [0, 2] {
            let m = DwpModel::init(ModelConfig::new(depth, 5, 2), &x, &mut rng).unwrap();
            for k in 0..5 {
                let tape = Tape::new();
                let params = m.params.leaves(&tape);
                let s = forward::forward(&tape, &m.config, &params, &x, None, 12, StlFlags::ALL, &mut rng.split(k))
                    .unwrap();
                let out = s.kl.last().unwrap().item();
                assert!(out.abs() < 1e-9, "depth {depth}: {out}");
            }
        }
    }

    #[test]
    fn prior_samples_have_expected_rank_and_shape() {
        let mut rng = RngStream::new(42, 0);
        let x = Matrix::from_fn(5, 2, |_, _| rng.normal());
        let kernels = vec![
            KernelConfig::with_ard(1.0, vec![1.0, 1.0]).unwrap(),
            KernelConfig::new(1.0, 1.0).unwrap(),
            KernelConfig::new(1.0, 1.0).unwrap(),
        ];
        let s = dwp_prior_sample(&x, &[2, 3], &kernels, 1e-8, 1, &mut rng).unwrap();
        assert_eq!(s.grams.len(), 2);
        assert_eq!(s.f.shape(), (5, 1));
        let d = dgp_prior_sample(&x, &[2, 3], &kernels, 1e-8, 1, &mut rng).unwrap();
        assert_eq!(d.grams[1].dim(), 5);
        let empty = dwp_prior_sample(&x, &[], &kernels[..1], 1e-8, 2, &mut rng).unwrap();
        assert!(empty.grams.is_empty());
        assert_eq!(empty.f.shape(), (5, 2));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = RngStream::new(43, 0);
        let x = Matrix::from_fn(30, 3, |_, _| rng.normal());
        let cfg = ModelConfig::new(2, 6, 3);
        let m = DwpModel::init(cfg, &x, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        m.save_checkpoint(&path).unwrap();
        let back = DwpModel::load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        std::fs::write(&path, "{\"format\":\"x\"}").unwrap();
        assert!(matches!(DwpModel::load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
