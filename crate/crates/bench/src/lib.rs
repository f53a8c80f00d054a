//! Shared fixtures for the benchmarks.

use dwp::model::{DwpModel, ModelConfig};
use dwp::{Matrix, RngStream};

/// Synthetic regression problem with a single-layer model of `inducing` points.
pub fn elbo_fixture(inducing: usize, n: usize, depth: usize) -> (DwpModel, Matrix, Matrix) {
    let mut rng = RngStream::new(11, 0);
    let x = Matrix::from_fn(n, 3, |_, _| rng.normal());
    let y = Matrix::from_fn(n, 1, |i, _| x[(i, 0)].sin() + 0.1 * rng.normal());
    let mut cfg = ModelConfig::new(depth, inducing, 3);
    cfg.widths = vec![inducing; depth];
    let model = DwpModel::init(cfg, &x, &mut rng).expect("fixture initializes");
    (model, x, y)
}

/// Well-conditioned symmetric positive-definite matrix of size `n`.
pub fn spd(n: usize) -> Matrix {
    let mut rng = RngStream::new(12, n as u64);
    let b = Matrix::from_fn(n, n, |_, _| rng.normal());
    b.matmul_nt(&b).scale(1.0 / n as f64).add(&Matrix::identity(n))
}
