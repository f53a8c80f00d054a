//! Dense linear algebra, special functions and the deterministic random stream.

mod linalg;
mod matrix;
mod rng;
pub mod special;

pub use linalg::{
    add_jitter, cholesky, cholesky_matrix, logdet_spd, spd_inverse, tri_solve, tri_solve_lower,
    tri_solve_lower_transpose, LowerTrapezoid, SymMatrix, JITTER_REL, PIVOT_TOL, PSD_TOL,
    SYMMETRY_TOL,
};
pub use matrix::Matrix;
pub use rng::RngStream;
pub use special::{inv_reg_inc_gamma, lgamma, log_multigamma, reg_inc_gamma};

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sum(exp(xs)))`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-6, 0.1, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
        assert_eq!(sigmoid(f64::NEG_INFINITY), 0.0);
        assert!((logsumexp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
