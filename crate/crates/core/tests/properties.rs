use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use dwp::autodiff::gradcheck_many;
use dwp::harness::{split_indices, Standardizer};
use dwp::kernel::{sqexp_from_gram, KernelConfig};
use dwp::matdist::{genwishart_sample, GenWishartParams};
use dwp::model::build_scale;
use dwp::numerics::{cholesky, tri_solve, JITTER_REL};
use dwp::{Matrix, RngStream, SymMatrix};

fn min_eig(m: &Matrix) -> f64 {
    let d = DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)]);
    SymmetricEigen::new(d).eigenvalues.min()
}

fn spd(n: usize, seed: u64) -> SymMatrix {
    let mut rng = RngStream::new(seed, 0);
    let b = Matrix::from_fn(n, n, |_, _| rng.normal());
    SymMatrix::new(b.matmul_nt(&b).add(&Matrix::identity(n).scale(0.5))).unwrap()
}

fn max_abs(m: &Matrix) -> f64 {
    (0..m.rows())
        .flat_map(|i| (0..m.cols()).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)].abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn cholesky_reconstructs(n in 1usize..8, seed in any::<u64>()) {
        let a = spd(n, seed);
        let l = cholesky(&a).unwrap();
        let back = l.gram();
        let scale = max_abs(a.as_matrix());
        prop_assert!(max_abs(&back.as_matrix().sub(a.as_matrix())) <= 1e-10 * scale);
    }

    #[test]
    fn tri_solve_inverts(n in 1usize..8, k in 1usize..4, seed in any::<u64>()) {
        let l = cholesky(&spd(n, seed)).unwrap();
        let mut rng = RngStream::new(seed, 1);
        let b = Matrix::from_fn(n, k, |_, _| rng.normal());
        let x = tri_solve(&l, &b).unwrap();
        prop_assert!(max_abs(&l.as_matrix().matmul(&x).sub(&b)) <= 1e-9 * (1.0 + max_abs(&b)));
    }

    #[test]
    fn rng_split_is_reproducible(seed in any::<u64>(), id in any::<u64>(), child in any::<u64>()) {
        let mut a = RngStream::new(seed, id).split(child);
        let mut b = RngStream::new(seed, id).split(child);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        prop_assert_eq!(xs, ys);
    }

    #[test]
    fn build_scale_stays_psd(n in 1usize..6, nu in 1usize..6, p in 0.0f64..=1.0, seed in any::<u64>()) {
        let k = spd(n, seed);
        let mut rng = RngStream::new(seed, 2);
        let v = Matrix::from_fn(n, n, |i, j| if j <= i { rng.normal() } else { 0.0 });
        let s = build_scale(&k, nu, &v, p).unwrap();
        let scale = max_abs(s.as_matrix()).max(1.0);
        prop_assert!(min_eig(s.as_matrix()) >= -1e-10 * scale);
    }

    #[test]
    fn gram_kernel_is_psd(n in 1usize..7, var in 0.1f64..3.0, ls in 0.2f64..3.0, seed in any::<u64>()) {
        let g = spd(n, seed);
        let k = sqexp_from_gram(&g, &KernelConfig::new(var, ls).unwrap()).unwrap();
        prop_assert!(min_eig(k.as_matrix()) >= -1e-10 * var);
        for i in 0..n {
            let want = var * (1.0 + JITTER_REL);
            prop_assert!((k.as_matrix()[(i, i)] - want).abs() <= 1e-12 * var);
        }
    }

    #[test]
    fn wishart_sample_rank_is_min_p_nu(p in 1usize..7, nu in 1usize..7, seed in any::<u64>()) {
        let l = cholesky(&spd(p, seed)).unwrap();
        let prm = GenWishartParams::defaults(l, nu).unwrap();
        let (g, _) = genwishart_sample(&prm, &mut RngStream::new(seed, 3)).unwrap();
        let d = DMatrix::from_fn(p, p, |i, j| g.as_matrix()[(i, j)]);
        let sv = d.singular_values();
        let top = sv.max();
        let rank = sv.iter().filter(|&&s| s > 1e-8 * top).count();
        prop_assert_eq!(rank, p.min(nu));
    }

    #[test]
    fn standardizer_round_trips(n in 2usize..20, d in 1usize..4, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 4);
        let x = Matrix::from_fn(n, d, |_, _| 5.0 * rng.normal() + 3.0);
        let y = Matrix::from_fn(n, 1, |_, _| rng.normal() - 7.0);
        let t = Standardizer::fit(&x, &y).unwrap();
        prop_assert!(max_abs(&t.inverse_x(&t.x(&x)).sub(&x)) <= 1e-10 * (1.0 + max_abs(&x)));
        prop_assert!(max_abs(&t.inverse_y(&t.y(&y)).sub(&y)) <= 1e-10 * (1.0 + max_abs(&y)));
    }

    #[test]
    fn splits_partition_rows(n in 1usize..200, seed in any::<u64>(), idx in 0u64..20, frac in 0.05f64..0.95) {
        let (train, test) = split_indices(n, seed, idx, frac).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!train.is_empty());
    }

    #[test]
    fn composite_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 5);
        let a = Matrix::from_fn(3, 3, |_, _| 0.5 * rng.normal());
        let b = Matrix::from_fn(3, 2, |_, _| rng.normal());
        let report = gradcheck_many(
            |_, xs| {
                let s = xs[0].matmul_nt(&xs[0])?.add(&xs[0].tape().constant(Matrix::identity(3)))?;
                let l = s.cholesky()?;
                let w = l.tri_solve(&xs[1])?;
                w.square().sum().add(&l.log_diag_sum()?)?.add(&xs[1].softplus().sum())
            },
            &[a, b],
            1e-4,
        )
        .unwrap();
        prop_assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }
}
