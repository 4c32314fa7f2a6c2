use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use phyloprobit::diagnostics::partial_correlation;
use phyloprobit::phylo::{tree_covariance, Phylogeny, TreeGaussian};
use phyloprobit::posterior::transform::{cpc_inverse, cpc_transform, n_correlation_coords};
use phyloprobit::tmvn::min_positive_root;

fn z_vector() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (2usize..=5).prop_flat_map(|q| (Just(q), prop::collection::vec(-2.0f64..2.0, n_correlation_coords(q))))
}

fn spd(q: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(q, q, &entries[..q * q]);
    &a * a.transpose() + DMatrix::identity(q, q)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cpc_round_trip((q, z) in z_vector()) {
        let f = cpc_transform(&z, q).unwrap();
        let back = cpc_inverse(&f.r).unwrap();
        for (a, b) in z.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn cpc_gives_correlation_matrix((q, z) in z_vector()) {
        let r = cpc_transform(&z, q).unwrap().r;
        for i in 0..q {
            prop_assert!((r[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..q {
                prop_assert!((r[(i, j)] - r[(j, i)]).abs() < 1e-12);
            }
        }
        prop_assert!(r.cholesky().is_some());
    }

    #[test]
    fn partial_correlations_are_correlations(q in 2usize..=5, entries in prop::collection::vec(-1.0f64..1.0, 25)) {
        let p = partial_correlation(&spd(q, &entries)).unwrap();
        for i in 0..q {
            prop_assert!((p[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..q {
                prop_assert!(p[(i, j)].abs() <= 1.0 + 1e-12);
                prop_assert!((p[(i, j)] - p[(j, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positive_root_solves_quadratic(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0) {
        let t = min_positive_root(a, b, c);
        if t.is_finite() {
            prop_assert!(t > 0.0);
            let scale = a.abs() * t * t + b.abs() * t + c.abs();
            prop_assert!((a * t * t + b * t + c).abs() <= 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn tree_precision_product_matches_dense(seed in any::<u64>(), n in 2usize..12, q in 1usize..=3, entries in prop::collection::vec(-1.0f64..1.0, 9)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phylo = Phylogeny::random_coalescent(n, &mut rng).unwrap();
        let tree = TreeGaussian::new(&phylo, 4.0).unwrap();
        let v_inv = tree_covariance(&phylo, 4.0).unwrap().try_inverse().unwrap();
        let s_inv = spd(q, &entries);
        let flat: Vec<f64> = (0..q * q).map(|k| s_inv[(k / q, k % q)]).collect();
        let resid: Vec<f64> = (0..n * q).map(|k| (k as f64 * 0.37).sin()).collect();
        let mut out = vec![0.0; n * q];
        tree.precision_product(&resid, &flat, q, &mut out);
        for i in 0..n {
            for j in 0..q {
                let mut want = 0.0;
                for k in 0..n {
                    for l in 0..q {
                        want += v_inv[(i, k)] * s_inv[(j, l)] * resid[k * q + l];
                    }
                }
                let got = out[i * q + j];
                prop_assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "({i},{j}): {got} vs {want}");
            }
        }
    }
}
