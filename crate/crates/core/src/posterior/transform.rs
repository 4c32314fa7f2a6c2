//! Unconstrained coordinates for a correlation matrix.
//!
//! `z` holds the strict lower triangle in row-major order
//! (`(1,0), (2,0), (2,1), (3,0), ...`). Each entry maps through `tanh` to a
//! canonical partial correlation `c_ik`, and row `i` of the Cholesky factor is
//! built as `L_ik = c_ik sqrt(w_k)`, `w_{k+1} = w_k (1 - c_ik^2)`,
//! `L_ii = sqrt(w_i)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};

/// Number of free coordinates of a `q x q` correlation matrix.
pub fn n_correlation_coords(q: usize) -> usize {
    q * (q.saturating_sub(1)) / 2
}

/// Correlation matrix, its Cholesky factor and the CPCs behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationFactor {
    pub r: DMatrix<f64>,
    pub l: DMatrix<f64>,
    /// CPCs in the same order as `z`.
    pub cpc: Vec<f64>,
    /// `log |d vech(R) / dz|`.
    pub log_jacobian: f64,
    /// `log det R`.
    pub log_det: f64,
}

/// Infers `q` from the number of coordinates.
pub fn dimension_from_coords(len: usize) -> Result<usize> {
    let mut q = 1;
    while n_correlation_coords(q) < len {
        q += 1;
    }
    if n_correlation_coords(q) != len {
        return Err(Error::InvalidArgument(format!("{len} is not a triangular number")));
    }
    Ok(q)
}

/// Maps unconstrained `z` to a correlation matrix.
pub fn cpc_transform(z: &[f64], q: usize) -> Result<CorrelationFactor> {
    if z.len() != n_correlation_coords(q) {
        return Err(Error::InvalidArgument(format!("expected {} coordinates for q = {q}, got {}", n_correlation_coords(q), z.len())));
    }
    let mut l = DMatrix::zeros(q, q);
    let mut cpc = Vec::with_capacity(z.len());
    let mut log_jacobian = 0.0;
    let mut log_det = 0.0;
    let mut idx = 0;
    for i in 0..q {
        let mut w: f64 = 1.0;
        for k in 0..i {
            let c = z[idx].tanh();
            idx += 1;
            cpc.push(c);
            l[(i, k)] = c * w.sqrt();
            // 1 - tanh^2 computed without cancellation
            let one_minus = 1.0 / z[idx - 1].cosh().powi(2);
            w *= one_minus;
            let log1m = one_minus.ln();
            log_det += log1m;
            log_jacobian += 0.5 * (q - k) as f64 * log1m;
        }
        l[(i, i)] = w.sqrt();
    }
    let mut r = &l * l.transpose();
    for i in 0..q {
        r[(i, i)] = 1.0;
    }
    Ok(CorrelationFactor { r, l, cpc, log_jacobian, log_det })
}

/// Inverse of [`cpc_transform`].
pub fn cpc_inverse(r: &DMatrix<f64>) -> Result<Vec<f64>> {
    let q = r.nrows();
    if r.ncols() != q {
        return Err(Error::InvalidArgument("correlation matrix must be square".into()));
    }
    for i in 0..q {
        if (r[(i, i)] - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!("diagonal entry {i} is {} not 1", r[(i, i)])));
        }
    }
    let chol = r.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("correlation matrix".into()))?;
    let l = chol.l();
    let mut z = Vec::with_capacity(n_correlation_coords(q));
    for i in 0..q {
        // w_k = sum_{j >= k} L_ij^2 as a tail sum avoids cancellation near |c| = 1
        let mut tail = vec![0.0; i + 2];
        for k in (0..=i).rev() {
            tail[k] = tail[k + 1] + l[(i, k)] * l[(i, k)];
        }
        for k in 0..i {
            let (a, w, w_next) = (l[(i, k)], tail[k].sqrt(), tail[k + 1].sqrt());
            if !(w_next > 0.0) {
                return Err(Error::NotPositiveDefinite("correlation matrix".into()));
            }
            // atanh(a / w) = ln((w + |a|) / w_next) with the sign of a
            z.push(((w + a.abs()) / w_next).ln().copysign(a));
        }
    }
    Ok(z)
}

/// Draws a `q x q` correlation matrix from the LKJ(`eta`) distribution.
///
/// The CPC at level `k` is `2 B - 1` with `B ~ Beta(b, b)`, `b = eta + (q - 2 - k) / 2`.
pub fn lkj_draw<R: Rng + ?Sized>(q: usize, eta: f64, rng: &mut R) -> Result<CorrelationFactor> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("LKJ shape must be positive, got {eta}")));
    }
    let mut z = Vec::with_capacity(n_correlation_coords(q));
    for i in 0..q {
        for k in 0..i {
            let b = eta + 0.5 * (q as f64 - 2.0 - k as f64);
            let beta = Beta::new(b, b).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let c: f64 = 2.0 * beta.sample(rng) - 1.0;
            z.push(c.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh());
        }
    }
    cpc_transform(&z, q)
}

/// Pulls a gradient with respect to the Cholesky factor back to `z`.
///
/// `g_l` is `d f / d L` (only the lower triangle is read).
pub fn pullback_cholesky_gradient(factor: &CorrelationFactor, g_l: &DMatrix<f64>) -> Vec<f64> {
    let q = factor.l.nrows();
    let l = &factor.l;
    let mut out = Vec::with_capacity(factor.cpc.len());
    let mut idx = 0;
    for i in 0..q {
        let mut w: f64 = 1.0;
        for k in 0..i {
            let c = factor.cpc[idx];
            idx += 1;
            let one_minus = 1.0 - c * c;
            let mut tail = 0.0;
            for j in (k + 1)..=i {
                tail += g_l[(i, j)] * l[(i, j)];
            }
            out.push(g_l[(i, k)] * w.sqrt() * one_minus - c * tail);
            w *= one_minus;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_z(q: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n_correlation_coords(q))
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 3.0
            })
            .collect()
    }

    #[test]
    fn zero_is_identity() {
        let f = cpc_transform(&[0.0; 6], 4).unwrap();
        assert_eq!(f.r, DMatrix::identity(4, 4));
        assert_eq!(f.log_jacobian, 0.0);
    }

    #[test]
    fn bivariate_half() {
        let f = cpc_transform(&[0.5f64.atanh()], 2).unwrap();
        assert!((f.r[(0, 1)] - 0.5).abs() < 1e-15);
        assert!((f.r[(1, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn round_trip() {
        for q in 2..=6 {
            for seed in 0..5 {
                let z = sample_z(q, seed);
                let f = cpc_transform(&z, q).unwrap();
                let back = cpc_inverse(&f.r).unwrap();
                for (a, b) in z.iter().zip(&back) {
                    assert!((a - b).abs() < 1e-10, "q={q} {a} {b}");
                }
            }
        }
    }

    #[test]
    fn log_jacobian_matches_numerical_determinant() {
        for q in 2..=5 {
            for seed in 10..13 {
                let z = sample_z(q, seed);
                let m = z.len();
                let vech = |z: &[f64]| {
                    let r = cpc_transform(z, q).unwrap().r;
                    let mut v = Vec::new();
                    for i in 0..q {
                        for k in 0..i {
                            v.push(r[(i, k)]);
                        }
                    }
                    v
                };
                let h = 1e-6;
                let mut jac = DMatrix::zeros(m, m);
                for j in 0..m {
                    let mut zp = z.clone();
                    let mut zm = z.clone();
                    zp[j] += h;
                    zm[j] -= h;
                    let (a, b) = (vech(&zp), vech(&zm));
                    for i in 0..m {
                        jac[(i, j)] = (a[i] - b[i]) / (2.0 * h);
                    }
                }
                let numeric = jac.determinant().abs().ln();
                let f = cpc_transform(&z, q).unwrap();
                assert!((numeric - f.log_jacobian).abs() < 1e-4, "q={q}: {numeric} vs {}", f.log_jacobian);
            }
        }
    }

    #[test]
    fn log_det_matches_dense() {
        let z = sample_z(5, 3);
        let f = cpc_transform(&z, 5).unwrap();
        assert!((f.r.determinant().ln() - f.log_det).abs() < 1e-10);
    }

    #[test]
    fn cholesky_pullback_matches_finite_differences() {
        let q = 4;
        let z = sample_z(q, 7);
        // f(L) = sum_ij A_ij L_ij for a fixed weight matrix A
        let a = DMatrix::from_fn(q, q, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.7);
        let f = |z: &[f64]| {
            let l = cpc_transform(z, q).unwrap().l;
            l.component_mul(&a).sum()
        };
        let factor = cpc_transform(&z, q).unwrap();
        let g = pullback_cholesky_gradient(&factor, &a);
        let h = 1e-6;
        for j in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()), "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn lkj_draw_marginal_variance() {
        // Every off-diagonal entry is marginally 2 Beta(eta - 1 + q/2, same) - 1,
        // with variance 1 / (2 eta + q - 1).
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (q, eta) in [(2usize, 1.0), (3, 1.0), (4, 2.0)] {
            let reps = 20_000;
            let mut sums = DMatrix::<f64>::zeros(q, q);
            for _ in 0..reps {
                let f = lkj_draw(q, eta, &mut rng).unwrap();
                sums += f.r.map(|v| v * v);
            }
            let expected = 1.0 / (2.0 * eta + q as f64 - 1.0);
            for i in 0..q {
                for j in 0..i {
                    let v = sums[(i, j)] / reps as f64;
                    // sd of the mean of r^2 is below 0.003 here
                    assert!((v - expected).abs() < 0.012, "q={q} ({i},{j}): {v} vs {expected}");
                }
            }
        }
    }
}
