//! Chain post-processing: effective sample size, split R-hat, partial
//! correlations and the squared-jump decomposition.

pub mod summary;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};

pub use summary::{summarize, ChainTable, ParameterSummary, SummaryOptions, SummaryReport};

/// Shortest series `ess` accepts.
pub const MIN_ESS_LENGTH: usize = 100;

/// Partial correlations `P_ij = -W_ij / sqrt(W_ii W_jj)` with `W = Sigma^-1`.
pub fn partial_correlation(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = sigma.nrows();
    if sigma.ncols() != q {
        return Err(Error::InvalidArgument(format!("covariance is {}x{}", q, sigma.ncols())));
    }
    let chol = sigma.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("covariance is singular".into()))?;
    let w = chol.inverse();
    if w.iter().any(|v| !v.is_finite()) || w.diagonal().iter().any(|&v| v <= 0.0) {
        return Err(Error::NotPositiveDefinite("covariance is singular".into()));
    }
    Ok(DMatrix::from_fn(q, q, |i, j| if i == j { 1.0 } else { -w[(i, j)] / (w[(i, i)] * w[(j, j)]).sqrt() }))
}

/// Sample autocovariances `gamma_k = (1/n) sum_t (x_t - m)(x_{t+k} - m)` for every lag.
pub fn autocovariance(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let len = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
    buf.resize(len, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf[..n].iter().map(|c| c.re / (len as f64 * n as f64)).collect()
}

/// Lag-`k` sample autocorrelation; zero for a constant series.
pub fn autocorrelation(series: &[f64], lag: usize) -> f64 {
    let acov = autocovariance(series);
    if lag >= acov.len() || acov[0] <= 0.0 {
        return 0.0;
    }
    acov[lag] / acov[0]
}

/// Effective sample size and whether the draws had no spread at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EssEstimate {
    pub ess: f64,
    pub zero_variance: bool,
}

/// Single-series effective sample size.
pub fn ess(series: &[f64]) -> Result<EssEstimate> {
    ess_chains(&[series])
}

/// Multi-chain effective sample size.
///
/// Autocorrelations are pooled across chains against the between-plus-within
/// variance, summed in adjacent pairs, truncated at the first non-positive
/// pair and forced monotone. The integrated time is floored at
/// `1 / log10(total draws)`, so antithetic chains can exceed the draw count.
pub fn ess_chains(chains: &[&[f64]]) -> Result<EssEstimate> {
    let m = chains.len();
    if m == 0 {
        return Err(Error::TooFewSamples("no chains".into()));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidArgument("chains have different lengths".into()));
    }
    let total = n * m;
    if n < 4 || total < MIN_ESS_LENGTH {
        return Err(Error::TooFewSamples(format!("{total} draws in {m} chain(s); need at least {MIN_ESS_LENGTH} and 4 per chain")));
    }
    if chains.iter().flat_map(|c| c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("series contains non-finite values".into()));
    }
    let nf = n as f64;
    let acovs: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let mean_var = acovs.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        let grand = means.iter().sum::<f64>() / m as f64;
        var_plus += means.iter().map(|v| (v - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    }
    let scale = chains.iter().flat_map(|c| c.iter()).fold(0.0_f64, |a, v| a.max(v.abs()));
    if var_plus <= 1e-28 * scale.max(1e-300).powi(2) {
        return Ok(EssEstimate { ess: total as f64, zero_variance: true });
    }
    let rho = |k: usize| {
        let mean_acov = acovs.iter().map(|a| a[k]).sum::<f64>() / m as f64;
        1.0 - (mean_var - mean_acov) / var_plus
    };
    let mut pairs = vec![rho(0) + rho(1)];
    let mut k = 2;
    while k + 1 < n {
        let p = rho(k) + rho(k + 1);
        if p <= 0.0 {
            break;
        }
        pairs.push(p.min(*pairs.last().unwrap()));
        k += 2;
    }
    let tau = (-1.0 + 2.0 * pairs.iter().sum::<f64>()).max(1.0 / (total as f64).log10());
    Ok(EssEstimate { ess: total as f64 / tau, zero_variance: false })
}

/// Split R-hat: each chain is cut in half and the halves are compared.
pub fn rhat(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::TooFewSamples(format!("split R-hat needs at least 2 chains, got {}", chains.len())));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidArgument("chains have different lengths".into()));
    }
    if n < 4 {
        return Err(Error::TooFewSamples(format!("split R-hat needs chains of length at least 4, got {n}")));
    }
    let half = n / 2;
    let pieces: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..half], &c[n - half..]]).collect();
    let h = half as f64;
    let m = pieces.len() as f64;
    let means: Vec<f64> = pieces.iter().map(|p| p.iter().sum::<f64>() / h).collect();
    let vars: Vec<f64> = pieces.iter().zip(&means).map(|(p, mu)| p.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (h - 1.0)).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = h * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>() / (m - 1.0);
    let w = vars.iter().sum::<f64>() / m;
    if w <= 0.0 {
        return Ok(if b <= 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (h - 1.0) / h * w + b / h;
    Ok((var_plus / w).sqrt())
}

/// Per-transition squared jumps in `sum_i x_i^2` and their split into
/// marginal (`t1`) and cross (`t2`) parts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpDecomposition {
    pub j: Vec<f64>,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub mean_j: f64,
    pub mean_t1: f64,
    pub mean_t2: f64,
}

/// `J_t = [sum_i x_i(t+1)^2 - sum_i x_i(t)^2]^2 = T1_t + T2_t`, where `T1_t`
/// sums the squared per-coordinate changes of `x_i^2` and `T2_t` their
/// products over distinct pairs.
pub fn jump_decomposition(draws: &[Vec<f64>]) -> Result<JumpDecomposition> {
    if draws.len() < 2 {
        return Err(Error::TooFewSamples("need at least two consecutive draws".into()));
    }
    let d = draws[0].len();
    if let Some(bad) = draws.iter().find(|x| x.len() != d) {
        return Err(Error::InvalidArgument(format!("draw of dimension {} among draws of dimension {d}", bad.len())));
    }
    let steps = draws.len() - 1;
    let (mut j, mut t1, mut t2) = (Vec::with_capacity(steps), Vec::with_capacity(steps), Vec::with_capacity(steps));
    for w in draws.windows(2) {
        let deltas: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| b * b - a * a).collect();
        let sum: f64 = deltas.iter().sum();
        let marginal: f64 = deltas.iter().map(|v| v * v).sum();
        let cross = if d == 1 { 0.0 } else { sum * sum - marginal };
        j.push(sum * sum);
        t1.push(marginal);
        t2.push(cross);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(JumpDecomposition { mean_j: mean(&j), mean_t1: mean(&t1), mean_t2: mean(&t2), j, t1, t2 })
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn ar1(n: usize, rho: f64, seed: u64) -> Vec<f64> {
        let e = normals(n, seed);
        let mut x = vec![0.0; n];
        x[0] = e[0] / (1.0 - rho * rho).sqrt();
        for t in 1..n {
            x[t] = rho * x[t - 1] + e[t];
        }
        x
    }

    #[test]
    fn partial_correlation_identity_and_bivariate() {
        let p = partial_correlation(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(p, DMatrix::identity(3, 3));
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let p = partial_correlation(&s).unwrap();
        assert!((p[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn partial_correlation_matches_adjugate_formula() {
        // For q = 3 the precision entries are cofactors over det; the partial
        // correlation of (0, 1) given 2 is (s01 s22 - s02 s12) / sqrt((s00 s22 - s02^2)(s11 s22 - s12^2)).
        let a = DMatrix::from_row_slice(3, 3, &[1.2, 0.3, -0.7, 0.1, 0.9, 0.4, -0.5, 0.2, 1.1]);
        let s = &a * a.transpose() + DMatrix::identity(3, 3) * 0.3;
        let p = partial_correlation(&s).unwrap();
        let direct = (s[(0, 1)] * s[(2, 2)] - s[(0, 2)] * s[(1, 2)]) / ((s[(0, 0)] * s[(2, 2)] - s[(0, 2)].powi(2)) * (s[(1, 1)] * s[(2, 2)] - s[(1, 2)].powi(2))).sqrt();
        assert!((p[(0, 1)] - direct).abs() < 1e-12, "{} vs {direct}", p[(0, 1)]);
        assert!((p[(1, 0)] - direct).abs() < 1e-12);
        assert_eq!(p[(2, 2)], 1.0);
    }

    #[test]
    fn partial_correlation_scale_invariant() {
        let a = DMatrix::from_row_slice(4, 4, &[1.0, 0.2, 0.3, -0.1, 0.0, 1.4, -0.6, 0.2, 0.5, 0.1, 0.8, 0.3, -0.2, 0.7, 0.0, 1.1]);
        let s = &a * a.transpose();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.3, 2.0, 5.0, 1.7]));
        let p1 = partial_correlation(&s).unwrap();
        let p2 = partial_correlation(&(&d * &s * &d)).unwrap();
        assert!((p1 - p2).amax() < 1e-10);
    }

    #[test]
    fn partial_correlation_rejects_singular() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(partial_correlation(&s).is_err());
    }

    #[test]
    fn autocovariance_matches_direct_sum() {
        let x = normals(37, 3);
        let n = x.len();
        let m = x.iter().sum::<f64>() / n as f64;
        let acov = autocovariance(&x);
        for k in [0, 1, 5, 36] {
            let direct: f64 = (0..n - k).map(|t| (x[t] - m) * (x[t + k] - m)).sum::<f64>() / n as f64;
            assert!((acov[k] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn ess_iid_close_to_length() {
        let x = normals(10_000, 5);
        let e = ess(&x).unwrap();
        assert!(e.ess > 8000.0 && e.ess < 12000.0, "{}", e.ess);
        assert!(!e.zero_variance);
    }

    #[test]
    fn ess_ar1_matches_analytic() {
        let n = 100_000;
        let x = ar1(n, 0.9, 8);
        let e = ess(&x).unwrap().ess;
        let expected = n as f64 * 0.1 / 1.9;
        assert!((e / expected - 1.0).abs() < 0.2, "{e} vs {expected}");
    }

    #[test]
    fn ess_antithetic_exceeds_length() {
        let x: Vec<f64> = (0..1000).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(ess(&x).unwrap().ess > 1000.0);
    }

    #[test]
    fn ess_constant_series_flagged() {
        let e = ess(&[2.5; 200]).unwrap();
        assert_eq!(e.ess, 200.0);
        assert!(e.zero_variance);
    }

    #[test]
    fn ess_requires_length() {
        assert!(matches!(ess(&normals(99, 1)), Err(Error::TooFewSamples(_))));
    }

    #[test]
    fn ess_affine_and_permutation_invariant() {
        let a = ar1(2000, 0.5, 11);
        let b = ar1(2000, 0.5, 12);
        let e = ess_chains(&[&a, &b]).unwrap().ess;
        let a2: Vec<f64> = a.iter().map(|v| 3.0 * v - 7.0).collect();
        let b2: Vec<f64> = b.iter().map(|v| 3.0 * v - 7.0).collect();
        assert!((ess_chains(&[&a2, &b2]).unwrap().ess - e).abs() < 1e-6 * e);
        assert!((ess_chains(&[&b, &a]).unwrap().ess - e).abs() < 1e-9 * e);
    }

    #[test]
    fn rhat_identical_chains() {
        // Both halves of each chain and both chains coincide: R-hat = sqrt((h-1)/h).
        let base = normals(1_000_000, 2);
        let chain: Vec<f64> = base.iter().chain(&base).copied().collect();
        let r = rhat(&[&chain, &chain]).unwrap();
        assert!((r - 1.0).abs() < 1e-6, "{r}");
        assert_eq!(rhat(&[&[1.0; 10], &[1.0; 10]]).unwrap(), 1.0);
    }

    #[test]
    fn rhat_detects_offset() {
        let a = normals(1000, 3);
        let b: Vec<f64> = normals(1000, 4).iter().map(|v| v + 5.0).collect();
        assert!(rhat(&[&a, &b]).unwrap() > 1.5);
    }

    #[test]
    fn rhat_well_mixed_near_one() {
        let chains: Vec<Vec<f64>> = (0..3).map(|s| normals(2000, 40 + s)).collect();
        let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
        let r = rhat(&refs).unwrap();
        assert!(r > 1.0 - 1e-3 && r < 1.01, "{r}");
    }

    #[test]
    fn rhat_floor() {
        // var_plus / W >= (h - 1) / h whatever the between-chain spread.
        for seed in 0..20 {
            let chains: Vec<Vec<f64>> = (0..4).map(|s| normals(40, 1000 * seed + s)).collect();
            let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
            assert!(rhat(&refs).unwrap() >= (19.0_f64 / 20.0).sqrt() - 1e-15);
        }
    }

    #[test]
    fn rhat_invariances() {
        let chains: Vec<Vec<f64>> = (0..3).map(|s| ar1(300, 0.7, 60 + s)).collect();
        let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
        let r = rhat(&refs).unwrap();
        let shifted: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|v| -2.0 * v + 1.0).collect()).collect();
        let srefs: Vec<&[f64]> = shifted.iter().map(|c| c.as_slice()).collect();
        assert!((rhat(&srefs).unwrap() - r).abs() < 1e-10);
        assert!((rhat(&[refs[2], refs[0], refs[1]]).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn rhat_preconditions() {
        assert!(rhat(&[&[1.0, 2.0, 3.0, 4.0]]).is_err());
        assert!(rhat(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn jump_decomposition_identity() {
        let draws: Vec<Vec<f64>> = (0..50).map(|s| normals(6, 100 + s)).collect();
        let jd = jump_decomposition(&draws).unwrap();
        for t in 0..jd.j.len() {
            assert!((jd.j[t] - jd.t1[t] - jd.t2[t]).abs() <= 1e-10 * jd.j[t].max(jd.t1[t]).max(1.0));
            let brute: f64 = (0..6).flat_map(|a| (0..6).map(move |b| (a, b))).filter(|(a, b)| a != b).map(|(a, b)| {
                let da = draws[t + 1][a].powi(2) - draws[t][a].powi(2);
                let db = draws[t + 1][b].powi(2) - draws[t][b].powi(2);
                da * db
            }).sum();
            assert!((jd.t2[t] - brute).abs() < 1e-10 * brute.abs().max(1.0));
        }
    }

    #[test]
    fn jump_decomposition_trivial_cases() {
        let one: Vec<Vec<f64>> = normals(20, 1).into_iter().map(|v| vec![v]).collect();
        assert!(jump_decomposition(&one).unwrap().t2.iter().all(|&v| v == 0.0));
        let same = vec![vec![0.3, -1.0]; 5];
        let jd = jump_decomposition(&same).unwrap();
        assert_eq!((jd.mean_j, jd.mean_t1, jd.mean_t2), (0.0, 0.0, 0.0));
        assert!(jump_decomposition(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.5), 2.5);
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 4.0);
    }
}
