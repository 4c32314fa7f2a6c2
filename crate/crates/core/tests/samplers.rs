use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use phyloprobit::hmc::{nuts_kernel, DualAveraging, HamiltonianSystem, NutsOptions, NutsVariant};
use phyloprobit::split::{lg_hmc_kernel, lg_nuts_kernel, JointGaussian, SplitState};
use phyloprobit::tmvn::{zigzag_hmc_kernel, DenseTarget};
use phyloprobit::traits::ConstraintMap;

struct Normal {
    sd: Vec<f64>,
}

impl HamiltonianSystem for Normal {
    fn dim(&self) -> usize {
        self.sd.len()
    }

    fn potential_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let mut u = 0.0;
        for i in 0..theta.len() {
            grad[i] = theta[i] / (self.sd[i] * self.sd[i]);
            u += 0.5 * theta[i] * grad[i];
        }
        u
    }
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn nuts_standard_normal_moments() {
    for variant in [NutsVariant::Slice, NutsVariant::Multinomial] {
        let sys = Normal { sd: vec![1.0] };
        let opts = NutsOptions { variant, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut theta = vec![0.0];
        let mut draws = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            theta = nuts_kernel(&theta, &sys, 0.8, &opts, &mut rng).unwrap().point.theta;
            draws.push(theta[0]);
        }
        let (m, v) = moments(&draws);
        assert!(m.abs() < 0.03, "{variant:?} mean {m}");
        assert!((v - 1.0).abs() < 0.05, "{variant:?} var {v}");
    }
}

#[test]
fn nuts_ill_scaled_with_adapted_step() {
    let sys = Normal { sd: vec![1.0, 0.01] };
    let opts = NutsOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut theta = vec![0.3, 0.0];
    let mut dual = DualAveraging::new(0.5, 0.8);
    for _ in 0..1000 {
        let t = nuts_kernel(&theta, &sys, dual.step_size(), &opts, &mut rng).unwrap();
        dual.update(t.accept_stat);
        theta = t.point.theta;
    }
    let eps = dual.final_step_size();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..20_000 {
        theta = nuts_kernel(&theta, &sys, eps, &opts, &mut rng).unwrap().point.theta;
        a.push(theta[0]);
        b.push(theta[1] / 0.01);
    }
    for (name, xs) in [("wide", &a), ("narrow", &b)] {
        let (m, v) = moments(xs);
        assert!(m.abs() < 0.06, "{name} mean {m}");
        assert!((v - 1.0).abs() < 0.08, "{name} var {v}");
    }
}

fn toy_cov() -> DMatrix<f64> {
    DMatrix::from_row_slice(4, 4, &[
        1.0, 0.3, 0.5, 0.1, //
        0.3, 2.0, 0.2, 0.4, //
        0.5, 0.2, 1.5, 0.3, //
        0.1, 0.4, 0.3, 0.8,
    ])
}

fn check_joint_moments(draws: &[Vec<f64>], cov: &DMatrix<f64>, tol_sd: f64) {
    let n = draws.len() as f64;
    for i in 0..4 {
        let col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        let (m, v) = moments(&col);
        let sd = cov[(i, i)].sqrt();
        assert!(m.abs() < tol_sd * sd, "coordinate {i} mean {m}");
        assert!((v - cov[(i, i)]).abs() < tol_sd * cov[(i, i)] * 2.0f64.sqrt(), "coordinate {i} var {v}");
    }
    let c01 = draws.iter().map(|d| d[0] * d[2]).sum::<f64>() / n;
    assert!((c01 - cov[(0, 2)]).abs() < 0.08, "cross moment {c01}");
}

#[test]
fn lg_hmc_gaussian_toy_moments() {
    let cov = toy_cov();
    let sys = JointGaussian::new(&cov, 2, ConstraintMap::unconstrained(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut state = SplitState::new(vec![0.0; 2], vec![0.0; 2], 0.25, 1.0, 8);
    let mut draws = Vec::new();
    for _ in 0..20_000 {
        lg_hmc_kernel(&mut state, &sys, &mut rng).unwrap();
        draws.push(state.theta.iter().chain(&state.x).copied().collect::<Vec<_>>());
    }
    check_joint_moments(&draws, &cov, 0.06);
}

#[test]
fn lg_nuts_gaussian_toy_moments() {
    let cov = toy_cov();
    let sys = JointGaussian::new(&cov, 2, ConstraintMap::unconstrained(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut state = SplitState::new(vec![0.0; 2], vec![0.0; 2], 0.3, 0.9, 1);
    let mut draws = Vec::new();
    for _ in 0..20_000 {
        lg_nuts_kernel(&mut state, &sys, &NutsOptions::default(), &mut rng).unwrap();
        draws.push(state.theta.iter().chain(&state.x).copied().collect::<Vec<_>>());
    }
    check_joint_moments(&draws, &cov, 0.06);
}

#[test]
fn lg_nuts_truncated_latent_matches_rejection_reference() {
    // theta and x jointly normal, x restricted to the positive quadrant
    let cov = toy_cov();
    let sys = JointGaussian::new(&cov, 2, ConstraintMap::orthant(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let chol = cov.clone().cholesky().unwrap().l();
    let mut reference = [0.0; 4];
    let mut kept = 0.0;
    while kept < 100_000.0 {
        let z = nalgebra::DVector::from_vec(phyloprobit::hmc::draw_gaussian(4, &mut rng));
        let v = &chol * z;
        if v[2] > 0.0 && v[3] > 0.0 {
            for i in 0..4 {
                reference[i] += v[i];
            }
            kept += 1.0;
        }
    }
    let mut state = SplitState::new(vec![0.0; 2], vec![0.5, 0.5], 0.3, 1.0, 1);
    let mut sums = [0.0; 4];
    let n = 20_000;
    for _ in 0..n {
        lg_nuts_kernel(&mut state, &sys, &NutsOptions::default(), &mut rng).unwrap();
        for (s, v) in sums.iter_mut().zip(state.theta.iter().chain(&state.x)) {
            *s += v;
        }
        assert!(state.x.iter().all(|&v| v > 0.0));
    }
    for i in 0..4 {
        let (a, b) = (sums[i] / n as f64, reference[i] / kept);
        assert!((a - b).abs() < 0.06, "coordinate {i}: lg-nuts {a}, reference {b}");
    }
}

#[test]
fn zigzag_kernel_on_truncated_bivariate_normal() {
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]);
    let target = DenseTarget::from_covariance(vec![0.0, 0.0], &cov).unwrap();
    let cmap = ConstraintMap::orthant(2);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mut x = vec![0.5, 0.5];
    let mut sum = [0.0; 2];
    let n = 50_000;
    for _ in 0..n {
        assert!(zigzag_hmc_kernel(&mut x, &target, &cmap, 1.0, &mut rng).unwrap().accepted);
        sum[0] += x[0];
        sum[1] += x[1];
    }
    // E[x_i] = phi(0) (1 + rho) / 2 / (1/4 + asin(rho) / (2 pi))
    let rho: f64 = 0.8;
    let expected = (1.0 + rho) / 2.0 / (2.0 * std::f64::consts::PI).sqrt() / (0.25 + rho.asin() / (2.0 * std::f64::consts::PI));
    for s in sum {
        assert!((s / n as f64 - expected).abs() < 0.025, "{}", s / n as f64);
    }
}

#[test]
fn zigzag_kernel_on_shifted_half_line() {
    use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};
    let mu = 0.5;
    let target = DenseTarget::new(vec![mu], DMatrix::from_element(1, 1, 1.0)).unwrap();
    let cmap = ConstraintMap::orthant(1);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let mut x = vec![1.0];
    let mut draws = Vec::with_capacity(40_000);
    for _ in 0..40_000 {
        zigzag_hmc_kernel(&mut x, &target, &cmap, 1.0, &mut rng).unwrap();
        draws.push(x[0]);
    }
    let z = StdNormal::standard();
    let lambda = z.pdf(mu) / z.cdf(mu);
    let (m, v) = moments(&draws);
    assert!((m - (mu + lambda)).abs() < 0.02, "mean {m} vs {}", mu + lambda);
    assert!((v - (1.0 - mu * lambda - lambda * lambda)).abs() < 0.03, "var {v}");
}
