//! Samples a correlated bivariate normal truncated to the positive quadrant
//! with Zigzag-HMC and with the bouncy particle sampler, and compares the
//! sample means with a rejection-sampling reference.
//!
//! Run with `cargo run --release --example truncated_normal`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use phyloprobit::bps::bps_kernel;
use phyloprobit::tmvn::{zigzag_hmc_kernel, DenseTarget};
use phyloprobit::traits::ConstraintMap;

const DRAWS: usize = 100_000;

fn main() -> phyloprobit::Result<()> {
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]);
    let target = DenseTarget::from_covariance(vec![0.0, 0.0], &cov)?;
    let cmap = ConstraintMap::orthant(2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let chol = cov.clone().cholesky().unwrap().l();
    let mut reference = [0.0; 2];
    let mut kept = 0;
    while kept < DRAWS {
        let z: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
        let x = [chol[(0, 0)] * z[0], chol[(1, 0)] * z[0] + chol[(1, 1)] * z[1]];
        if x[0] > 0.0 && x[1] > 0.0 {
            reference[0] += x[0];
            reference[1] += x[1];
            kept += 1;
        }
    }

    let mut x = vec![0.5, 0.5];
    let mut zz = [0.0; 2];
    let mut rejected = 0;
    for _ in 0..DRAWS {
        if !zigzag_hmc_kernel(&mut x, &target, &cmap, 1.0, &mut rng)?.accepted {
            rejected += 1;
        }
        zz[0] += x[0];
        zz[1] += x[1];
    }

    let mut y = vec![0.5, 0.5];
    let mut bps = [0.0; 2];
    for _ in 0..DRAWS {
        bps_kernel(&mut y, &target, &cmap, 1.0, 1.4, &mut rng)?;
        bps[0] += y[0];
        bps[1] += y[1];
    }

    let n = DRAWS as f64;
    println!("{:<10} {:>8} {:>8}", "method", "E[x1]", "E[x2]");
    println!("{:<10} {:>8.4} {:>8.4}", "rejection", reference[0] / n, reference[1] / n);
    println!("{:<10} {:>8.4} {:>8.4}", "zigzag", zz[0] / n, zz[1] / n);
    println!("{:<10} {:>8.4} {:>8.4}", "bps", bps[0] / n, bps[1] / n);
    println!("zigzag Metropolis rejections: {rejected}");
    Ok(())
}
