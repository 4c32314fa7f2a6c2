//! No-U-turn sampling of an ill-scaled bivariate normal with dual-averaging
//! step-size adaptation during warmup.
//!
//! Run with `cargo run --release --example nuts_gaussian`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use phyloprobit::hmc::{nuts_kernel, DualAveraging, HamiltonianSystem, NutsOptions};

/// Independent normal with standard deviations 1 and 0.01.
struct Stretched;

const SD: [f64; 2] = [1.0, 0.01];

impl HamiltonianSystem for Stretched {
    fn dim(&self) -> usize {
        2
    }

    fn potential_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let mut u = 0.0;
        for i in 0..2 {
            grad[i] = theta[i] / (SD[i] * SD[i]);
            u += 0.5 * theta[i] * grad[i];
        }
        u
    }
}

fn main() -> phyloprobit::Result<()> {
    let (warmup, draws) = (1000, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opts = NutsOptions::default();
    let mut theta = vec![0.5, 0.0];
    let mut dual = DualAveraging::new(0.1, 0.8);
    let mut accept = 0.0;
    for _ in 0..warmup {
        let t = nuts_kernel(&theta, &Stretched, dual.step_size(), &opts, &mut rng)?;
        dual.update(t.accept_stat);
        theta = t.point.theta;
    }
    let eps = dual.final_step_size();
    let (mut sum, mut sq, mut depth) = ([0.0; 2], [0.0; 2], 0);
    for _ in 0..draws {
        let t = nuts_kernel(&theta, &Stretched, eps, &opts, &mut rng)?;
        accept += t.accept_stat;
        depth += t.depth;
        theta = t.point.theta;
        for i in 0..2 {
            sum[i] += theta[i];
            sq[i] += theta[i] * theta[i];
        }
    }
    let n = draws as f64;
    println!("adapted step size {eps:.5}, mean accept {:.3}, mean depth {:.2}", accept / n, depth as f64 / n);
    for i in 0..2 {
        let m = sum[i] / n;
        println!("coordinate {}: mean {m:+.4}, sd {:.4} (true sd {})", i + 1, (sq[i] / n - m * m).sqrt(), SD[i]);
    }
    Ok(())
}
