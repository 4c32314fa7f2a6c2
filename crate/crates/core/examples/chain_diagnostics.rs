//! Effective sample size, split R-hat, partial correlations and the
//! energy-jump decomposition on synthetic chains.
//!
//! Run with `cargo run --release --example chain_diagnostics`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use phyloprobit::diagnostics::{ess, ess_chains, jump_decomposition, partial_correlation, rhat};

fn ar1(rho: f64, n: usize, shift: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            x = rho * x + (1.0 - rho * rho).sqrt() * e;
            x + shift
        })
        .collect()
}

fn view(c: &[Vec<f64>]) -> Vec<&[f64]> {
    c.iter().map(Vec::as_slice).collect()
}

fn main() -> phyloprobit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 20_000;
    for rho in [0.0, 0.5, 0.9] {
        let chain = ar1(rho, n, 0.0, &mut rng);
        let expected = n as f64 * (1.0 - rho) / (1.0 + rho);
        println!("AR(1) rho = {rho}: ESS {:.0} (theory {expected:.0})", ess(&chain)?.ess);
    }

    let mixed: Vec<Vec<f64>> = (0..4).map(|_| ar1(0.5, 2000, 0.0, &mut rng)).collect();
    let stuck: Vec<Vec<f64>> = (0..4).map(|k| ar1(0.5, 2000, k as f64, &mut rng)).collect();
    println!("4 mixed chains: R-hat {:.4}, ESS {:.0}", rhat(&view(&mixed))?, ess_chains(&view(&mixed))?.ess);
    println!("4 separated chains: R-hat {:.4}", rhat(&view(&stuck))?);

    let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.6, 0.3, 0.6, 1.0, 0.5, 0.3, 0.5, 1.0]);
    println!("partial correlations of{sigma}{}", partial_correlation(&sigma)?);

    let draws: Vec<Vec<f64>> = (0..1000).map(|_| (0..8).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let jd = jump_decomposition(&draws)?;
    println!("iid draws in 8 dimensions: mean J {:.2} = T1 {:.2} + T2 {:.2}", jd.mean_j, jd.mean_t1, jd.mean_t2);
    Ok(())
}
