//! Joint sampling of a Gaussian block (leapfrog) and a truncated latent
//! block (zigzag) by symmetric splitting, with fixed-length LG-HMC and with
//! LG-NUTS, on a small joint normal with known moments.
//!
//! Run with `cargo run --release --example joint_split_sampler`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use phyloprobit::hmc::NutsOptions;
use phyloprobit::split::{lg_hmc_kernel, lg_nuts_kernel, mean_speed_laplace, tune_rs, JointGaussian, SplitState};
use phyloprobit::traits::ConstraintMap;

const DRAWS: usize = 5000;

fn main() -> phyloprobit::Result<()> {
    let cov = DMatrix::from_row_slice(4, 4, &[
        1.0, 0.3, 0.5, 0.1, //
        0.3, 2.0, 0.2, 0.4, //
        0.5, 0.2, 1.5, 0.3, //
        0.1, 0.4, 0.3, 0.8,
    ]);
    let system = JointGaussian::new(&cov, 2, ConstraintMap::unconstrained(2))?;
    let sigma_g = cov.view((0, 0), (2, 2)).into_owned();
    let sigma_l = cov.view((2, 2), (2, 2)).into_owned();
    let rs = tune_rs(&sigma_g, &sigma_l)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    println!("tuned step ratio {rs:.4}; mean Laplace speed in 256 dimensions {:.3}", mean_speed_laplace(256, 20_000, &mut rng));

    for name in ["lg-hmc", "lg-nuts"] {
        let mut state = SplitState::new(vec![0.0; 2], vec![0.0; 2], 0.2, rs, 10);
        let mut sq = [0.0; 4];
        let mut accept = 0.0;
        for _ in 0..DRAWS {
            let o = if name == "lg-hmc" {
                lg_hmc_kernel(&mut state, &system, &mut rng)?
            } else {
                lg_nuts_kernel(&mut state, &system, &NutsOptions::default(), &mut rng)?
            };
            accept += o.accept_stat;
            for (s, v) in sq.iter_mut().zip(state.theta.iter().chain(&state.x)) {
                *s += v * v;
            }
        }
        let n = DRAWS as f64;
        println!("{name}: mean accept {:.3}", accept / n);
        for (i, s) in sq.iter().enumerate() {
            println!("  var[z{}] {:.3} (true {:.3})", i + 1, s / n, cov[(i, i)]);
        }
    }
    Ok(())
}
