//! Zigzag-HMC against the bouncy particle sampler on the positive orthant of
//! a 256-dimensional standard normal.
//!
//! Run with `cargo run --release --example orthant_benchmark -- [seed] [iterations]`.

use phyloprobit::benchmark::{run_orthant, OrthantOptions, OrthantSampler};

fn main() -> phyloprobit::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let iterations = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let opts = OrthantOptions { seed, iterations, ..Default::default() };
    println!("sampler  mean    var     minESS  logd-lag1  mean-J     mean-T1    mean-T2    seconds");
    for sampler in [OrthantSampler::Zigzag, OrthantSampler::Bps] {
        let r = run_orthant(sampler, &opts, None)?.report()?;
        println!(
            "{:<8} {:.4}  {:.4}  {:>6.1}  {:>9.3}  {:>9.2}  {:>9.2}  {:>9.2}  {:.2}",
            sampler.name(),
            r.mean,
            r.variance,
            r.min_ess,
            r.log_density_lag1,
            r.mean_j,
            r.mean_t1,
            r.mean_t2,
            r.seconds
        );
    }
    println!("target   {:.4}  {:.4}", (2.0 / std::f64::consts::PI).sqrt(), 1.0 - 2.0 / std::f64::consts::PI);
    Ok(())
}
