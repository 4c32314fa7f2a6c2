//! Simulates a tree and a mixed trait table from the model and writes the
//! four files the `sample` command reads: `tree.nwk`, `traits.csv`,
//! `spec.json` and `truth.json`.
//!
//! Run with `cargo run --release --example simulate_dataset -- OUT_DIR [taxa] [seed] [missing-fraction]`.

use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phyloprobit::benchmark::SimulatedPhylo;
use phyloprobit::posterior::ModelConfig;
use phyloprobit::traits::{Observed, TraitKind};

fn main() -> phyloprobit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let Some(out) = args.get(1).map(PathBuf::from) else {
        eprintln!("usage: simulate_dataset OUT_DIR [taxa] [seed] [missing-fraction]");
        std::process::exit(1);
    };
    let taxa = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let missing: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let sim = SimulatedPhylo::generate(taxa, seed, &ModelConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));

    fs::create_dir_all(&out)?;
    fs::write(out.join("tree.nwk"), sim.tree.to_newick() + "\n")?;
    fs::write(out.join("spec.json"), sim.spec.to_json() + "\n")?;

    let mut w = csv::Writer::from_path(out.join("traits.csv"))?;
    let mut header = vec!["taxon".to_string()];
    header.extend(sim.spec.traits().iter().map(|t| t.name.clone()));
    w.write_record(&header)?;
    for (taxon, row) in sim.data.taxa.iter().zip(&sim.data.values) {
        let mut rec = vec![taxon.clone()];
        for (t, v) in sim.spec.traits().iter().zip(row) {
            let cell = match (v, &t.kind) {
                _ if rng.random::<f64>() < missing => "NA".to_string(),
                (Observed::Continuous(x), _) => format!("{x:.6}"),
                (Observed::Binary(s), _) => if *s > 0 { "1" } else { "0" }.to_string(),
                (Observed::Category(k), TraitKind::Categorical { classes }) => classes[*k].clone(),
                _ => "NA".to_string(),
            };
            rec.push(cell);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let q = sim.r.nrows();
    let rows = |m: &nalgebra::DMatrix<f64>| (0..q).map(|i| (0..q).map(|j| m[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>();
    let truth = serde_json::json!({ "r": rows(&sim.r), "d": sim.d, "partial_correlation": rows(&sim.partial) });
    fs::write(out.join("truth.json"), serde_json::to_string_pretty(&truth)? + "\n")?;
    println!("wrote {taxa} taxa to {}", out.display());
    Ok(())
}
