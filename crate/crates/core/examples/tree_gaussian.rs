//! Parses a Newick tree, builds the across-taxa covariance and checks the
//! linear-time tree products against dense linear algebra.
//!
//! Run with `cargo run --release --example tree_gaussian`.

use nalgebra::DMatrix;

use phyloprobit::phylo::{matrix_normal_logdensity, parse_newick, tree_covariance, TreeGaussian};

fn main() -> phyloprobit::Result<()> {
    let tree = parse_newick("((A:0.3,B:0.3):0.5,(C:0.6,(D:0.1,E:0.1):0.5):0.2);")?;
    let kappa = 2.0;
    println!("tips {:?}", tree.tip_labels());
    let v = tree_covariance(&tree, kappa)?;
    println!("V = Upsilon + J / kappa:{v}");

    let gauss = TreeGaussian::new(&tree, kappa)?;
    let (n, q) = (tree.n_tips(), 2);
    let sigma = DMatrix::from_row_slice(q, q, &[1.0, 0.4, 0.4, 0.5]);
    let sigma_inv = sigma.clone().try_inverse().unwrap();
    let sigma_inv_flat: Vec<f64> = sigma_inv.transpose().iter().copied().collect();
    let resid: Vec<f64> = (0..n * q).map(|k| ((k * 7 % 5) as f64 - 2.0) / 3.0).collect();

    let mut fast = vec![0.0; n * q];
    gauss.precision_product(&resid, &sigma_inv_flat, q, &mut fast);
    let y = DMatrix::from_row_slice(n, q, &resid);
    let dense = v.clone().try_inverse().unwrap() * &y * &sigma_inv;
    let err = fast.iter().zip(dense.transpose().iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max |tree product - dense product| = {err:.2e}");

    let ld_tree = gauss.matrix_normal_logdensity(&resid, &sigma)?;
    let ld_dense = matrix_normal_logdensity(&y, &DMatrix::zeros(n, q), &v, &sigma)?;
    println!("matrix-normal log-density: tree {ld_tree:.10}, dense {ld_dense:.10}");
    println!("log det V: tree {:.10}, dense {:.10}", gauss.logdet_v(), v.determinant().ln());
    Ok(())
}
