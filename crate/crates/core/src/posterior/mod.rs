//! Joint posterior of the phylogenetic probit model with the tree fixed.
//!
//! The covariance is `Sigma = D R D`. The covariance block `theta` is the
//! CPC/Fisher coordinates of `R` followed by `log d_j` for every free scale.
//! Given the latent matrix `X`, everything the covariance block needs is
//! `S = (X - M)^T V^-1 (X - M)`, so gradients in `theta` cost `O(q^3)`.

pub mod config;
pub mod driver;
pub mod transform;

use nalgebra::DMatrix;
use rand::Rng;

pub use config::{LatentKernel, LogNormalPrior, ModelConfig, RootMean, SamplerKind};
pub use driver::{gibbs_driver, run_chains, ChainRecord, ChainSummary};
pub use transform::{cpc_inverse, cpc_transform, lkj_draw, n_correlation_coords, CorrelationFactor};

use crate::error::{Error, Result};
use crate::hmc::HamiltonianSystem;
use crate::phylo::{simulate_traits, Phylogeny, TreeGaussian};
use crate::split::JointSystem;
use crate::tmvn::GaussianTarget;
use crate::traits::{ConstraintMap, ObservedTraits, TraitSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `R`, `D` and the transform quantities at one `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceParams {
    pub factor: CorrelationFactor,
    /// Diagonal of `D`.
    pub d: Vec<f64>,
    /// True where the scale is sampled rather than fixed at 1.
    pub free: Vec<bool>,
    pub theta: Vec<f64>,
}

impl CovarianceParams {
    pub fn r(&self) -> &DMatrix<f64> {
        &self.factor.r
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        let q = self.d.len();
        DMatrix::from_fn(q, q, |i, j| self.d[i] * self.factor.r[(i, j)] * self.d[j])
    }

    /// Inverse of the Cholesky factor of `R`; fails once `R` is numerically singular.
    pub fn linv(&self) -> Result<DMatrix<f64>> {
        let q = self.d.len();
        if self.factor.l.diagonal().iter().any(|&v| !(v > 1e-150)) {
            return Err(Error::NotPositiveDefinite("correlation matrix is singular".into()));
        }
        self.factor
            .l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(q, q))
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::NotPositiveDefinite("correlation matrix is singular".into()))
    }

    /// `Sigma^-1` from the Cholesky factor of `R`.
    pub fn sigma_inv(&self) -> Result<DMatrix<f64>> {
        let q = self.d.len();
        let linv = self.linv()?;
        let rinv = linv.transpose() * linv;
        Ok(DMatrix::from_fn(q, q, |i, j| rinv[(i, j)] / (self.d[i] * self.d[j])))
    }

    pub fn log_det_sigma(&self) -> f64 {
        self.factor.log_det + 2.0 * self.d.iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Additive pieces of the log posterior in `theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPosteriorTerms {
    /// Matrix-normal log-density of `X`.
    pub likelihood: f64,
    /// `(eta - 1) log det R`, unnormalized.
    pub lkj: f64,
    /// Log-normal log-densities of the free scales.
    pub scale_prior: f64,
    /// Log-Jacobians of the CPC/Fisher map and of `d = exp(zeta)`.
    pub jacobian: f64,
}

impl LogPosteriorTerms {
    pub fn total(&self) -> f64 {
        self.likelihood + self.lkj + self.scale_prior + self.jacobian
    }
}

/// Data, tree and priors bound together.
#[derive(Debug, Clone)]
pub struct ProbitModel {
    spec: TraitSpec,
    data: ObservedTraits,
    tree: TreeGaussian,
    cmap: ConstraintMap,
    n: usize,
    q: usize,
    root_mean: Vec<f64>,
    /// `M` flattened row-major.
    mean: Vec<f64>,
    free_scale: Vec<bool>,
    eta: f64,
    scale_prior: LogNormalPrior,
}

impl ProbitModel {
    /// Aligns the trait table with the tree tips and builds the tree caches.
    pub fn new(phylo: &Phylogeny, data: &ObservedTraits, spec: &TraitSpec, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let data = data.reordered(&phylo.tip_labels())?;
        let tree = TreeGaussian::new(phylo, config.root_kappa)?;
        let cmap = ConstraintMap::from_observed(spec, &data)?;
        let q = spec.layout().q;
        let n = phylo.n_tips();
        let root_mean = config.root_mean.expand(q)?;
        let mean = (0..n * q).map(|i| root_mean[i % q]).collect();
        let discrete = spec.discrete_columns();
        let free_scale = discrete.iter().map(|&disc| !disc || config.free_discrete_scales).collect();
        Ok(Self {
            spec: spec.clone(),
            data,
            tree,
            cmap,
            n,
            q,
            root_mean,
            mean,
            free_scale,
            eta: config.lkj_eta,
            scale_prior: config.scale_prior,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn spec(&self) -> &TraitSpec {
        &self.spec
    }

    pub fn data(&self) -> &ObservedTraits {
        &self.data
    }

    pub fn tree(&self) -> &TreeGaussian {
        &self.tree
    }

    pub fn constraint_map(&self) -> &ConstraintMap {
        &self.cmap
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn root_mean(&self) -> &[f64] {
        &self.root_mean
    }

    pub fn free_scales(&self) -> &[bool] {
        &self.free_scale
    }

    pub fn n_free_scales(&self) -> usize {
        self.free_scale.iter().filter(|&&f| f).count()
    }

    pub fn theta_dim(&self) -> usize {
        n_correlation_coords(self.q) + self.n_free_scales()
    }

    /// `R = I` and free scales at the prior median.
    pub fn initial_theta(&self) -> Vec<f64> {
        let mut t = vec![0.0; n_correlation_coords(self.q)];
        t.extend(std::iter::repeat_n(self.scale_prior.location, self.n_free_scales()));
        t
    }

    /// `theta` for given `R` and scales (fixed scales must be 1).
    pub fn theta_from(&self, r: &DMatrix<f64>, d: &[f64]) -> Result<Vec<f64>> {
        if d.len() != self.q {
            return Err(Error::InvalidArgument(format!("expected {} scales, got {}", self.q, d.len())));
        }
        let mut t = cpc_inverse(r)?;
        for (j, &dj) in d.iter().enumerate() {
            if self.free_scale[j] {
                t.push(dj.ln());
            } else if (dj - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("scale {j} is fixed at 1 but {dj} was given")));
            }
        }
        Ok(t)
    }

    pub fn params(&self, theta: &[f64]) -> Result<CovarianceParams> {
        let m = n_correlation_coords(self.q);
        if theta.len() != self.theta_dim() {
            return Err(Error::InvalidArgument(format!("theta has length {}, expected {}", theta.len(), self.theta_dim())));
        }
        let factor = cpc_transform(&theta[..m], self.q)?;
        let mut zeta = theta[m..].iter();
        let d = self.free_scale.iter().map(|&f| if f { zeta.next().unwrap().exp() } else { 1.0 }).collect();
        Ok(CovarianceParams { factor, d, free: self.free_scale.clone(), theta: theta.to_vec() })
    }

    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).map(|(a, b)| a - b).collect()
    }

    /// `S = (X - M)^T V^-1 (X - M)`, `q x q` row-major.
    pub fn scatter(&self, x: &[f64]) -> Vec<f64> {
        self.tree.quadratic_form(&self.residual(x), self.q)
    }

    /// Log posterior pieces from the scatter matrix.
    pub fn terms_from_scatter(&self, theta: &[f64], s: &[f64]) -> Result<LogPosteriorTerms> {
        let p = self.params(theta)?;
        let (n, q) = (self.n as f64, self.q as f64);
        let (rinv_s, _) = self.rinv_scaled_scatter(&p, s)?;
        let likelihood = -0.5 * n * q * LN_2PI - 0.5 * q * self.tree.logdet_v() - 0.5 * n * p.log_det_sigma() - 0.5 * rinv_s.trace();
        let lkj = (self.eta - 1.0) * p.factor.log_det;
        let (mu, sd) = (self.scale_prior.location, self.scale_prior.scale);
        let mut scale_prior = 0.0;
        let mut jacobian = p.factor.log_jacobian;
        for (j, &f) in self.free_scale.iter().enumerate() {
            if f {
                let zeta = p.d[j].ln();
                scale_prior += -zeta - sd.ln() - 0.5 * LN_2PI - 0.5 * ((zeta - mu) / sd).powi(2);
                jacobian += zeta;
            }
        }
        Ok(LogPosteriorTerms { likelihood, lkj, scale_prior, jacobian })
    }

    /// `R^-1 D^-1 S D^-1` and `L^-1`.
    fn rinv_scaled_scatter(&self, p: &CovarianceParams, s: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let q = self.q;
        let st = DMatrix::from_fn(q, q, |i, j| s[i * q + j] / (p.d[i] * p.d[j]));
        let linv = p.linv()?;
        Ok((linv.transpose() * (&linv * st), linv))
    }

    /// Log posterior and its `theta` gradient from the scatter matrix.
    pub fn log_posterior_and_gradient(&self, theta: &[f64], s: &[f64], grad: &mut [f64]) -> Result<f64> {
        let p = self.params(theta)?;
        let q = self.q;
        let n = self.n as f64;
        let (rinv_s, linv) = self.rinv_scaled_scatter(&p, s)?;
        // d/dL of -tr(R^-1 S~)/2 is R^-1 S~ R^-1 L = (R^-1 S~) L^-T
        let g_l = &rinv_s * linv.transpose();
        let m = n_correlation_coords(q);
        let gz = transform::pullback_cholesky_gradient(&p.factor, &g_l);
        let mut idx = 0;
        for i in 0..q {
            for k in 0..i {
                let a = 0.5 * (q - k) as f64 + (self.eta - 1.0) - 0.5 * n;
                grad[idx] = gz[idx] - 2.0 * a * p.factor.cpc[idx];
                idx += 1;
            }
        }
        let (mu, sd) = (self.scale_prior.location, self.scale_prior.scale);
        let mut out = m;
        for j in 0..q {
            if self.free_scale[j] {
                let zeta = p.d[j].ln();
                grad[out] = -n + rinv_s[(j, j)] - (zeta - mu) / (sd * sd);
                out += 1;
            }
        }
        Ok(self.terms_from_scatter(theta, s)?.total())
    }

    /// Log posterior at `(theta, X)`; `-inf` when `X` contradicts the data.
    pub fn log_posterior(&self, theta: &[f64], x: &[f64]) -> f64 {
        if !self.cmap.is_consistent(x) {
            return f64::NEG_INFINITY;
        }
        self.terms_from_scatter(theta, &self.scatter(x)).map_or(f64::NEG_INFINITY, |t| t.total())
    }

    pub fn grad_theta(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; theta.len()];
        let v = self.log_posterior_and_gradient(theta, &self.scatter(x), &mut g)?;
        if !v.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite covariance gradient".into()));
        }
        Ok(g)
    }

    /// Conditional target of `vec(X)` given `theta`.
    pub fn latent_target(&self, theta: &[f64]) -> Result<LatentTarget<'_>> {
        let p = self.params(theta)?;
        let sigma_inv = p.sigma_inv()?;
        if sigma_inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite("trait covariance".into()));
        }
        let q = self.q;
        let flat = (0..q * q).map(|k| sigma_inv[(k / q, k % q)]).collect();
        Ok(LatentTarget { tree: &self.tree, sigma_inv: flat, q, mean: &self.mean })
    }

    /// Prior draw of `X` with `Sigma = I`, moved onto the data.
    pub fn initial_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let sigma = DMatrix::identity(self.q, self.q);
        let (x, _) = simulate_traits(self.tree.phylogeny(), &sigma, &self.root_mean, self.tree.kappa(), &self.spec, rng)?;
        let mut x = x.data;
        self.cmap.project_consistent(&mut x);
        if !self.cmap.is_consistent(&x) {
            return Err(Error::InconsistentState);
        }
        Ok(x)
    }

    /// Covariance block with the latent matrix held fixed.
    pub fn conditional_system(&self, x: &[f64]) -> CovarianceSystem<'_> {
        CovarianceSystem { model: self, scatter: self.scatter(x) }
    }
}

/// `N(M, V (x) Sigma)` for `vec(X)` with tree-structured precision products.
#[derive(Debug, Clone)]
pub struct LatentTarget<'a> {
    tree: &'a TreeGaussian,
    sigma_inv: Vec<f64>,
    q: usize,
    mean: &'a [f64],
}

impl GaussianTarget for LatentTarget<'_> {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn mean(&self) -> &[f64] {
        self.mean
    }

    fn precision_product(&self, u: &[f64], out: &mut [f64]) {
        self.tree.precision_product(u, &self.sigma_inv, self.q, out);
    }

    fn add_precision_column(&self, i: usize, scale: f64, out: &mut [f64]) {
        self.tree.add_precision_column(i / self.q, i % self.q, &self.sigma_inv, self.q, scale, out);
    }
}

/// Potential of the covariance block at a fixed latent matrix.
pub struct CovarianceSystem<'a> {
    model: &'a ProbitModel,
    scatter: Vec<f64>,
}

impl HamiltonianSystem for CovarianceSystem<'_> {
    fn dim(&self) -> usize {
        self.model.theta_dim()
    }

    fn potential_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        joint_potential(self.model, theta, &self.scatter, grad)
    }
}

fn joint_potential(model: &ProbitModel, theta: &[f64], s: &[f64], grad: &mut [f64]) -> f64 {
    match model.log_posterior_and_gradient(theta, s, grad) {
        Ok(v) if v.is_finite() => {
            grad.iter_mut().for_each(|g| *g = -*g);
            -v
        }
        _ => {
            grad.fill(f64::NAN);
            f64::INFINITY
        }
    }
}

impl JointSystem for ProbitModel {
    type Target<'a> = LatentTarget<'a>;
    type Stats = Vec<f64>;

    fn theta_dim(&self) -> usize {
        ProbitModel::theta_dim(self)
    }

    fn constraints(&self) -> &ConstraintMap {
        &self.cmap
    }

    fn latent_target(&self, theta: &[f64]) -> Result<LatentTarget<'_>> {
        ProbitModel::latent_target(self, theta)
    }

    fn latent_stats(&self, x: &[f64]) -> Vec<f64> {
        self.scatter(x)
    }

    fn potential_and_gradient(&self, theta: &[f64], stats: &Vec<f64>, grad: &mut [f64]) -> f64 {
        joint_potential(self, theta, stats, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phylo::{matrix_normal_logdensity, tree_covariance};
    use crate::traits::TraitDef;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mixed_spec() -> TraitSpec {
        TraitSpec::new(vec![
            TraitDef::continuous("size"),
            TraitDef::binary("b1"),
            TraitDef::categorical("colour", ["red", "green", "blue"]),
        ])
        .unwrap()
    }

    fn toy(seed: u64, n: usize, config: &ModelConfig) -> (ProbitModel, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = Phylogeny::random_coalescent(n, &mut rng).unwrap();
        let spec = mixed_spec();
        let sigma = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.3, -0.2, 0.1, //
            0.3, 1.0, 0.4, 0.0, //
            -0.2, 0.4, 1.0, 0.2, //
            0.1, 0.0, 0.2, 1.0,
        ]);
        let (x, y) = simulate_traits(&tree, &sigma, &[0.0; 4], 10.0, &spec, &mut rng).unwrap();
        let model = ProbitModel::new(&tree, &y, &spec, config).unwrap();
        (model, x.data)
    }

    fn random_theta(model: &ProbitModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..model.theta_dim()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matches_dense_reimplementation() {
        let config = ModelConfig { lkj_eta: 2.5, ..Default::default() };
        let (model, x) = toy(3, 8, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = tree_covariance(model.tree().phylogeny(), 10.0).unwrap();
        for _ in 0..5 {
            let theta = random_theta(&model, &mut rng);
            let p = model.params(&theta).unwrap();
            let xm = DMatrix::from_row_slice(8, 4, &x);
            let mm = DMatrix::zeros(8, 4);
            let mut expected = matrix_normal_logdensity(&xm, &mm, &v, &p.sigma()).unwrap();
            expected += 1.5 * p.r().determinant().ln();
            expected += p.factor.log_jacobian;
            // continuous column: log-normal prior on d plus log d Jacobian
            let d0 = p.d[0];
            expected += -d0.ln() - 0.5 * LN_2PI - 0.5 * d0.ln().powi(2) + d0.ln();
            let got = model.log_posterior(&theta, &x);
            assert!((got - expected).abs() < 1e-8 * (1.0 + expected.abs()), "{got} vs {expected}");
        }
    }

    #[test]
    fn terms_add_up() {
        let (model, x) = toy(5, 6, &ModelConfig::default());
        let theta = vec![0.1, -0.3, 0.2, 0.05, 0.4, -0.1, 0.3];
        let t = model.terms_from_scatter(&theta, &model.scatter(&x)).unwrap();
        assert_eq!(t.lkj, 0.0);
        assert_eq!(t.total(), t.likelihood + t.lkj + t.scale_prior + t.jacobian);
        assert_eq!(model.log_posterior(&theta, &x), t.total());
    }

    #[test]
    fn inconsistent_latent_is_minus_infinity() {
        let (model, mut x) = toy(5, 6, &ModelConfig::default());
        let theta = model.initial_theta();
        x[1] = -x[1];
        assert_eq!(model.log_posterior(&theta, &x), f64::NEG_INFINITY);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, eta, literal) in [(1, 1.0, false), (2, 3.0, false), (4, 0.7, true)] {
            let config = ModelConfig { lkj_eta: eta, free_discrete_scales: literal, ..Default::default() };
            let (model, x) = toy(seed, 7, &config);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..10 {
                let theta = random_theta(&model, &mut rng);
                let g = model.grad_theta(&theta, &x).unwrap();
                let h = 1e-5;
                for j in 0..theta.len() {
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    tp[j] += h;
                    tm[j] -= h;
                    let fd = (model.log_posterior(&tp, &x) - model.log_posterior(&tm, &x)) / (2.0 * h);
                    assert!((fd - g[j]).abs() <= 1e-4 * fd.abs().max(1.0), "coord {j}: fd {fd} analytic {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let (model, x) = toy(8, 5, &ModelConfig::default());
        let theta = vec![0.2, -0.1, 0.3, 0.0, 0.1, -0.2, 0.4];
        let target = model.latent_target(&theta).unwrap();
        let mut g = vec![0.0; x.len()];
        target.gradient(&x, &mut g);
        let lp = |x: &[f64]| model.terms_from_scatter(&theta, &model.scatter(x)).unwrap().total();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = -(lp(&xp) - lp(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn fixed_scales_for_discrete_columns() {
        let (model, _) = toy(1, 4, &ModelConfig::default());
        assert_eq!(model.free_scales(), &[true, false, false, false]);
        assert_eq!(model.theta_dim(), 7);
        let (literal, _) = toy(1, 4, &ModelConfig { free_discrete_scales: true, ..Default::default() });
        assert_eq!(literal.theta_dim(), 10);
    }

    #[test]
    fn theta_round_trip() {
        let (model, _) = toy(1, 4, &ModelConfig::default());
        let theta = vec![0.2, -0.1, 0.3, 0.0, 0.1, -0.2, 0.4];
        let p = model.params(&theta).unwrap();
        let back = model.theta_from(p.r(), &p.d).unwrap();
        for (a, b) in theta.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn initial_latent_is_consistent() {
        let (model, _) = toy(11, 12, &ModelConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = model.initial_latent(&mut rng).unwrap();
        assert!(model.constraint_map().is_consistent(&x));
    }
}
