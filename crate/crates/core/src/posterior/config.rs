use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmc::{NutsOptions, NutsVariant};

/// Log-normal prior on a scale `d`: `log d ~ N(location, scale^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormalPrior {
    pub location: f64,
    pub scale: f64,
}

impl Default for LogNormalPrior {
    fn default() -> Self {
        Self { location: 0.0, scale: 1.0 }
    }
}

/// Root-prior mean: one value for every latent column, or one per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RootMean {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Default for RootMean {
    fn default() -> Self {
        RootMean::Scalar(0.0)
    }
}

impl RootMean {
    pub fn expand(&self, q: usize) -> Result<Vec<f64>> {
        match self {
            RootMean::Scalar(v) => Ok(vec![*v; q]),
            RootMean::Vector(v) if v.len() == q => Ok(v.clone()),
            RootMean::Vector(v) => Err(Error::Config(format!("root_mean has {} entries but the model has {q} latent columns", v.len()))),
        }
    }
}

/// How each MCMC iteration updates the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Joint latent/covariance update with no-U-turn doubling.
    #[default]
    LgNuts,
    /// Joint update with a fixed number of split steps.
    LgHmc,
    /// Random-scan Gibbs: latent update or covariance NUTS update.
    Alternate,
}

/// Latent-block kernel used by the alternating sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentKernel {
    #[default]
    Zigzag,
    Bps,
}

/// Priors, root prior and sampler settings. Every field has a default;
/// unknown keys are rejected when reading JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// LKJ shape.
    pub lkj_eta: f64,
    /// Prior on each free scale entry of `D`.
    pub scale_prior: LogNormalPrior,
    /// Put log-normal priors on the scales of discrete-trait columns too,
    /// instead of fixing them at 1. Those scales are not identified.
    pub free_discrete_scales: bool,
    pub root_mean: RootMean,
    /// Root-prior sample size.
    pub root_kappa: f64,

    pub sampler: SamplerKind,
    pub latent_kernel: LatentKernel,
    pub nuts_variant: NutsVariant,
    pub max_depth: usize,
    pub target_accept: f64,
    /// Initial step size for the covariance block.
    pub step_size: f64,
    /// Initial latent-to-covariance step-size ratio.
    pub step_ratio: f64,
    pub adapt_step_size: bool,
    pub adapt_step_ratio: bool,
    /// Split steps per joint HMC iteration.
    pub lstep: usize,
    /// Travel time of one latent update in the alternating sampler.
    pub latent_travel_time: f64,
    /// Velocity refreshment rate of the bouncy particle sampler.
    pub refresh_rate: f64,
    /// Probability of picking the latent block in the alternating sampler.
    pub scan_probability: f64,

    pub chains: usize,
    /// Post burn-in iterations per chain.
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Write the latent matrix into chain files.
    pub record_latent: bool,
    /// Consecutive divergent iterations that abort a chain.
    pub max_consecutive_divergences: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lkj_eta: 1.0,
            scale_prior: LogNormalPrior::default(),
            free_discrete_scales: false,
            root_mean: RootMean::default(),
            root_kappa: 10.0,
            sampler: SamplerKind::default(),
            latent_kernel: LatentKernel::default(),
            nuts_variant: NutsVariant::default(),
            max_depth: 10,
            target_accept: 0.8,
            step_size: 0.1,
            step_ratio: 1.0,
            adapt_step_size: true,
            adapt_step_ratio: false,
            lstep: 100,
            latent_travel_time: 1.0,
            refresh_rate: 1.4,
            scan_probability: 0.5,
            chains: 1,
            iterations: 1000,
            burnin: 500,
            thin: 1,
            seed: 1,
            record_latent: false,
            max_consecutive_divergences: 200,
        }
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lkj_eta", self.lkj_eta),
            ("scale_prior.scale", self.scale_prior.scale),
            ("root_kappa", self.root_kappa),
            ("step_size", self.step_size),
            ("step_ratio", self.step_ratio),
            ("latent_travel_time", self.latent_travel_time),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.refresh_rate >= 0.0 && self.refresh_rate.is_finite()) {
            return Err(Error::Config(format!("refresh_rate must be non-negative, got {}", self.refresh_rate)));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!("target_accept must lie in (0, 1), got {}", self.target_accept)));
        }
        if !(self.scan_probability > 0.0 && self.scan_probability < 1.0) {
            return Err(Error::Config(format!("scan_probability must lie in (0, 1), got {}", self.scan_probability)));
        }
        if !self.scale_prior.location.is_finite() {
            return Err(Error::Config("scale_prior.location must be finite".into()));
        }
        let counts = [("chains", self.chains), ("lstep", self.lstep), ("thin", self.thin), ("max_depth", self.max_depth), ("iterations", self.iterations)];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn nuts_options(&self) -> NutsOptions {
        NutsOptions { max_depth: self.max_depth, variant: self.nuts_variant }
    }

    /// Iterations spent adapting the step size (first half of burn-in).
    pub fn warmup(&self) -> usize {
        self.burnin / 2
    }
}
