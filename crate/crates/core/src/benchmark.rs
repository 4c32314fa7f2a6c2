//! Built-in benchmark targets: the orthant-truncated standard normal and a
//! simulated phylogenetic probit data set with known truth.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::bps::bps_kernel;
use crate::diagnostics::{autocorrelation, ess, jump_decomposition, partial_correlation, summarize, ChainTable, SummaryOptions, SummaryReport};
use crate::error::{Error, Result};
use crate::phylo::{simulate_traits, Phylogeny};
use crate::posterior::driver::chain_columns;
use crate::posterior::{lkj_draw, run_chains, ChainSummary, ModelConfig, ProbitModel};
use crate::tmvn::{zigzag_hmc_kernel_logged, DiagonalTarget, EventRecord, GaussianTarget};
use crate::traits::{ConstraintMap, LatentMatrix, ObservedTraits, TraitDef, TraitSpec};

/// Latent sampler used on the orthant target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrthantSampler {
    Zigzag,
    Bps,
}

impl OrthantSampler {
    pub fn name(self) -> &'static str {
        match self {
            OrthantSampler::Zigzag => "zigzag",
            OrthantSampler::Bps => "bps",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthantOptions {
    pub dim: usize,
    pub iterations: usize,
    /// Travel time per iteration; every iteration starts with fresh momentum.
    pub travel_time: f64,
    /// BPS velocity refreshment rate.
    pub refresh_rate: f64,
    pub seed: u64,
}

impl Default for OrthantOptions {
    fn default() -> Self {
        Self { dim: 256, iterations: 2000, travel_time: 1.0, refresh_rate: 1.4, seed: 1 }
    }
}

/// Raw output of one orthant run.
#[derive(Debug, Clone)]
pub struct OrthantRun {
    pub sampler: OrthantSampler,
    pub options: OrthantOptions,
    /// State after every iteration.
    pub draws: Vec<Vec<f64>>,
    /// `-0.5 |x|^2` after every iteration.
    pub log_density: Vec<f64>,
    pub seconds: f64,
    pub events: usize,
    pub rejections: usize,
}

/// Samples `N(0, I)` restricted to the positive orthant.
///
/// The chain starts from an exact draw (absolute values of standard
/// normals). `on_event` sees every zigzag event with its iteration index.
pub fn run_orthant(sampler: OrthantSampler, opts: &OrthantOptions, mut on_event: Option<&mut dyn FnMut(usize, &EventRecord)>) -> Result<OrthantRun> {
    if opts.dim == 0 || opts.iterations == 0 {
        return Err(Error::InvalidArgument("orthant benchmark needs a positive dimension and iteration count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let target = DiagonalTarget::standard(opts.dim);
    let cmap = ConstraintMap::orthant(opts.dim);
    let mut x: Vec<f64> = (0..opts.dim).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| v.abs().max(f64::MIN_POSITIVE)).collect();
    let mut draws = Vec::with_capacity(opts.iterations);
    let mut log_density = Vec::with_capacity(opts.iterations);
    let (mut events, mut rejections) = (0, 0);
    let mut log = Vec::new();
    let started = Instant::now();
    for it in 0..opts.iterations {
        match sampler {
            OrthantSampler::Zigzag => {
                log.clear();
                let want_log = on_event.is_some();
                let o = zigzag_hmc_kernel_logged(&mut x, &target, &cmap, opts.travel_time, &mut rng, want_log.then_some(&mut log))?;
                events += o.stats.total();
                rejections += usize::from(!o.accepted);
                if let Some(f) = on_event.as_deref_mut() {
                    for e in &log {
                        f(it, e);
                    }
                }
            }
            OrthantSampler::Bps => {
                let s = bps_kernel(&mut x, &target, &cmap, opts.travel_time, opts.refresh_rate, &mut rng)?;
                events += s.bounces + s.walls + s.refreshes;
            }
        }
        log_density.push(-target.potential(&x));
        draws.push(x.clone());
    }
    Ok(OrthantRun { sampler, options: *opts, draws, log_density, seconds: started.elapsed().as_secs_f64(), events, rejections })
}

/// One row of the orthant benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrthantReport {
    pub sampler: OrthantSampler,
    pub seed: u64,
    pub dim: usize,
    pub iterations: usize,
    /// Draws used for the statistics (the second half).
    pub retained: usize,
    /// Average over coordinates of the per-coordinate sample mean.
    pub mean: f64,
    /// Average over coordinates of the per-coordinate sample variance.
    pub variance: f64,
    pub min_ess: f64,
    pub median_ess: f64,
    pub min_ess_per_second: f64,
    pub log_density_ess: f64,
    pub log_density_lag1: f64,
    pub mean_j: f64,
    pub mean_t1: f64,
    pub mean_t2: f64,
    pub seconds: f64,
    pub events: usize,
    pub rejections: usize,
}

/// Per-coordinate sample moments and ESS of the retained draws.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub ess: Vec<f64>,
}

impl OrthantRun {
    /// The second half of the chain.
    pub fn retained(&self) -> &[Vec<f64>] {
        &self.draws[self.draws.len() / 2..]
    }

    pub fn coordinate_moments(&self) -> Result<CoordinateMoments> {
        let kept = self.retained();
        let n = kept.len() as f64;
        let d = self.options.dim;
        let (mut mean, mut variance, mut ess_v) = (Vec::with_capacity(d), Vec::with_capacity(d), Vec::with_capacity(d));
        for i in 0..d {
            let col: Vec<f64> = kept.iter().map(|x| x[i]).collect();
            let m = col.iter().sum::<f64>() / n;
            mean.push(m);
            variance.push(col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0));
            ess_v.push(ess(&col)?.ess);
        }
        Ok(CoordinateMoments { mean, variance, ess: ess_v })
    }

    pub fn report(&self) -> Result<OrthantReport> {
        let m = self.coordinate_moments()?;
        let d = m.mean.len() as f64;
        let mut sorted = m.ess.clone();
        sorted.sort_by(f64::total_cmp);
        let min_ess = sorted[0];
        let logd = &self.log_density[self.log_density.len() / 2..];
        let jd = jump_decomposition(self.retained())?;
        Ok(OrthantReport {
            sampler: self.sampler,
            seed: self.options.seed,
            dim: self.options.dim,
            iterations: self.options.iterations,
            retained: self.retained().len(),
            mean: m.mean.iter().sum::<f64>() / d,
            variance: m.variance.iter().sum::<f64>() / d,
            min_ess,
            median_ess: crate::diagnostics::quantile(&sorted, 0.5),
            min_ess_per_second: min_ess / self.seconds,
            log_density_ess: ess(logd)?.ess,
            log_density_lag1: autocorrelation(logd, 1),
            mean_j: jd.mean_j,
            mean_t1: jd.mean_t1,
            mean_t2: jd.mean_t2,
            seconds: self.seconds,
            events: self.events,
            rejections: self.rejections,
        })
    }
}

/// Simulated data set with known covariance.
#[derive(Debug, Clone)]
pub struct SimulatedPhylo {
    pub tree: Phylogeny,
    pub spec: TraitSpec,
    pub data: ObservedTraits,
    pub latent: LatentMatrix,
    pub r: DMatrix<f64>,
    /// Scale diagonal (1 for discrete columns).
    pub d: Vec<f64>,
    pub sigma: DMatrix<f64>,
    pub partial: DMatrix<f64>,
}

/// Traits of the simulated benchmark: one continuous, two binary and one
/// three-class categorical trait, five latent columns in all.
pub fn simulated_spec() -> TraitSpec {
    TraitSpec::new(vec![
        TraitDef::continuous("size"),
        TraitDef::binary("b1"),
        TraitDef::binary("b2"),
        TraitDef::categorical("cat", ["c1", "c2", "c3"]),
    ])
    .expect("static spec is valid")
}

/// Settings of the simulated recovery benchmark: an LKJ(2) prior (also used
/// to draw the true `R`), target acceptance 0.95, 3 chains of 1000 draws
/// after 500 burn-in.
pub fn recovery_config() -> ModelConfig {
    ModelConfig { lkj_eta: 2.0, target_accept: 0.95, chains: 3, iterations: 1000, burnin: 500, ..Default::default() }
}

impl SimulatedPhylo {
    /// Draws a coalescent tree, `R` from the LKJ prior, continuous scales from
    /// their log-normal prior, and traits from the model.
    pub fn generate(n_taxa: usize, seed: u64, config: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = simulated_spec();
        let q = spec.layout().q;
        let tree = Phylogeny::random_coalescent(n_taxa, &mut rng)?;
        let r = lkj_draw(q, config.lkj_eta, &mut rng)?.r;
        let prior = config.scale_prior;
        let d: Vec<f64> = spec
            .discrete_columns()
            .iter()
            .map(|&disc| {
                if disc && !config.free_discrete_scales {
                    1.0
                } else {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (prior.location + prior.scale * z).exp()
                }
            })
            .collect();
        let sigma = DMatrix::from_fn(q, q, |i, j| d[i] * r[(i, j)] * d[j]);
        let mu0 = config.root_mean.expand(q)?;
        let (latent, data) = simulate_traits(&tree, &sigma, &mu0, config.root_kappa, &spec, &mut rng)?;
        let partial = partial_correlation(&sigma)?;
        Ok(Self { tree, spec, data, latent, r, d, sigma, partial })
    }

    pub fn model(&self, config: &ModelConfig) -> Result<ProbitModel> {
        ProbitModel::new(&self.tree, &self.data, &self.spec, config)
    }
}

/// Outcome of a posterior run on a simulated data set.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveryReport {
    pub summary: SummaryReport,
    pub chains: Vec<ChainSummary>,
    /// Sampling seconds (after burn-in) summed over chains.
    pub sampling_seconds: f64,
    /// Minimum partial-correlation ESS per sampling second.
    pub min_ess_per_second: f64,
    /// Upper-triangle `R` entries whose credible interval holds the truth.
    pub covered: usize,
    pub entries: usize,
}

/// Runs `config.chains` chains on `sim` and summarizes them at credible level `level`.
pub fn run_recovery(sim: &SimulatedPhylo, config: &ModelConfig, level: f64) -> Result<RecoveryReport> {
    let model = sim.model(config)?;
    let out = run_chains(&model, config, |_| Ok(Vec::new()))?;
    let columns = chain_columns(&model, config.record_latent);
    let tables = out.iter().map(|(records, _)| ChainTable::from_records(columns.clone(), records)).collect::<Result<Vec<_>>>()?;
    let summary = summarize(&tables, &SummaryOptions { level, highlight: None, include_latent: false })?;
    let q = model.q();
    let (mut covered, mut entries) = (0, 0);
    for i in 0..q {
        for j in (i + 1)..q {
            let name = format!("R_{}_{}", i + 1, j + 1);
            let p = summary.parameters.iter().find(|p| p.name == name).ok_or_else(|| Error::Data(format!("missing column {name}")))?;
            entries += 1;
            covered += usize::from(p.lower <= sim.r[(i, j)] && sim.r[(i, j)] <= p.upper);
        }
    }
    let chains: Vec<ChainSummary> = out.into_iter().map(|(_, s)| s).collect();
    let sampling_seconds: f64 = chains.iter().map(|c| c.sampling_seconds).sum();
    Ok(RecoveryReport {
        min_ess_per_second: summary.min_partial_correlation_ess / sampling_seconds,
        summary,
        chains,
        sampling_seconds,
        covered,
        entries,
    })
}
