//! Per-chain MCMC driver and multi-chain orchestration.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{LatentKernel, ModelConfig, SamplerKind};
use super::ProbitModel;
use crate::bps::bps_kernel;
use crate::error::{Error, Result};
use crate::hmc::{find_reasonable_step_size, nuts_kernel, draw_gaussian, DualAveraging, PhasePoint};
use crate::split::{lg_hmc_kernel, lg_nuts_kernel, lg_step, LgPoint, SplitState, StepRatioAdapter, TuningReport};
use crate::tmvn::{draw_laplace, zigzag_hmc_kernel};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PHYLOPROBIT_THREADS";

/// One retained draw.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainRecord {
    pub iteration: usize,
    pub log_density: f64,
    pub accept_stat: f64,
    pub divergent: bool,
    /// Wall-clock kernel seconds since the previous retained draw (or since burn-in ended).
    pub seconds: f64,
    /// Strict upper triangle of `R`, row by row.
    pub r_upper: Vec<f64>,
    /// Free entries of `D`.
    pub d_free: Vec<f64>,
    pub x: Option<Vec<f64>>,
}

/// Receives retained draws as they are produced.
pub trait RecordSink {
    fn record(&mut self, record: &ChainRecord) -> Result<()>;
}

impl RecordSink for Vec<ChainRecord> {
    fn record(&mut self, record: &ChainRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

impl<F: FnMut(&ChainRecord) -> Result<()>> RecordSink for F {
    fn record(&mut self, record: &ChainRecord) -> Result<()> {
        self(record)
    }
}

/// Labels of the latent columns: trait names, `trait:class` for categorical slots.
pub fn column_labels(spec: &crate::traits::TraitSpec) -> Vec<String> {
    use crate::traits::TraitKind;
    let mut out = Vec::new();
    for t in spec.traits() {
        match &t.kind {
            TraitKind::Categorical { classes } => out.extend(classes[1..].iter().map(|c| format!("{}:{c}", t.name))),
            _ => out.push(t.name.clone()),
        }
    }
    out
}

/// Column names of a chain file, in record order.
pub fn chain_columns(model: &ProbitModel, with_latent: bool) -> Vec<String> {
    let q = model.q();
    let mut header: Vec<String> = ["iteration", "log_density", "accept_stat", "divergent", "seconds"].iter().map(|s| s.to_string()).collect();
    for i in 0..q {
        for j in (i + 1)..q {
            header.push(format!("R_{}_{}", i + 1, j + 1));
        }
    }
    for (j, &f) in model.free_scales().iter().enumerate() {
        if f {
            header.push(format!("D_{}", j + 1));
        }
    }
    if with_latent {
        for a in 0..model.n() {
            for b in 0..q {
                header.push(format!("X_{}_{}", a + 1, b + 1));
            }
        }
    }
    header
}

impl ChainRecord {
    /// Values in `chain_columns` order.
    pub fn values(&self) -> Vec<f64> {
        let mut row = vec![self.iteration as f64, self.log_density, self.accept_stat, f64::from(u8::from(self.divergent)), self.seconds];
        row.extend(&self.r_upper);
        row.extend(&self.d_free);
        if let Some(x) = &self.x {
            row.extend(x);
        }
        row
    }
}

/// Streams records as CSV with 17 significant digits.
pub struct ChainWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> ChainWriter<W> {
    pub fn new(writer: W, model: &ProbitModel, with_latent: bool) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(writer);
        inner.write_record(chain_columns(model, with_latent))?;
        Ok(Self { inner })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Formats a float so it parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() { format!("{v:.16e}") } else { v.to_string() }
}

impl<W: Write> RecordSink for ChainWriter<W> {
    fn record(&mut self, r: &ChainRecord) -> Result<()> {
        let mut row = vec![r.iteration.to_string(), fmt_f64(r.log_density), fmt_f64(r.accept_stat), u8::from(r.divergent).to_string(), fmt_f64(r.seconds)];
        row.extend(r.r_upper.iter().map(|&v| fmt_f64(v)));
        row.extend(r.d_free.iter().map(|&v| fmt_f64(v)));
        if let Some(x) = &r.x {
            row.extend(x.iter().map(|&v| fmt_f64(v)));
        }
        self.inner.write_record(&row)?;
        Ok(())
    }
}

/// End-of-chain bookkeeping.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub tuning: TuningReport,
    /// Seconds spent after burn-in.
    pub sampling_seconds: f64,
    pub total_seconds: f64,
    pub latent_updates: usize,
    pub covariance_updates: usize,
    pub final_theta: Vec<f64>,
    #[serde(skip)]
    pub final_x: Vec<f64>,
}

/// Seeded generator for chain `chain`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn initial_step_size(model: &ProbitModel, config: &ModelConfig, state: &SplitState, rng: &mut ChaCha8Rng) -> f64 {
    match config.sampler {
        SamplerKind::Alternate => {
            let sys = model.conditional_system(&state.x);
            let start = PhasePoint::new(state.theta.clone(), draw_gaussian(state.theta.len(), rng), &sys);
            find_reasonable_step_size(config.step_size, |eps| {
                let mut p = start.clone();
                p.leapfrog(eps, &sys);
                start.hamiltonian() - p.hamiltonian()
            })
        }
        _ => {
            let p_g = draw_gaussian(state.theta.len(), rng);
            let p_l = draw_laplace(model.constraint_map(), rng);
            let start = LgPoint::new(state.theta.clone(), p_g, state.x.clone(), p_l, model);
            find_reasonable_step_size(config.step_size, |eps| {
                let mut p = start.clone();
                match lg_step(&mut p, eps, state.step_ratio, model) {
                    Ok(()) => start.hamiltonian() - p.hamiltonian(),
                    Err(_) => f64::NEG_INFINITY,
                }
            })
        }
    }
}

/// Runs one chain, passing every retained draw to `sink`.
///
/// Burn-in comes first; step-size (and step-ratio) adaptation runs over its
/// first half and is frozen afterwards.
pub fn gibbs_driver<S: RecordSink + ?Sized>(model: &ProbitModel, config: &ModelConfig, chain: usize, sink: &mut S) -> Result<ChainSummary> {
    config.validate()?;
    let mut rng = chain_rng(config.seed, chain);
    let started = Instant::now();
    let x0 = model.initial_latent(&mut rng)?;
    let mut state = SplitState::new(model.initial_theta(), x0, config.step_size, config.step_ratio, config.lstep);
    let warmup = config.warmup();
    if config.adapt_step_size && warmup > 0 {
        state.step_size = initial_step_size(model, config, &state, &mut rng);
    }
    let mut dual = DualAveraging::new(state.step_size, config.target_accept);
    let mut ratio = StepRatioAdapter::new(state.step_ratio);
    let free: Vec<usize> = (0..model.constraint_map().dim()).filter(|&i| !model.constraint_map().is_fixed(i)).collect();
    let opts = config.nuts_options();
    let total = config.burnin + config.iterations * config.thin;
    let mut summary = ChainSummary { chain, ..Default::default() };
    let (mut divergences, mut consecutive) = (0usize, 0usize);
    let (mut depth_sum, mut accept_sum, mut kernel_count) = (0.0, 0.0, 0usize);
    let mut sampling_start = None;
    let mut since_record = 0.0;
    for it in 0..total {
        if it == config.burnin {
            sampling_start = Some(Instant::now());
            since_record = 0.0;
        }
        let t0 = Instant::now();
        let (accept_stat, divergent, depth, adapts) = match config.sampler {
            SamplerKind::LgNuts => {
                let o = lg_nuts_kernel(&mut state, model, &opts, &mut rng)?;
                summary.latent_updates += 1;
                summary.covariance_updates += 1;
                (o.accept_stat, o.divergent, o.depth, true)
            }
            SamplerKind::LgHmc => {
                let o = lg_hmc_kernel(&mut state, model, &mut rng)?;
                summary.latent_updates += 1;
                summary.covariance_updates += 1;
                (o.accept_stat, o.divergent, 0, true)
            }
            SamplerKind::Alternate => {
                if rng.random::<f64>() < config.scan_probability {
                    let target = model.latent_target(&state.theta)?;
                    let cmap = model.constraint_map();
                    let acc = match config.latent_kernel {
                        LatentKernel::Zigzag => {
                            let o = zigzag_hmc_kernel(&mut state.x, &target, cmap, config.latent_travel_time, &mut rng)?;
                            f64::from(u8::from(o.accepted))
                        }
                        LatentKernel::Bps => {
                            bps_kernel(&mut state.x, &target, cmap, config.latent_travel_time, config.refresh_rate, &mut rng)?;
                            1.0
                        }
                    };
                    summary.latent_updates += 1;
                    (acc, false, 0, false)
                } else {
                    let sys = model.conditional_system(&state.x);
                    let t = nuts_kernel(&state.theta, &sys, state.step_size, &opts, &mut rng)?;
                    state.theta = t.point.theta;
                    summary.covariance_updates += 1;
                    (t.accept_stat, t.divergent, t.depth, true)
                }
            }
        };
        since_record += t0.elapsed().as_secs_f64();
        if adapts {
            depth_sum += depth as f64;
            accept_sum += accept_stat;
            kernel_count += 1;
        }
        if divergent {
            divergences += 1;
            consecutive += 1;
            if consecutive > config.max_consecutive_divergences {
                return Err(Error::Divergence(format!("chain {chain}: {consecutive} consecutive divergent iterations at iteration {it}")));
            }
        } else {
            consecutive = 0;
        }
        if it < warmup {
            if config.adapt_step_size && adapts {
                dual.update(accept_stat);
                state.step_size = dual.step_size();
            }
            if config.adapt_step_ratio && config.sampler != SamplerKind::Alternate {
                let latent: Vec<f64> = free.iter().map(|&i| state.x[i]).collect();
                if let Some(rs) = ratio.observe(&state.theta, &latent) {
                    state.step_ratio = rs;
                    dual.restart(state.step_size);
                }
            }
        } else if it == warmup && config.adapt_step_size {
            state.step_size = dual.final_step_size();
        }
        if it >= config.burnin && (it - config.burnin) % config.thin == 0 {
            let p = model.params(&state.theta)?;
            let q = model.q();
            let mut r_upper = Vec::with_capacity(q * (q - 1) / 2);
            for i in 0..q {
                for j in (i + 1)..q {
                    r_upper.push(p.r()[(i, j)]);
                }
            }
            let d_free = p.d.iter().zip(&p.free).filter(|(_, &f)| f).map(|(&d, _)| d).collect();
            let record = ChainRecord {
                iteration: (it - config.burnin) / config.thin,
                log_density: model.log_posterior(&state.theta, &state.x),
                accept_stat,
                divergent,
                seconds: since_record,
                r_upper,
                d_free,
                x: config.record_latent.then(|| state.x.clone()),
            };
            sink.record(&record)?;
            since_record = 0.0;
        }
    }
    summary.tuning = TuningReport {
        step_size: state.step_size,
        step_ratio_history: ratio.history.clone(),
        divergences,
        mean_tree_depth: if kernel_count > 0 { depth_sum / kernel_count as f64 } else { 0.0 },
        mean_accept_stat: if kernel_count > 0 { accept_sum / kernel_count as f64 } else { 0.0 },
    };
    summary.sampling_seconds = sampling_start.map_or(0.0, |s| s.elapsed().as_secs_f64());
    summary.total_seconds = started.elapsed().as_secs_f64();
    summary.final_theta = state.theta;
    summary.final_x = state.x;
    Ok(summary)
}

/// Worker threads to use: the environment override, else the core count.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `config.chains` chains in parallel; results come back in chain order.
pub fn run_chains<S, F>(model: &ProbitModel, config: &ModelConfig, make_sink: F) -> Result<Vec<(S, ChainSummary)>>
where
    S: RecordSink + Send,
    F: Fn(usize) -> Result<S> + Sync,
{
    let chains = config.chains;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(S, ChainSummary)>>>> = Mutex::new((0..chains).map(|_| None).collect());
    let workers = thread_count().min(chains).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let c = next.fetch_add(1, Ordering::SeqCst);
                if c >= chains {
                    break;
                }
                let out = make_sink(c).and_then(|mut sink| {
                    let summary = gibbs_driver(model, config, c, &mut sink)?;
                    Ok((sink, summary))
                });
                results.lock().unwrap()[c] = Some(out);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every chain ran")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phylo::{simulate_traits, Phylogeny};
    use crate::traits::{TraitDef, TraitSpec};
    use nalgebra::DMatrix;

    fn small_model(config: &ModelConfig) -> ProbitModel {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tree = Phylogeny::random_coalescent(6, &mut rng).unwrap();
        let spec = TraitSpec::new(vec![TraitDef::continuous("c"), TraitDef::binary("b")]).unwrap();
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let (_, y) = simulate_traits(&tree, &sigma, &[0.0; 2], 10.0, &spec, &mut rng).unwrap();
        ProbitModel::new(&tree, &y, &spec, config).unwrap()
    }

    #[test]
    fn deterministic_replay() {
        for sampler in [SamplerKind::LgNuts, SamplerKind::LgHmc, SamplerKind::Alternate] {
            let config = ModelConfig { sampler, iterations: 20, burnin: 10, lstep: 5, seed: 4, ..Default::default() };
            let model = small_model(&config);
            let mut a = Vec::new();
            let mut b = Vec::new();
            gibbs_driver(&model, &config, 0, &mut a).unwrap();
            gibbs_driver(&model, &config, 0, &mut b).unwrap();
            let strip = |v: &Vec<ChainRecord>| v.iter().map(|r| (r.log_density, r.r_upper.clone(), r.d_free.clone())).collect::<Vec<_>>();
            assert_eq!(strip(&a), strip(&b));
            assert_eq!(a.len(), 20);
        }
    }

    #[test]
    fn alternate_scan_counts() {
        let config = ModelConfig { sampler: SamplerKind::Alternate, iterations: 400, burnin: 0, seed: 2, ..Default::default() };
        let model = small_model(&config);
        let mut sink = Vec::new();
        let s = gibbs_driver(&model, &config, 0, &mut sink).unwrap();
        assert_eq!(s.latent_updates + s.covariance_updates, 400);
        // 200 +- 4 binomial standard errors
        assert!((s.latent_updates as f64 - 200.0).abs() < 40.0, "{}", s.latent_updates);
    }

    #[test]
    fn chains_come_back_in_order() {
        let config = ModelConfig { chains: 3, iterations: 5, burnin: 4, seed: 9, ..Default::default() };
        let model = small_model(&config);
        let out = run_chains(&model, &config, |_| Ok(Vec::new())).unwrap();
        assert_eq!(out.len(), 3);
        for (i, (records, summary)) in out.iter().enumerate() {
            assert_eq!(summary.chain, i);
            assert_eq!(records.len(), 5);
        }
    }

    #[test]
    fn labels_expand_categorical_slots() {
        let spec = TraitSpec::new(vec![TraitDef::continuous("c"), TraitDef::categorical("k", ["a", "b", "c"])]).unwrap();
        assert_eq!(column_labels(&spec), vec!["c", "k:b", "k:c"]);
    }
}
