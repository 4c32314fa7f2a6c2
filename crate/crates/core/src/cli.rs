//! Command-line front end: `sample`, `summarize` and `benchmark`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::benchmark::{recovery_config, run_orthant, run_recovery, OrthantOptions, OrthantSampler, SimulatedPhylo};
use crate::diagnostics::summary::{write_heatmap_csv, write_trace_csv};
use crate::diagnostics::{summarize, ChainTable, SummaryOptions};
use crate::error::{Error, Result};
use crate::phylo::parse_newick;
use crate::posterior::driver::{fmt_f64, ChainWriter, THREADS_ENV};
use crate::posterior::{run_chains, LatentKernel, ModelConfig, ProbitModel, SamplerKind};
use crate::traits::{ObservedTraits, TraitSpec};

#[derive(Debug, Parser)]
#[command(name = "phyloprobit", version, about = "Phylogenetic probit models: joint latent/covariance sampling and diagnostics")]
#[command(after_help = format!("Set {THREADS_ENV} to cap the number of worker threads."))]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the posterior for a tree, a trait table and a configuration.
    Sample(SampleArgs),
    /// Summarize chain files into a report and plot-ready tables.
    Summarize(SummarizeArgs),
    /// Run a built-in benchmark and write a CSV table.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Newick tree whose tip labels match the trait table.
    #[arg(long)]
    pub tree: PathBuf,
    /// Trait table: `taxon` column, then one column per trait, `NA` for missing.
    #[arg(long)]
    pub traits: PathBuf,
    /// Trait declarations (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Model and sampler settings (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if needed.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Flag partial correlations whose posterior median exceeds this in magnitude.
    #[arg(long)]
    pub highlight: Option<f64>,
    /// Credible-interval mass.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Chain CSV files sharing one column layout.
    #[arg(required = true)]
    pub chains: Vec<PathBuf>,
    /// Directory for summary.json, trace.csv and heatmap.csv; JSON goes to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summarize latent columns too.
    #[arg(long)]
    pub include_latent: bool,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    #[value(name = "orthant256", alias = "orthant-normal-256")]
    Orthant256,
    SimulatedPhylo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArm {
    Zigzag,
    Bps,
    LgHmc,
    LgNuts,
    AlternateGibbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Zigzag,
    Bps,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long, value_enum)]
    pub target: Target,
    #[arg(long, value_enum)]
    pub sampler: SamplerArm,
    /// Iterations (orthant) or post burn-in iterations per chain (simulated-phylo).
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Repeat with seeds `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    pub reps: u64,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Orthant dimension.
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub travel_time: f64,
    #[arg(long, default_value_t = 1.4)]
    pub refresh_rate: f64,
    /// One row per coordinate instead of one per run (orthant).
    #[arg(long)]
    pub per_coordinate: bool,
    /// Write every zigzag event as `seed,iteration,time,kind,dim` (orthant, zigzag).
    #[arg(long)]
    pub event_log: Option<PathBuf>,
    /// Number of taxa (simulated-phylo).
    #[arg(long, default_value_t = 100)]
    pub taxa: usize,
    #[arg(long, default_value_t = 3)]
    pub chains: usize,
    /// Latent kernel of `alternate-gibbs`.
    #[arg(long, value_enum, default_value_t = KernelArg::Zigzag)]
    pub latent_kernel: KernelArg,
    /// Base configuration for simulated-phylo runs (default: LKJ(2) prior,
    /// target acceptance 0.95, 1000 draws after 500 burn-in).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Credible-interval mass used for coverage (simulated-phylo).
    #[arg(long, default_value_t = 0.9)]
    pub level: f64,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            report_error("usage", e.kind().to_string(), 1);
            return 1;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            report_error(e.kind(), e.to_string(), code);
            code
        }
    }
}

fn report_error(kind: &str, message: String, exit_code: i32) {
    let json = serde_json::to_string(&ErrorReport { error: kind, message, exit_code }).expect("plain data serializes");
    eprintln!("{json}");
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sample(a) => sample(&a),
        Command::Summarize(a) => summarize_cmd(&a),
        Command::Benchmark(a) => benchmark(&a),
    }
}

fn read_config_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_data_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::from_json(&read_config_text(p)?),
        None => Ok(ModelConfig::default()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn sample(a: &SampleArgs) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(c) = a.chains {
        config.chains = c;
    }
    if let Some(i) = a.iterations {
        config.iterations = i;
    }
    if let Some(b) = a.burnin {
        config.burnin = b;
    }
    config.validate()?;
    let spec = TraitSpec::from_json(&read_config_text(&a.spec)?)?;
    let tree = parse_newick(&read_data_text(&a.tree)?)?;
    let data = ObservedTraits::read_csv(read_data_text(&a.traits)?.as_bytes(), &spec)?;
    let model = ProbitModel::new(&tree, &data, &spec, &config)?;
    create_dir(&a.out)?;
    let paths: Vec<PathBuf> = (0..config.chains).map(|c| a.out.join(format!("chain_{}.csv", c + 1))).collect();
    let results = run_chains(&model, &config, |c| ChainWriter::new(create(&paths[c])?, &model, config.record_latent))?;
    let mut summaries = Vec::with_capacity(results.len());
    for (mut writer, summary) in results {
        writer.flush()?;
        summaries.push(summary);
    }
    let mut tuning = create(&a.out.join("tuning.json"))?;
    serde_json::to_writer_pretty(&mut tuning, &summaries)?;
    tuning.flush()?;
    let tables = paths.iter().map(|p| ChainTable::from_path(p)).collect::<Result<Vec<_>>>()?;
    let opts = SummaryOptions { level: a.report.level, highlight: a.report.highlight, include_latent: false };
    write_reports(&tables, &opts, &a.out)?;
    println!("wrote {} chain(s) and summaries to {}", config.chains, a.out.display());
    Ok(())
}

fn write_reports(tables: &[ChainTable], opts: &SummaryOptions, dir: &Path) -> Result<crate::diagnostics::SummaryReport> {
    let report = summarize(tables, opts)?;
    let mut w = create(&dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.flush()?;
    write_trace_csv(tables, create(&dir.join("trace.csv"))?)?;
    write_heatmap_csv(&report, tables[0].correlation_dim(), create(&dir.join("heatmap.csv"))?)?;
    Ok(report)
}

fn summarize_cmd(a: &SummarizeArgs) -> Result<()> {
    let tables = a.chains.iter().map(|p| ChainTable::from_path(p)).collect::<Result<Vec<_>>>()?;
    let opts = SummaryOptions { level: a.report.level, highlight: a.report.highlight, include_latent: a.include_latent };
    match &a.out {
        Some(dir) => {
            create_dir(dir)?;
            let report = write_reports(&tables, &opts, dir)?;
            println!(
                "{} chain(s) x {} draws: min ESS {:.1}, max partial-correlation R-hat {}",
                report.chains,
                report.draws_per_chain,
                report.min_ess,
                report.max_partial_correlation_rhat.map_or("n/a".to_string(), |r| format!("{r:.4}"))
            );
        }
        None => {
            let report = summarize(&tables, &opts)?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            serde_json::to_writer_pretty(&mut lock, &report)?;
            writeln!(lock)?;
        }
    }
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout()),
    })
}

fn benchmark(a: &BenchmarkArgs) -> Result<()> {
    if a.reps == 0 {
        return Err(Error::Config("--reps must be at least 1".into()));
    }
    match a.target {
        Target::Orthant256 => orthant_benchmark(a),
        Target::SimulatedPhylo => phylo_benchmark(a),
    }
}

fn orthant_benchmark(a: &BenchmarkArgs) -> Result<()> {
    let sampler = match a.sampler {
        SamplerArm::Zigzag => OrthantSampler::Zigzag,
        SamplerArm::Bps => OrthantSampler::Bps,
        other => return Err(Error::Config(format!("sampler {other:?} does not apply to the orthant target; use zigzag or bps"))),
    };
    if a.event_log.is_some() && sampler != OrthantSampler::Zigzag {
        return Err(Error::Config("--event-log needs --sampler zigzag".into()));
    }
    let mut events = match &a.event_log {
        Some(p) => {
            let mut w = csv::Writer::from_writer(create(p)?);
            w.write_record(["seed", "iteration", "time", "kind", "dim"])?;
            Some(w)
        }
        None => None,
    };
    let mut out = csv::Writer::from_writer(output(a.out.as_deref())?);
    if a.per_coordinate {
        out.write_record(["sampler", "seed", "coordinate", "mean", "variance", "ess"])?;
    }
    for seed in a.seed..a.seed + a.reps {
        let opts = OrthantOptions { dim: a.dim, iterations: a.iters.unwrap_or(2000), travel_time: a.travel_time, refresh_rate: a.refresh_rate, seed };
        let mut log_err = None;
        let mut cb = |it: usize, e: &crate::tmvn::EventRecord| {
            if let Some(w) = events.as_mut() {
                if let Err(err) = w.write_record([seed.to_string(), it.to_string(), fmt_f64(e.time), e.event.kind().to_string(), e.event.dim().to_string()]) {
                    log_err.get_or_insert(err);
                }
            }
        };
        let cb_ref: Option<&mut dyn FnMut(usize, &crate::tmvn::EventRecord)> = if a.event_log.is_some() { Some(&mut cb) } else { None };
        let run = run_orthant(sampler, &opts, cb_ref)?;
        if let Some(err) = log_err {
            return Err(err.into());
        }
        if a.per_coordinate {
            let m = run.coordinate_moments()?;
            for i in 0..m.mean.len() {
                out.write_record([sampler.name().to_string(), seed.to_string(), (i + 1).to_string(), fmt_f64(m.mean[i]), fmt_f64(m.variance[i]), fmt_f64(m.ess[i])])?;
            }
        } else {
            out.serialize(run.report()?)?;
        }
        log::info!("orthant {} seed {seed} done in {:.2}s", sampler.name(), run.seconds);
    }
    out.flush()?;
    if let Some(mut w) = events {
        w.flush()?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PhyloRow {
    target: &'static str,
    sampler: &'static str,
    seed: u64,
    taxa: usize,
    chains: usize,
    iterations: usize,
    min_partial_correlation_ess: f64,
    max_partial_correlation_rhat: f64,
    sampling_seconds: f64,
    min_ess_per_second: f64,
    covered: usize,
    entries: usize,
    divergences: usize,
}

fn phylo_benchmark(a: &BenchmarkArgs) -> Result<()> {
    if a.event_log.is_some() || a.per_coordinate {
        return Err(Error::Config("--event-log and --per-coordinate apply to the orthant target only".into()));
    }
    let mut config = match a.config.as_deref() {
        Some(p) => load_config(Some(p))?,
        None => recovery_config(),
    };
    let (kind, kernel, name) = match a.sampler {
        SamplerArm::LgNuts => (SamplerKind::LgNuts, config.latent_kernel, "lg-nuts"),
        SamplerArm::LgHmc => (SamplerKind::LgHmc, config.latent_kernel, "lg-hmc"),
        SamplerArm::Zigzag => (SamplerKind::Alternate, LatentKernel::Zigzag, "zigzag"),
        SamplerArm::Bps => (SamplerKind::Alternate, LatentKernel::Bps, "bps"),
        SamplerArm::AlternateGibbs => match a.latent_kernel {
            KernelArg::Zigzag => (SamplerKind::Alternate, LatentKernel::Zigzag, "alternate-gibbs"),
            KernelArg::Bps => (SamplerKind::Alternate, LatentKernel::Bps, "alternate-gibbs"),
        },
    };
    config.sampler = kind;
    config.latent_kernel = kernel;
    config.chains = a.chains;
    if let Some(i) = a.iters {
        config.iterations = i;
    }
    let mut out = csv::Writer::from_writer(output(a.out.as_deref())?);
    for seed in a.seed..a.seed + a.reps {
        config.seed = seed;
        config.validate()?;
        let sim = SimulatedPhylo::generate(a.taxa, seed, &config)?;
        let r = run_recovery(&sim, &config, a.level)?;
        out.serialize(PhyloRow {
            target: "simulated-phylo",
            sampler: name,
            seed,
            taxa: a.taxa,
            chains: config.chains,
            iterations: config.iterations,
            min_partial_correlation_ess: r.summary.min_partial_correlation_ess,
            max_partial_correlation_rhat: r.summary.max_partial_correlation_rhat.unwrap_or(f64::NAN),
            sampling_seconds: r.sampling_seconds,
            min_ess_per_second: r.min_ess_per_second,
            covered: r.covered,
            entries: r.entries,
            divergences: r.chains.iter().map(|c| c.tuning.divergences).sum(),
        })?;
        out.flush()?;
    }
    Ok(())
}
