//! Multi-chain summaries of sampler output.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use super::{ess_chains, partial_correlation, quantile, rhat};
use crate::error::{Error, Result};
use crate::posterior::driver::{fmt_f64, ChainRecord};

/// One chain file held in memory, column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTable {
    pub columns: Vec<String>,
    /// `values[c][t]` is column `c` at draw `t`.
    pub values: Vec<Vec<f64>>,
}

impl ChainTable {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut values = vec![Vec::new(); columns.len()];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != columns.len() {
                return Err(Error::Data(format!("row {} has {} fields, header has {}", row + 1, rec.len(), columns.len())));
            }
            for (c, field) in rec.iter().enumerate() {
                let v = field.trim().parse::<f64>().map_err(|_| Error::Data(format!("row {}, column {}: cannot parse {field:?}", row + 1, columns[c])))?;
                values[c].push(v);
            }
        }
        Ok(Self { columns, values })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    /// Builds a table from in-memory records laid out as `columns`.
    pub fn from_records(columns: Vec<String>, records: &[ChainRecord]) -> Result<Self> {
        let mut values = vec![Vec::with_capacity(records.len()); columns.len()];
        for r in records {
            let row = r.values();
            if row.len() != columns.len() {
                return Err(Error::Data(format!("record has {} values, schema has {} columns", row.len(), columns.len())));
            }
            for (c, v) in row.into_iter().enumerate() {
                values[c].push(v);
            }
        }
        Ok(Self { columns, values })
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().position(|c| c == name).map(|i| self.values[i].as_slice())
    }

    /// Number of latent columns implied by the `R_i_j` headers.
    pub fn correlation_dim(&self) -> usize {
        self.columns.iter().filter_map(|c| parse_pair(c, "R_")).map(|(_, j)| j).max().unwrap_or(1)
    }

    /// Correlation matrix at draw `t`.
    pub fn correlation(&self, t: usize) -> DMatrix<f64> {
        let q = self.correlation_dim();
        let mut r = DMatrix::identity(q, q);
        for (c, name) in self.columns.iter().enumerate() {
            if let Some((i, j)) = parse_pair(name, "R_") {
                r[(i - 1, j - 1)] = self.values[c][t];
                r[(j - 1, i - 1)] = self.values[c][t];
            }
        }
        r
    }
}

fn parse_pair(name: &str, prefix: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix(prefix)?;
    let (a, b) = rest.split_once('_')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

/// Knobs for `summarize`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryOptions {
    /// Central credible-interval mass.
    pub level: f64,
    /// Flag partial correlations whose median exceeds this in magnitude.
    pub highlight: Option<f64>,
    /// Summarize `X_a_b` columns too.
    pub include_latent: bool,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        Self { level: 0.95, highlight: None, include_latent: false }
    }
}

/// Posterior summary of one scalar quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub ess: f64,
    /// Absent with a single chain.
    pub rhat: Option<f64>,
    pub zero_variance: bool,
    pub highlighted: bool,
}

/// Everything `summarize` reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryReport {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub credible_level: f64,
    pub parameters: Vec<ParameterSummary>,
    pub partial_correlations: Vec<ParameterSummary>,
    /// Kernel seconds summed over all chains.
    pub runtime_seconds: f64,
    pub min_ess: f64,
    pub min_partial_correlation_ess: f64,
    pub max_partial_correlation_rhat: Option<f64>,
    /// Minimum partial-correlation ESS per kernel second.
    pub ess_per_second: f64,
    pub divergences: usize,
    pub highlighted: Vec<String>,
}

fn summarize_series(name: &str, chains: &[&[f64]], level: f64) -> Result<ParameterSummary> {
    let mut all: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    all.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let e = ess_chains(chains)?;
    let r = if chains.len() >= 2 { Some(rhat(chains)?) } else { None };
    Ok(ParameterSummary {
        name: name.to_string(),
        mean,
        sd,
        median: quantile(&all, 0.5),
        lower: quantile(&all, tail),
        upper: quantile(&all, 1.0 - tail),
        ess: e.ess,
        rhat: r,
        zero_variance: e.zero_variance,
        highlighted: false,
    })
}

/// Per-draw partial correlations, `out[k][t]` for the `k`-th upper-triangle pair.
pub fn partial_correlation_draws(table: &ChainTable) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let q = table.correlation_dim();
    let names: Vec<String> = (0..q).flat_map(|i| ((i + 1)..q).map(move |j| format!("P_{}_{}", i + 1, j + 1))).collect();
    let mut out = vec![Vec::with_capacity(table.len()); names.len()];
    for t in 0..table.len() {
        let p = partial_correlation(&table.correlation(t))?;
        let mut k = 0;
        for i in 0..q {
            for j in (i + 1)..q {
                out[k].push(p[(i, j)]);
                k += 1;
            }
        }
    }
    Ok((names, out))
}

/// Summarizes chains that share one column schema.
///
/// Partial correlations come from `R` alone since they do not depend on the
/// scales.
pub fn summarize(tables: &[ChainTable], opts: &SummaryOptions) -> Result<SummaryReport> {
    let first = tables.first().ok_or_else(|| Error::Data("no chains to summarize".into()))?;
    if let Some(t) = tables.iter().find(|t| t.columns != first.columns) {
        return Err(Error::Data(format!("chain column schemas differ: {:?} vs {:?}", first.columns.len(), t.columns.len())));
    }
    let n = first.len();
    if tables.iter().any(|t| t.len() != n) {
        return Err(Error::Data("chains have different numbers of draws".into()));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::InvalidArgument(format!("credible level must lie in (0, 1), got {}", opts.level)));
    }
    let mut parameters = Vec::new();
    for (c, name) in first.columns.iter().enumerate() {
        let keep = name == "log_density" || name.starts_with("R_") || name.starts_with("D_") || (opts.include_latent && name.starts_with("X_"));
        if !keep {
            continue;
        }
        let chains: Vec<&[f64]> = tables.iter().map(|t| t.values[c].as_slice()).collect();
        parameters.push(summarize_series(name, &chains, opts.level)?);
    }
    let pcs: Vec<(Vec<String>, Vec<Vec<f64>>)> = tables.iter().map(partial_correlation_draws).collect::<Result<_>>()?;
    let mut partial_correlations = Vec::new();
    let mut highlighted = Vec::new();
    for (k, name) in pcs[0].0.iter().enumerate() {
        let chains: Vec<&[f64]> = pcs.iter().map(|(_, d)| d[k].as_slice()).collect();
        let mut s = summarize_series(name, &chains, opts.level)?;
        if let Some(h) = opts.highlight {
            s.highlighted = s.median.abs() > h;
            if s.highlighted {
                highlighted.push(name.clone());
            }
        }
        partial_correlations.push(s);
    }
    let runtime_seconds: f64 = tables.iter().filter_map(|t| t.column("seconds")).map(|c| c.iter().sum::<f64>()).sum();
    let divergences = tables.iter().filter_map(|t| t.column("divergent")).map(|c| c.iter().filter(|&&v| v != 0.0).count()).sum();
    let min_of = |v: &[ParameterSummary]| v.iter().filter(|p| !p.zero_variance).map(|p| p.ess).fold(f64::INFINITY, f64::min);
    let min_pc = min_of(&partial_correlations);
    let max_rhat = partial_correlations.iter().filter_map(|p| p.rhat).fold(None, |a: Option<f64>, r| Some(a.map_or(r, |a| a.max(r))));
    Ok(SummaryReport {
        chains: tables.len(),
        draws_per_chain: n,
        credible_level: opts.level,
        min_ess: min_of(&parameters).min(min_pc),
        min_partial_correlation_ess: min_pc,
        max_partial_correlation_rhat: max_rhat,
        ess_per_second: if runtime_seconds > 0.0 { min_pc / runtime_seconds } else { f64::NAN },
        parameters,
        partial_correlations,
        runtime_seconds,
        divergences,
        highlighted,
    })
}

/// Long-format trace: `chain, iteration, log_density, P_i_j...`.
pub fn write_trace_csv<W: Write>(tables: &[ChainTable], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = tables.first() else {
        return Ok(());
    };
    let (names, _) = partial_correlation_draws(&ChainTable { columns: first.columns.clone(), values: vec![Vec::new(); first.columns.len()] })?;
    let mut header = vec!["chain".to_string(), "iteration".to_string(), "log_density".to_string()];
    header.extend(names);
    w.write_record(&header)?;
    for (c, table) in tables.iter().enumerate() {
        let (_, pcs) = partial_correlation_draws(table)?;
        let iters = table.column("iteration");
        let logd = table.column("log_density");
        for t in 0..table.len() {
            let mut row = vec![c.to_string(), iters.map_or(t.to_string(), |v| (v[t] as usize).to_string()), logd.map_or(String::new(), |v| fmt_f64(v[t]))];
            row.extend(pcs.iter().map(|p| fmt_f64(p[t])));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Heat-map cells for the partial-correlation matrix, both triangles and the unit diagonal.
pub fn write_heatmap_csv<W: Write>(report: &SummaryReport, q: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "median", "lower", "upper", "highlighted"])?;
    let lookup = |i: usize, j: usize| {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        report.partial_correlations.iter().find(|p| p.name == format!("P_{}_{}", a + 1, b + 1))
    };
    for i in 0..q {
        for j in 0..q {
            let row = if i == j {
                vec![(i + 1).to_string(), (j + 1).to_string(), fmt_f64(1.0), fmt_f64(1.0), fmt_f64(1.0), "0".into()]
            } else {
                let p = lookup(i, j).ok_or_else(|| Error::Data(format!("missing partial correlation {} {}", i + 1, j + 1)))?;
                vec![(i + 1).to_string(), (j + 1).to_string(), fmt_f64(p.median), fmt_f64(p.lower), fmt_f64(p.upper), u8::from(p.highlighted).to_string()]
            };
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn table(seed: u64, n: usize) -> ChainTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let columns: Vec<String> = ["iteration", "log_density", "accept_stat", "divergent", "seconds", "R_1_2", "R_1_3", "R_2_3", "D_1"].iter().map(|s| s.to_string()).collect();
        let mut values = vec![Vec::new(); columns.len()];
        for t in 0..n {
            let row = [t as f64, -10.0 + noise.sample(&mut rng), 0.9, 0.0, 0.001, 0.5 + noise.sample(&mut rng), 0.3 + noise.sample(&mut rng), 0.1 + noise.sample(&mut rng), 1.2 + noise.sample(&mut rng)];
            for (c, v) in row.iter().enumerate() {
                values[c].push(*v);
            }
        }
        ChainTable { columns, values }
    }

    #[test]
    fn reads_csv_and_rebuilds_r() {
        let text = "iteration,log_density,R_1_2\n0,-1.5,0.25\n1,-1.25,0.5\n";
        let t = ChainTable::from_reader(text.as_bytes()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.correlation_dim(), 2);
        assert_eq!(t.correlation(1)[(1, 0)], 0.5);
        assert!(ChainTable::from_reader("a,b\n1,x\n".as_bytes()).is_err());
    }

    #[test]
    fn summary_fields_consistent() {
        let tables: Vec<ChainTable> = (0..3).map(|s| table(s, 1000)).collect();
        let report = summarize(&tables, &SummaryOptions { level: 0.9, highlight: Some(0.2), include_latent: false }).unwrap();
        assert_eq!(report.chains, 3);
        assert_eq!(report.partial_correlations.len(), 3);
        assert_eq!(report.parameters.len(), 5);
        for p in report.parameters.iter().chain(&report.partial_correlations) {
            assert!(p.lower <= p.median && p.median <= p.upper);
            assert!(p.rhat.unwrap() > 1.0 - 1e-3);
            assert!(p.ess <= 1.1 * 3000.0, "{} {}", p.name, p.ess);
        }
        assert!((report.runtime_seconds - 3.0).abs() < 1e-9);
        // R12 = 0.5 with the others small gives a clearly non-zero P_1_2.
        assert!(report.highlighted.contains(&"P_1_2".to_string()));
    }

    #[test]
    fn summary_is_deterministic() {
        let tables: Vec<ChainTable> = (0..2).map(|s| table(s + 10, 200)).collect();
        let a = summarize(&tables, &SummaryOptions::default()).unwrap();
        let b = summarize(&tables, &SummaryOptions::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn mismatched_schemas_rejected() {
        let a = table(1, 200);
        let mut b = table(2, 200);
        b.columns[5] = "R_2_1".into();
        assert!(matches!(summarize(&[a, b], &SummaryOptions::default()), Err(Error::Data(_))));
    }

    #[test]
    fn plot_csvs_have_expected_shape() {
        let tables: Vec<ChainTable> = (0..2).map(|s| table(s, 150)).collect();
        let mut trace = Vec::new();
        write_trace_csv(&tables, &mut trace).unwrap();
        let text = String::from_utf8(trace).unwrap();
        assert_eq!(text.lines().count(), 301);
        assert!(text.starts_with("chain,iteration,log_density,P_1_2,P_1_3,P_2_3"));
        let report = summarize(&tables, &SummaryOptions::default()).unwrap();
        let mut heat = Vec::new();
        write_heatmap_csv(&report, 3, &mut heat).unwrap();
        assert_eq!(String::from_utf8(heat).unwrap().lines().count(), 10);
    }
}
