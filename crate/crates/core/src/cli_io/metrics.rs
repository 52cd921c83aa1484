//! Per-step metric stream and the summary tables built from finished runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analytic::{product_oracle_moments, GmmExpert};
use crate::error::Result;
use crate::lattice::LatticeField;
use crate::svgd::{mean_field, mean_pairwise_distance, StepRecord};

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<usize>,
    pub t: usize,
    pub tau: f64,
    pub bandwidth: f64,
    pub mean_log_density: Option<f64>,
    pub mean_pairwise_distance: f64,
}

impl MetricRecord {
    pub fn from_step(segment: Option<usize>, r: &StepRecord) -> Self {
        Self {
            segment,
            t: r.t,
            tau: r.tau,
            bandwidth: r.bandwidth,
            mean_log_density: r.mean_log_density,
            mean_pairwise_distance: r.mean_pairwise_distance,
        }
    }
}

/// Line-delimited JSON, flushed after every record.
pub struct MetricsStream {
    out: BufWriter<File>,
}

impl MetricsStream {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn push(&mut self, rec: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Sample moments of an ensemble: grand mean and per-element unbiased variance
/// averaged over elements.
pub fn ensemble_moments(particles: &[LatticeField]) -> (f64, f64) {
    let m = mean_field(particles);
    let l = particles.len();
    let mean = m.mean();
    if l < 2 {
        return (mean, 0.0);
    }
    let d = m.len() as f64;
    let ss: f64 = particles.iter().map(|p| p.sq_dist(&m)).sum();
    (mean, ss / ((l - 1) as f64 * d))
}

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub command: String,
    pub seed: u64,
    pub particles: usize,
    pub repulsion: bool,
    pub projection: bool,
    pub recon: bool,
    pub sample_mean: f64,
    pub sample_var: f64,
    pub oracle_mean: Option<f64>,
    pub oracle_var: Option<f64>,
    pub mean_pairwise_distance: f64,
    pub overlap_error_max: Option<f64>,
    pub initial_log_density: Option<f64>,
    pub final_log_density: Option<f64>,
}

/// Oracle moments when every expert is an unmasked single Gaussian.
pub fn oracle_moments(experts: &[GmmExpert]) -> Option<(f64, f64)> {
    let refs: Vec<&GmmExpert> = experts.iter().collect();
    let o = product_oracle_moments(&refs).ok()?;
    Some((o.mean.mean(), o.var))
}

pub fn summary_row(
    run: &str,
    command: &str,
    cfg: &crate::cli_io::RunConfig,
    particles: &[LatticeField],
    records: &[MetricRecord],
    overlap_errors: &[f64],
) -> SummaryRow {
    let (sample_mean, sample_var) = ensemble_moments(particles);
    let oracle = if cfg.context.is_none() && cfg.masks.fg == crate::cli_io::config::MaskSpec::Ones {
        cfg.inline_experts().and_then(|e| oracle_moments(&e))
    } else {
        None
    };
    let dens: Vec<Option<f64>> = records.iter().map(|r| r.mean_log_density).collect();
    SummaryRow {
        run: run.to_string(),
        command: command.to_string(),
        seed: cfg.seed,
        particles: particles.len(),
        repulsion: cfg.svgd.repulsion,
        projection: cfg.projection,
        recon: cfg.recon.is_some(),
        sample_mean,
        sample_var,
        oracle_mean: oracle.map(|o| o.0),
        oracle_var: oracle.map(|o| o.1),
        mean_pairwise_distance: mean_pairwise_distance(particles),
        overlap_error_max: overlap_errors.iter().copied().reduce(f64::max),
        initial_log_density: dens.first().copied().flatten(),
        final_log_density: dens.last().copied().flatten(),
    }
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn write_trajectory_csv(path: &Path, records: &[MetricRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["segment", "t", "tau", "mean_log_density", "mean_pairwise_distance", "bandwidth"])
        .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.segment.map(|s| s.to_string()).unwrap_or_default(),
            r.t.to_string(),
            r.tau.to_string(),
            r.mean_log_density.map(|d| d.to_string()).unwrap_or_default(),
            r.mean_pairwise_distance.to_string(),
            r.bandwidth.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    std::io::Error::other(e.to_string()).into()
}
