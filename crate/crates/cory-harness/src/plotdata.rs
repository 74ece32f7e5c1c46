//! Aggregates several runs' metrics files into plot-ready tables: per
//! iteration, per agent, the mean and population standard deviation of each
//! numeric series across the input files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::HarnessError;
use crate::metrics::{MetricsFile, MetricsRow};

#[derive(Debug, Clone)]
pub struct PlotRow {
    pub iteration: usize,
    pub agent: usize,
    /// How many input files contributed to this (iteration, agent) cell.
    pub n: usize,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PlotTable {
    pub series: Vec<&'static str>,
    pub rows: Vec<PlotRow>,
}

/// Reads the given metrics files (same schema required) and aggregates them.
pub fn emit_plot_data(paths: &[std::path::PathBuf]) -> Result<PlotTable, HarnessError> {
    if paths.is_empty() {
        return Err(HarnessError::Config(
            "plot-data needs at least one metrics file".into(),
        ));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    for path in paths {
        // MetricsFile::read enforces the schema header; mixed schemas fail here
        let file = MetricsFile::read(path)?;
        for row in &file.rows {
            groups
                .entry((row.iteration, row.agent))
                .or_default()
                .push(row.numeric_fields());
        }
    }
    let series = MetricsRow::numeric_names().to_vec();
    let width = series.len();
    let rows = groups
        .into_iter()
        .map(|((iteration, agent), samples)| {
            let n = samples.len();
            let mut means = vec![0.0; width];
            let mut stds = vec![0.0; width];
            for j in 0..width {
                let vals: Vec<f64> = samples.iter().map(|s| s[j]).collect();
                let m = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                means[j] = m;
                stds[j] = var.sqrt();
            }
            PlotRow {
                iteration,
                agent,
                n,
                means,
                stds,
            }
        })
        .collect();
    Ok(PlotTable { series, rows })
}

impl PlotTable {
    pub fn write_tsv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut out = String::from("iteration\tagent\tn");
        for s in &self.series {
            out.push_str(&format!("\t{s}_mean\t{s}_std"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}", r.iteration, r.agent, r.n));
            for j in 0..self.series.len() {
                out.push_str(&format!("\t{}\t{}", r.means[j], r.stds[j]));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(HarnessError::io(path.display().to_string()))
    }
}
