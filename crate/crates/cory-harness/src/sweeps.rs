//! Parameter sweeps over full runs: the eta (KL coefficient) frontier sweep
//! and the learning-rate robustness grid. Cells execute in parallel; a
//! diverged cell is flagged in the table, never a crash.

use std::path::Path;

use serde::Serialize;

use cory_core::par::par_map_indexed;

use crate::config::{Method, RunConfig};
use crate::error::HarnessError;
use crate::runner::{run, RunReport};

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub method: Method,
    pub value: f64,
    pub seed: u64,
    /// Seed-level finals: mean over the run's agents of the last-10 means.
    pub task_reward: Option<f64>,
    pub sentence_kl: Option<f64>,
    pub neg_kl: Option<f64>,
    pub pass_at_1: Option<f64>,
    pub diverged: bool,
    pub run_dir: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    /// Which config key the sweep varies ("kl_coeff" or "learning_rate").
    pub parameter: String,
    pub cells: Vec<SweepCell>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub method: Method,
    pub value: f64,
    pub seeds: usize,
    pub diverged: usize,
    pub task_reward: f64,
    pub sentence_kl: f64,
    pub neg_kl: f64,
}

fn agent_mean(
    report: &RunReport,
    f: impl Fn(&crate::runner::AgentReport) -> Option<f64>,
) -> Option<f64> {
    let vals: Vec<f64> = report.agents.iter().filter_map(&f).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn cell_from_report(method: Method, value: f64, seed: u64, report: &RunReport) -> SweepCell {
    let task_reward = agent_mean(report, |a| a.final_task_reward);
    let sentence_kl = agent_mean(report, |a| a.final_sentence_kl);
    SweepCell {
        method,
        value,
        seed,
        task_reward,
        sentence_kl,
        neg_kl: sentence_kl.map(|k| -k),
        pass_at_1: agent_mean(report, |a| a.pass_at_1),
        diverged: report.diverged,
        run_dir: report.out_dir.clone(),
    }
}

fn sweep(
    bases: &[RunConfig],
    parameter: &str,
    values: &[f64],
    seeds: &[u64],
    out_root: &Path,
) -> Result<SweepTable, HarnessError> {
    assert!(!values.is_empty(), "sweep needs at least one value");
    assert!(!bases.is_empty(), "sweep needs at least one base config");
    let mut grid = Vec::new();
    for base in bases {
        for &value in values {
            for &seed in seeds {
                grid.push((base, value, seed));
            }
        }
    }
    let results: Vec<Result<SweepCell, HarnessError>> = par_map_indexed(grid.len(), |i| {
        let (base, value, seed) = grid[i];
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.set(parameter, &value.to_string())?;
        cfg.out_dir = out_root.display().to_string();
        cfg.run_name = format!("{}-{parameter}{value}-s{seed}", cfg.method);
        let report = run(&cfg)?;
        Ok(cell_from_report(cfg.method, value, seed, &report))
    });
    let cells = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(SweepTable {
        parameter: parameter.to_string(),
        cells,
    })
}

/// Runs every (base config, eta, seed) cell to its full iteration budget and
/// records the final (task reward, -KL) trade-off points. Each base carries
/// its own method (and any per-method hyperparameters).
pub fn frontier_sweep(
    bases: &[RunConfig],
    etas: &[f64],
    seeds: &[u64],
    out_root: &Path,
) -> Result<SweepTable, HarnessError> {
    sweep(bases, "kl_coeff", etas, seeds, out_root)
}

/// Fig. 2c-style default eta grid.
pub const DEFAULT_ETAS: [f64; 4] = [1e-5, 1e-4, 1e-3, 1e-2];

/// Learning-rate robustness grid.
pub fn lr_sweep(
    bases: &[RunConfig],
    lrs: &[f64],
    seeds: &[u64],
    out_root: &Path,
) -> Result<SweepTable, HarnessError> {
    sweep(bases, "learning_rate", lrs, seeds, out_root)
}

impl SweepTable {
    /// Seed-averaged rows per (method, value), in sweep order. Cells that
    /// produced no finals (diverged before the first iteration) are skipped
    /// in the means but counted in `diverged`.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut keys: Vec<(Method, f64)> = Vec::new();
        for c in &self.cells {
            if !keys.iter().any(|(m, v)| *m == c.method && *v == c.value) {
                keys.push((c.method, c.value));
            }
        }
        keys.into_iter()
            .map(|(method, value)| {
                let cells: Vec<&SweepCell> = self
                    .cells
                    .iter()
                    .filter(|c| c.method == method && c.value == value)
                    .collect();
                let vals = |f: &dyn Fn(&SweepCell) -> Option<f64>| -> Vec<f64> {
                    cells.iter().filter_map(|c| f(c)).collect()
                };
                let mean = |xs: &[f64]| {
                    if xs.is_empty() {
                        f64::NAN
                    } else {
                        xs.iter().sum::<f64>() / xs.len() as f64
                    }
                };
                let rw = vals(&|c| c.task_reward);
                let kl = vals(&|c| c.sentence_kl);
                AggregateRow {
                    method,
                    value,
                    seeds: cells.len(),
                    diverged: cells.iter().filter(|c| c.diverged).count(),
                    task_reward: mean(&rw),
                    sentence_kl: mean(&kl),
                    neg_kl: -mean(&kl),
                }
            })
            .collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut out = String::new();
        out.push_str(&format!(
            "method\t{}\tseed\ttask_reward\tsentence_kl\tneg_kl\tpass_at_1\tdiverged\trun_dir\n",
            self.parameter
        ));
        let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
        for c in &self.cells {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                c.method,
                c.value,
                c.seed,
                fmt(c.task_reward),
                fmt(c.sentence_kl),
                fmt(c.neg_kl),
                fmt(c.pass_at_1),
                u8::from(c.diverged),
                c.run_dir,
            ));
        }
        out.push('\n');
        out.push_str(&format!(
            "# aggregate (seed means)\nmethod\t{}\tseeds\tdiverged\ttask_reward\tsentence_kl\tneg_kl\n",
            self.parameter
        ));
        for a in self.aggregate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                a.method, a.value, a.seeds, a.diverged, a.task_reward, a.sentence_kl, a.neg_kl
            ));
        }
        std::fs::write(path, out).map_err(HarnessError::io(path.display().to_string()))
    }
}
