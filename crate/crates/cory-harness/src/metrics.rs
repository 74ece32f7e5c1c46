//! Per-iteration metrics files: headered TSV, one row per iteration per
//! agent, schema versioned in the header. Rows contain only deterministic
//! quantities so that identical (config, seed) runs produce byte-identical
//! files; wall-clock timing lives in the run report instead.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::HarnessError;

pub const SCHEMA_VERSION: &str = "cory-metrics v1";
pub const COLUMNS: [&str; 13] = [
    "iteration",
    "agent",
    "task_reward",
    "sentence_kl",
    "combined",
    "clip_fraction",
    "grad_norm",
    "mean_ratio",
    "policy_loss",
    "value_loss",
    "post_kl",
    "exchanged",
    "truncations",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub agent: usize,
    pub task_reward: f64,
    pub sentence_kl: f64,
    pub combined: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub mean_ratio: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub post_kl: f64,
    pub exchanged: bool,
    pub truncations: usize,
}

impl MetricsRow {
    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.iteration,
            self.agent,
            self.task_reward,
            self.sentence_kl,
            self.combined,
            self.clip_fraction,
            self.grad_norm,
            self.mean_ratio,
            self.policy_loss,
            self.value_loss,
            self.post_kl,
            u8::from(self.exchanged),
            self.truncations,
        )
    }

    fn from_line(line: &str, lineno: usize) -> Result<Self, HarnessError> {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != COLUMNS.len() {
            return Err(HarnessError::SchemaMismatch(format!(
                "line {lineno}: {} fields, expected {}",
                parts.len(),
                COLUMNS.len()
            )));
        }
        let f = |i: usize| -> Result<f64, HarnessError> {
            parts[i].parse().map_err(|_| {
                HarnessError::SchemaMismatch(format!("line {lineno}: bad float {:?}", parts[i]))
            })
        };
        let u = |i: usize| -> Result<usize, HarnessError> {
            parts[i].parse().map_err(|_| {
                HarnessError::SchemaMismatch(format!("line {lineno}: bad count {:?}", parts[i]))
            })
        };
        Ok(Self {
            iteration: u(0)?,
            agent: u(1)?,
            task_reward: f(2)?,
            sentence_kl: f(3)?,
            combined: f(4)?,
            clip_fraction: f(5)?,
            grad_norm: f(6)?,
            mean_ratio: f(7)?,
            policy_loss: f(8)?,
            value_loss: f(9)?,
            post_kl: f(10)?,
            exchanged: parts[11] == "1",
            truncations: u(12)?,
        })
    }

    /// Numeric view used by the plot-data aggregation, in column order
    /// starting at `task_reward`.
    pub fn numeric_fields(&self) -> Vec<f64> {
        vec![
            self.task_reward,
            self.sentence_kl,
            self.combined,
            self.clip_fraction,
            self.grad_norm,
            self.mean_ratio,
            self.policy_loss,
            self.value_loss,
            self.post_kl,
        ]
    }

    pub fn numeric_names() -> &'static [&'static str] {
        &COLUMNS[2..11]
    }
}

/// Streaming writer; the header carries the schema version and a free-form
/// run label.
pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: String,
}

impl MetricsWriter {
    pub fn create(path: &Path, label: &str) -> Result<Self, HarnessError> {
        let file =
            std::fs::File::create(path).map_err(HarnessError::io(path.display().to_string()))?;
        let mut w = Self {
            file: std::io::BufWriter::new(file),
            path: path.display().to_string(),
        };
        w.line(&format!("# {SCHEMA_VERSION}"))?;
        w.line(&format!("# run {label}"))?;
        w.line(&COLUMNS.join("\t"))?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<(), HarnessError> {
        writeln!(self.file, "{s}").map_err(HarnessError::io(self.path.clone()))
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<(), HarnessError> {
        self.line(&row.to_line())
    }

    pub fn finish(mut self) -> Result<(), HarnessError> {
        self.file
            .flush()
            .map_err(HarnessError::io(self.path.clone()))
    }
}

/// A parsed metrics file.
#[derive(Debug, Clone)]
pub struct MetricsFile {
    pub label: String,
    pub rows: Vec<MetricsRow>,
}

impl MetricsFile {
    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let file =
            std::fs::File::open(path).map_err(HarnessError::io(path.display().to_string()))?;
        let mut label = String::new();
        let mut rows = Vec::new();
        let mut saw_version = false;
        let mut saw_columns = false;
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(HarnessError::io(path.display().to_string()))?;
            let lineno = idx + 1;
            if let Some(rest) = line.strip_prefix("# ") {
                if rest == SCHEMA_VERSION {
                    saw_version = true;
                } else if let Some(l) = rest.strip_prefix("run ") {
                    label = l.to_string();
                }
                continue;
            }
            if !saw_columns {
                if line != COLUMNS.join("\t") {
                    return Err(HarnessError::SchemaMismatch(format!(
                        "{}: unexpected column header",
                        path.display()
                    )));
                }
                saw_columns = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            rows.push(MetricsRow::from_line(&line, lineno)?);
        }
        if !saw_version || !saw_columns {
            return Err(HarnessError::SchemaMismatch(format!(
                "{}: missing schema header",
                path.display()
            )));
        }
        Ok(Self { label, rows })
    }

    pub fn agent_rows(&self, agent: usize) -> Vec<&MetricsRow> {
        self.rows.iter().filter(|r| r.agent == agent).collect()
    }
}

/// The data lines (header stripped) for the given agent, used by
/// byte-for-byte comparisons between runs.
pub fn agent_data_lines(path: &Path, agent: usize) -> Result<Vec<String>, HarnessError> {
    let f = MetricsFile::read(path)?;
    Ok(f.rows
        .iter()
        .filter(|r| r.agent == agent)
        .map(|r| r.to_line())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(it: usize, agent: usize, x: f64) -> MetricsRow {
        MetricsRow {
            iteration: it,
            agent,
            task_reward: x,
            sentence_kl: x * 2.0,
            combined: x - 0.1,
            clip_fraction: 0.25,
            grad_norm: 1.5,
            mean_ratio: 1.0,
            policy_loss: -0.5,
            value_loss: 0.125,
            post_kl: x / 3.0,
            exchanged: it % 5 == 4,
            truncations: it,
        }
    }

    #[test]
    fn write_read_round_trip() {
        let dir = std::env::temp_dir().join("cory_metrics_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.tsv");
        let rows: Vec<MetricsRow> = (0..6)
            .flat_map(|i| [row(i, 1, i as f64 * 0.3), row(i, 2, i as f64 * 0.7)])
            .collect();
        let mut w = MetricsWriter::create(&path, "test-run").unwrap();
        for r in &rows {
            w.write_row(r).unwrap();
        }
        w.finish().unwrap();
        let file = MetricsFile::read(&path).unwrap();
        assert_eq!(file.label, "test-run");
        assert_eq!(file.rows, rows);
        assert_eq!(file.agent_rows(1).len(), 6);
        assert_eq!(file.agent_rows(2).len(), 6);
    }

    #[test]
    fn schema_violations_are_rejected() {
        let dir = std::env::temp_dir().join("cory_metrics_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.tsv");
        std::fs::write(&path, "iteration\tagent\nnot-a-header\n").unwrap();
        assert!(matches!(
            MetricsFile::read(&path),
            Err(HarnessError::SchemaMismatch(_))
        ));
    }
}
