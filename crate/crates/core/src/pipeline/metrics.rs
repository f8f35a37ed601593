use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};

/// One logged row; `values` follow the log's column order, NaN when absent.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub values: Vec<f64>,
    pub wall_time: f64,
}

/// Append-only CSV log with strictly increasing steps.
#[derive(Debug)]
pub struct MetricsLog {
    columns: Vec<String>,
    rows: Vec<MetricsRow>,
    file: Option<File>,
    path: Option<PathBuf>,
    start: Instant,
}

impl MetricsLog {
    /// Log kept in memory only.
    pub fn in_memory(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            file: None,
            path: None,
            start: Instant::now(),
        }
    }

    /// Truncates `path` and writes the header.
    pub fn create(path: impl AsRef<Path>, columns: &[&str]) -> Result<Self> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        writeln!(file, "step,{},wall_time", columns.join(","))?;
        let mut log = Self::in_memory(columns);
        log.file = Some(file);
        log.path = Some(path.to_path_buf());
        Ok(log)
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn last_step(&self) -> Option<u64> {
        self.rows.last().map(|r| r.step)
    }

    pub fn append(&mut self, step: u64, values: &[(&str, f64)]) -> Result<()> {
        if let Some(last) = self.last_step() {
            if step <= last {
                return Err(Error::invalid(format!(
                    "metrics step {step} does not follow {last}"
                )));
            }
        }
        let mut row = vec![f64::NAN; self.columns.len()];
        for (name, v) in values {
            let i = self
                .columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::invalid(format!("unknown metrics column `{name}`")))?;
            row[i] = *v;
        }
        let wall_time = self.start.elapsed().as_secs_f64();
        if let Some(f) = &mut self.file {
            let cells: Vec<String> = row
                .iter()
                .map(|v| if v.is_nan() { String::new() } else { format!("{v}") })
                .collect();
            writeln!(f, "{step},{},{wall_time:.3}", cells.join(","))?;
        }
        self.rows.push(MetricsRow {
            step,
            values: row,
            wall_time,
        });
        Ok(())
    }

    /// Last logged value of a column, skipping rows where it is absent.
    pub fn last_value(&self, column: &str) -> Option<f64> {
        let i = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().rev().map(|r| r.values[i]).find(|v| !v.is_nan())
    }

    /// `(step, value)` pairs of one column.
    pub fn series(&self, column: &str) -> Vec<(u64, f64)> {
        let Some(i) = self.columns.iter().position(|c| c == column) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter(|r| !r.values[i].is_nan())
            .map(|r| (r.step, r.values[i]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_csv_and_enforces_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut log = MetricsLog::create(&p, &["loss", "ap"]).unwrap();
        log.append(1, &[("loss", 0.5)]).unwrap();
        log.append(3, &[("loss", 0.25), ("ap", 0.75)]).unwrap();
        assert!(log.append(3, &[("loss", 0.1)]).is_err());
        assert!(log.append(4, &[("nope", 0.1)]).is_err());
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,loss,ap,wall_time");
        assert!(lines[1].starts_with("1,0.5,,"));
        assert!(lines[2].starts_with("3,0.25,0.75,"));
        assert_eq!(log.last_value("ap"), Some(0.75));
        assert_eq!(log.series("loss"), vec![(1, 0.5), (3, 0.25)]);
    }
}
