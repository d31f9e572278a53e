use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// One `(style, steps)` cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub style: usize,
    pub steps: usize,
    /// Distance to the reference set, clamped at zero.
    pub metric: f64,
    /// Samples per set.
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Which model produced the samples, e.g. `distilled` or `undistilled`.
    pub arm: String,
    /// `energy_distance` or `energy_distance_marginal`.
    pub metric: String,
    pub seed: u64,
    pub config_hash: String,
    /// Checkpoint used for each step count.
    pub checkpoints: BTreeMap<usize, String>,
    pub reference: String,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn get(&self, style: usize, steps: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.style == style && r.steps == steps)
            .map(|r| r.metric)
    }

    pub fn styles(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.rows.iter().map(|r| r.style).collect();
        set.into_iter().collect()
    }

    pub fn step_counts(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.rows.iter().map(|r| r.steps).collect();
        set.into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if !(r.metric >= 0.0 && r.metric.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "report cell ({}, {}) is {}",
                    r.style, r.steps, r.metric
                )));
            }
        }
        Ok(())
    }

    /// Header `style,steps,metric,n,seed`, one line per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("style,steps,metric,n,seed\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{}", r.style, r.steps, r.metric, r.n, r.seed).unwrap();
        }
        s
    }

    /// Whitespace-separated table: one line per step count, one column per
    /// style.
    pub fn to_plot_data(&self) -> String {
        let styles = self.styles();
        let mut s = format!("# {} ({})\n# steps", self.metric, self.arm);
        for st in &styles {
            write!(s, " style{st}").unwrap();
        }
        s.push('\n');
        for steps in self.step_counts() {
            write!(s, "{steps}").unwrap();
            for &st in &styles {
                match self.get(st, steps) {
                    Some(v) => write!(s, " {v}").unwrap(),
                    None => s.push_str(" nan"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Write `<stem>.csv`, `<stem>.json` and `<stem>.dat` under `dir`. All
    /// contents are rendered before the first file is touched.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let files = [
            (format!("{stem}.csv"), self.to_csv()),
            (format!("{stem}.json"), json),
            (format!("{stem}.dat"), self.to_plot_data()),
        ];
        let mut out = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            write_atomic(&path, body.as_bytes())?;
            out.push(path);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        let rows = [(1, 1, 0.5), (1, 4, 0.25), (3, 1, 0.75), (3, 4, 0.0)]
            .into_iter()
            .map(|(style, steps, metric)| ReportRow {
                style,
                steps,
                metric,
                n: 10,
                seed: 0,
            })
            .collect();
        EvalReport {
            arm: "distilled".into(),
            metric: "energy_distance".into(),
            seed: 0,
            config_hash: "abc".into(),
            checkpoints: BTreeMap::new(),
            reference: "teacher".into(),
            rows,
        }
    }

    #[test]
    fn csv_layout() {
        let csv = report().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "style,steps,metric,n,seed");
        assert_eq!(lines[2], "1,4,0.25,10,0");
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn plot_data_is_a_grid() {
        let dat = report().to_plot_data();
        assert!(dat.contains("# steps style1 style3\n1 0.5 0.75\n4 0.25 0\n"));
    }

    #[test]
    fn negative_cells_refused() {
        let mut r = report();
        r.rows[0].metric = -1.0;
        let dir = tempfile::tempdir().unwrap();
        assert!(r.write(dir.path(), "x").is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
