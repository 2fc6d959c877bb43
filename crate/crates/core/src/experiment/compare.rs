use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::run::{csv_err, METRICS_FILE};
use crate::error::{Error, Result};

pub const MAP_COMPARE_FILE: &str = "map50_compare.csv";
pub const BYTES_COMPARE_FILE: &str = "bytes_saved_compare.csv";

/// Per-round series read back from a run's `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub label: String,
    pub map50: Vec<f64>,
    pub bytes_saved_cumulative: Vec<i64>,
}

pub fn read_metrics(dir: &Path) -> Result<RunMetrics> {
    let path = dir.join(METRICS_FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format { path: path.clone(), reason: format!("missing column `{name}`") })
    };
    let (round_col, method_col, map_col, bytes_col) =
        (col("round")?, col("method")?, col("map50")?, col("bytes_saved_cumulative")?);
    let bad = |row: usize, what: &str| Error::Format { path: path.clone(), reason: format!("row {row}: bad {what}") };
    let mut label = None;
    let (mut map50, mut bytes) = (Vec::new(), Vec::new());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let round: usize = rec[round_col].parse().map_err(|_| bad(i + 1, "round"))?;
        if round != i + 1 {
            return Err(bad(i + 1, "round order"));
        }
        label.get_or_insert_with(|| rec[method_col].to_string());
        map50.push(rec[map_col].parse().map_err(|_| bad(i + 1, "map50"))?);
        bytes.push(rec[bytes_col].parse().map_err(|_| bad(i + 1, "bytes_saved_cumulative"))?);
    }
    Ok(RunMetrics { label: label.unwrap_or_else(|| dir.display().to_string()), map50, bytes_saved_cumulative: bytes })
}

/// Side-by-side per-round series of several runs. Deltas are relative to the first run.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub runs: Vec<RunMetrics>,
}

impl Comparison {
    pub fn rounds(&self) -> usize {
        self.runs[0].map50.len()
    }

    /// `map50[run][round] − map50[0][round]`.
    pub fn delta(&self, run: usize, round: usize) -> f64 {
        self.runs[run].map50[round] - self.runs[0].map50[round]
    }

    pub fn map_table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["round".to_string()];
        header.extend(self.runs.iter().map(|r| format!("map50_{}", r.label)));
        header.extend(self.runs[1..].iter().map(|r| format!("delta_{}_vs_{}", r.label, self.runs[0].label)));
        let rows = (0..self.rounds())
            .map(|t| {
                let mut row = vec![(t + 1).to_string()];
                row.extend(self.runs.iter().map(|r| r.map50[t].to_string()));
                row.extend((1..self.runs.len()).map(|k| self.delta(k, t).to_string()));
                row
            })
            .collect();
        (header, rows)
    }

    pub fn bytes_table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["round".to_string()];
        header.extend(self.runs.iter().map(|r| format!("bytes_saved_{}", r.label)));
        let rows = (0..self.rounds())
            .map(|t| {
                let mut row = vec![(t + 1).to_string()];
                row.extend(self.runs.iter().map(|r| r.bytes_saved_cumulative[t].to_string()));
                row
            })
            .collect();
        (header, rows)
    }
}

/// Loads at least two runs with equal round counts. Duplicate labels get a `#n` suffix.
pub fn compare(run_dirs: &[PathBuf]) -> Result<Comparison> {
    if run_dirs.len() < 2 {
        return Err(Error::invalid("compare needs at least two run directories"));
    }
    let mut runs = run_dirs.iter().map(|d| read_metrics(d)).collect::<Result<Vec<_>>>()?;
    let rounds = runs[0].map50.len();
    for (dir, r) in run_dirs.iter().zip(&runs) {
        if r.map50.len() != rounds {
            return Err(Error::Mismatch(format!(
                "{} has {} rounds, {} has {rounds}",
                dir.display(),
                r.map50.len(),
                run_dirs[0].display()
            )));
        }
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    for r in &mut runs {
        let n = seen.entry(r.label.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            r.label = format!("{}#{n}", r.label);
        }
    }
    Ok(Comparison { runs })
}

fn write_table(path: &Path, (header, rows): (Vec<String>, Vec<Vec<String>>)) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the mAP and bytes-saved comparison files into `out_dir`.
pub fn write_comparison(cmp: &Comparison, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_table(&out_dir.join(MAP_COMPARE_FILE), cmp.map_table())?;
    write_table(&out_dir.join(BYTES_COMPARE_FILE), cmp.bytes_table())
}
