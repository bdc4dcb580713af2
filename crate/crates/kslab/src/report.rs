//! Report serialisation helpers.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Format a number with 12 significant digits.
///
/// ```
/// assert_eq!(kslab::report::fmt_num(0.5), "5.00000000000e-1");
/// assert_eq!(kslab::report::fmt_num(0.0), "0.00000000000e0");
/// ```
pub fn fmt_num(v: f64) -> String {
    format!("{v:.11e}")
}

/// A table with a header row, rendered as comma-separated text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Series {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(|v| fmt_num(*v)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Write `report.json` and `series.csv` into `dir`.
pub fn write_outputs<R: Serialize>(dir: &Path, report: &R, series: &Series) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| crate::Error::Config(format!("cannot serialise report: {e}")))?;
    fs::write(dir.join("report.json"), json + "\n")?;
    fs::write(dir.join("series.csv"), series.to_csv())?;
    Ok(())
}
