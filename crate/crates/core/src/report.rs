//! Certification summaries (JSON) with per-instance detail tables (CSV).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Per-instance detail rows under a fixed header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl InstanceTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Invalid(format!(
                "row has {} fields, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Shortest round-tripping text for `x`, switching to exponent form for very
/// small or large magnitudes.
pub fn real(x: f64) -> String {
    format!("{x:?}")
}

/// Formats an optional real for a CSV cell; `None` is the empty string.
pub fn cell(v: Option<f64>) -> String {
    v.map(real).unwrap_or_default()
}

/// Outcome of one certification run.
#[derive(Debug, Clone, Serialize)]
pub struct CertificationReport {
    pub theorem: String,
    pub instances: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seed: u64,
    pub tolerances: BTreeMap<String, f64>,
    pub summary: BTreeMap<String, serde_json::Value>,
    #[serde(skip)]
    pub table: InstanceTable,
}

impl CertificationReport {
    pub fn new(name: &str, seed: u64, tolerance: f64, table: InstanceTable) -> Self {
        Self {
            theorem: name.to_string(),
            instances: 0,
            max_deviation: 0.0,
            tolerance,
            pass: true,
            seed,
            tolerances: BTreeMap::new(),
            summary: BTreeMap::new(),
            table,
        }
    }

    /// Folds one deviation into `max_deviation` and fails the run when it
    /// exceeds the tolerance.
    pub fn record_deviation(&mut self, dev: f64) {
        if dev.is_nan() || dev > self.max_deviation {
            self.max_deviation = if dev.is_nan() { f64::INFINITY } else { dev };
        }
        if !(dev <= self.tolerance) {
            self.pass = false;
        }
    }

    /// Fails the run when `ok` is false.
    pub fn require(&mut self, ok: bool) {
        self.pass &= ok;
    }

    pub fn set_tolerance(&mut self, name: &str, value: f64) {
        self.tolerances.insert(name.to_string(), value);
    }

    pub fn note(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.summary.insert(key.to_string(), value.into());
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{} seed={} instances={} max_deviation={:e} tolerance={:e} {}",
            self.theorem,
            self.seed,
            self.instances,
            self.max_deviation,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv_string(&self) -> Result<String> {
        self.table.to_csv_string()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deviations_drive_pass() {
        let mut r = CertificationReport::new("x", 1, 1e-9, InstanceTable::new(["a"]));
        r.record_deviation(1e-12);
        assert!(r.pass);
        r.record_deviation(1e-8);
        assert!(!r.pass);
        assert_eq!(r.max_deviation, 1e-8);
        let mut r = CertificationReport::new("x", 1, 1e-9, InstanceTable::new(["a"]));
        r.record_deviation(f64::NAN);
        assert!(!r.pass && r.max_deviation.is_infinite());
    }

    #[test]
    fn json_has_required_keys() {
        let mut r = CertificationReport::new("thm1", 3, 1e-10, InstanceTable::new(["id"]));
        r.instances = 2;
        let v: serde_json::Value = serde_json::from_str(&r.to_json_string().unwrap()).unwrap();
        for key in ["theorem", "instances", "max_deviation", "tolerance", "pass"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v.get("table").is_none());
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = InstanceTable::new(["id", "value"]);
        assert_eq!(t.to_csv_string().unwrap(), "id,value\n");
    }

    #[test]
    fn row_width_is_checked() {
        let mut t = InstanceTable::new(["id", "value"]);
        assert!(t.push(vec!["a".into()]).is_err());
        t.push(vec!["a".into(), cell(Some(0.5))]).unwrap();
        assert_eq!(t.to_csv_string().unwrap(), "id,value\na,0.5\n");
    }
}
