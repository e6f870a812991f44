use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

/// A named pass/fail assertion of a verification run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Shortest round-trip representation, so CSVs are reproducible byte for byte.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}

/// Comment lines carrying the config hash and the config itself.
pub fn config_header(cfg: &ExperimentConfig) -> String {
    format!("# config_sha256: {}\n# config: {}\n", cfg.hash(), cfg.to_json())
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub name: String,
    /// (file suffix, table); the first table is written as `<name>.csv`.
    pub tables: Vec<(String, Table)>,
    pub summary: Vec<String>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self, suffix: &str) -> Option<&Table> {
        self.tables.iter().find(|(s, _)| s == suffix).map(|(_, t)| t)
    }

    pub fn csv(&self, table: &Table, cfg: &ExperimentConfig) -> String {
        let mut s = config_header(cfg);
        s.push_str(&table.header.join(","));
        s.push('\n');
        for r in &table.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn summary_text(&self, cfg: &ExperimentConfig) -> String {
        let mut s = config_header(cfg);
        for l in &self.summary {
            let _ = writeln!(s, "{l}");
        }
        for c in &self.checks {
            let _ = writeln!(s, "{}", c.line());
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(s, "{} checks, {failed} failed", self.checks.len());
        s
    }

    fn file_name(&self, suffix: &str) -> String {
        if suffix.is_empty() {
            format!("{}.csv", self.name)
        } else {
            format!("{}_{suffix}.csv", self.name)
        }
    }

    /// Writes every table and the summary into `dir`; returns the paths.
    pub fn write(&self, cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        let mut out = Vec::new();
        let mut put = |name: String, body: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            out.push(p);
            Ok(())
        };
        for (suffix, t) in &self.tables {
            put(self.file_name(suffix), self.csv(t, cfg))?;
        }
        put(format!("{}_summary.txt", self.name), self.summary_text(cfg))?;
        Ok(out)
    }
}
