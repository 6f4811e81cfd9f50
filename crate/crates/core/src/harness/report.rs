// SPDX-License-Identifier: MIT OR Apache-2.0

//! Summary tables across run directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::RunManifest;
use crate::error::{ChannelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub recipe: String,
    pub run_dir: PathBuf,
    pub check: String,
    pub target: String,
    pub measured: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

/// One row per check of every run, in the order the directories are given.
pub fn report(dirs: &[PathBuf]) -> Result<Report> {
    let mut rows = Vec::new();
    for dir in dirs {
        let m = RunManifest::read(dir)?;
        for c in &m.checks {
            rows.push(ReportRow {
                recipe: m.recipe.clone(),
                run_dir: dir.clone(),
                check: c.name.clone(),
                target: c.target.clone(),
                measured: c.measured,
                pass: c.pass,
            });
        }
    }
    Ok(Report { rows })
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn to_text(&self) -> String {
        let header = ["recipe", "check", "target", "measured", "result"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.recipe.clone(),
                    r.check.clone(),
                    r.target.clone(),
                    format!("{:.4}", r.measured),
                    if r.pass { "PASS" } else { "FAIL" }.to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = line(&header.map(String::from));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["recipe", "run_dir", "check", "target", "measured", "pass"])?;
        for r in &self.rows {
            w.write_record([
                r.recipe.clone(),
                r.run_dir.display().to_string(),
                r.check.clone(),
                r.target.clone(),
                r.measured.to_string(),
                r.pass.to_string(),
            ])?;
        }
        w.flush().map_err(|e| ChannelError::io(path, e))
    }
}
