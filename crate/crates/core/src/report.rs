//! Method-by-session accuracy tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::train::SessionReport;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub sessions: Vec<f64>,
}

impl MethodRow {
    pub fn new(method: impl Into<String>, sessions: Vec<f64>) -> Self {
        MethodRow {
            method: method.into(),
            sessions,
        }
    }

    /// Test accuracies of consecutive session reports.
    pub fn from_reports(method: impl Into<String>, reports: &[SessionReport]) -> Result<Self> {
        let method = method.into();
        let sessions = reports
            .iter()
            .map(|r| {
                r.test_accuracy.ok_or_else(|| {
                    Error::Input(format!(
                        "{method}: session {} has no test accuracy",
                        r.session
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(MethodRow { method, sessions })
    }

    pub fn average(&self) -> f64 {
        self.sessions.iter().sum::<f64>() / self.sessions.len() as f64
    }
}

/// CSV with one row per method and columns `Session1..SessionS,Average`.
pub fn comparison_table(rows: &[MethodRow]) -> Result<String> {
    let s = match rows.first() {
        None => return Err(Error::Input("no methods to tabulate".into())),
        Some(r) => r.sessions.len(),
    };
    if s == 0 {
        return Err(Error::Input("methods have no sessions".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.sessions.len() != s) {
        return Err(Error::Input(format!(
            "{} has {} sessions, expected {s}",
            r.method,
            r.sessions.len()
        )));
    }
    let mut out = String::from("Method");
    for i in 1..=s {
        let _ = write!(out, ",Session{i}");
    }
    out.push_str(",Average\n");
    for r in rows {
        out.push_str(&r.method.replace([',', '\n'], " "));
        for a in &r.sessions {
            let _ = write!(out, ",{a}");
        }
        let _ = writeln!(out, ",{}", r.average());
    }
    Ok(out)
}

/// Write [`comparison_table`] to `path`; nothing is written on error.
pub fn emit_comparison_table(rows: &[MethodRow], path: impl AsRef<Path>) -> Result<()> {
    let csv = comparison_table(rows)?;
    let path = path.as_ref();
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}
