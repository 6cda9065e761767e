//! Artifact emission: CSV tables and the run summary. All floats are printed
//! with `{:e}` (shortest round-trip form) so output is byte-identical across
//! thread counts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use solwave::modulation::ModulationRecord;

#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn fmt(x: f64) -> String {
    format!("{x:e}")
}

/// One named assertion of a preset run.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    /// value must be <= threshold.
    pub fn le(name: impl Into<String>, value: f64, threshold: f64) -> Check {
        Check { name: name.into(), value, threshold, pass: value <= threshold && value.is_finite() }
    }

    /// value must be >= threshold.
    pub fn ge(name: impl Into<String>, value: f64, threshold: f64) -> Check {
        Check { name: name.into(), value, threshold, pass: value >= threshold && value.is_finite() }
    }
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub preset: String,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
}

impl Summary {
    pub fn new(preset: &str) -> Summary {
        Summary { preset: preset.to_string(), pass: true, checks: Vec::new(), artifacts: Vec::new() }
    }

    pub fn push(&mut self, check: Check) {
        self.pass &= check.pass;
        self.checks.push(check);
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, EmitError> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join("summary.json");
        let mut file = fs::File::create(&path)?;
        serde_json::to_writer_pretty(&mut file, self)?;
        file.write_all(b"\n")?;
        Ok(path)
    }

    pub fn print(&self) {
        for c in &self.checks {
            let mark = if c.pass { "pass" } else { "FAIL" };
            println!("  [{mark}] {}: {:e} (threshold {:e})", c.name, c.value, c.threshold);
        }
        println!("{}: {}", self.preset, if self.pass { "pass" } else { "FAIL" });
    }
}

/// Generic numeric CSV.
pub fn write_csv(out_dir: &Path, name: &str, header: &str, rows: &[Vec<f64>]) -> Result<PathBuf, EmitError> {
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(name);
    let mut buf = String::new();
    buf.push_str(header);
    buf.push('\n');
    for row in rows {
        let cols: Vec<String> = row.iter().map(|&x| fmt(x)).collect();
        buf.push_str(&cols.join(","));
        buf.push('\n');
    }
    fs::write(&path, buf)?;
    Ok(path)
}

pub const TRACK_HEADER: &str = "t,omega,theta,xi1,xi2,xi3,u1,u2,u3,gamma_dot,v_h1,w_l2,orth_res,xi_drift";

/// The 14-column tracking table.
pub fn write_track_csv(out_dir: &Path, name: &str, records: &[ModulationRecord]) -> Result<PathBuf, EmitError> {
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            vec![
                r.t,
                r.lambda.omega,
                r.lambda.theta,
                r.lambda.xi[0],
                r.lambda.xi[1],
                r.lambda.xi[2],
                r.lambda.u[0],
                r.lambda.u[1],
                r.lambda.u[2],
                r.gamma_dot_norm,
                r.v_h1,
                r.w_l2,
                r.orth_res,
                r.xi_drift,
            ]
        })
        .collect();
    write_csv(out_dir, name, TRACK_HEADER, &rows)
}
