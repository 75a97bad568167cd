//! Run artifacts: trace CSVs, `summary.json`, `metrics.csv`, and saved
//! proposal parameters.
//!
//! Every float is serialized with 17 significant digits (scientific
//! notation), enough to round-trip an `f64` exactly, so downstream tooling
//! and the bitwise-reproducibility tests see the numbers the run computed,
//! not a shortest-representation approximation. The JSON writer is local to
//! this module for the same reason: generic serializers re-render floats.
//!
//! `summary.json` carries the config echo, the final metrics, the trace
//! file names, and the wall time. `metrics.csv` mirrors the metric values
//! (wall time excluded, since it is not reproducible) so that every number
//! in the summary is also available in CSV form.

use crate::error::{Error, Result};
use crate::optimize::{MfTraceRow, TraceRow};
use crate::proposal::MeanFieldNormal;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Formats a float with 17 significant digits in scientific notation.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        // `NaN`, `inf`, `-inf`: keep the std renderings in CSV columns.
        format!("{x}")
    }
}

fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

fn json_f64(x: f64) -> String {
    // JSON has no NaN or infinity literals; represent them as null.
    if x.is_finite() {
        fmt_f64(x)
    } else {
        "null".to_string()
    }
}

/// Writes a CSV file with the given header and pre-rendered rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Shape { expected: header.len(), got: row.len() });
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Header shared by every training trace CSV.
pub const TRACE_HEADER: [&str; 5] = ["iter", "elbo_proxy", "T", "Zr_hat", "lr"];

/// Writes an accepted-sample training trace.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let rendered: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.iter.to_string(),
                fmt_f64(r.elbo_proxy),
                fmt_f64(r.threshold),
                fmt_f64(r.zr_hat),
                fmt_f64(r.lr),
            ]
        })
        .collect();
    write_csv(path, &TRACE_HEADER, &rendered)
}

/// Writes a plain-VI trace in the same five-column shape: plain VI is the
/// infinite-threshold limit, where every proposal is accepted.
pub fn write_mf_trace(path: &Path, rows: &[MfTraceRow]) -> Result<()> {
    let rendered: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.iter.to_string(),
                fmt_f64(r.elbo_proxy),
                fmt_f64(f64::INFINITY),
                fmt_f64(1.0),
                fmt_f64(r.lr),
            ]
        })
        .collect();
    write_csv(path, &TRACE_HEADER, &rendered)
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Experiment name as invoked.
    pub experiment: String,
    /// Seed the run derived all randomness from.
    pub seed: u64,
    /// Config file echo, key order.
    pub config: Vec<(String, String)>,
    /// Named final metrics, insertion order.
    pub metrics: Vec<(String, f64)>,
    /// File names (relative to the output directory) of every trace or
    /// table the run wrote.
    pub traces: Vec<String>,
    /// Wall time of the compute phase. Not reproducible, so it appears only
    /// here and not in `metrics.csv`.
    pub wall_time_seconds: f64,
}

impl RunSummary {
    pub fn new(experiment: &str, seed: u64, config: Vec<(String, String)>) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            config,
            metrics: Vec::new(),
            traces: Vec::new(),
            wall_time_seconds: 0.0,
        }
    }

    /// Appends a named metric.
    pub fn push_metric(&mut self, name: &str, value: f64) {
        self.metrics.push((name.to_string(), value));
    }

    /// Records a trace file name.
    pub fn push_trace(&mut self, name: &str) {
        self.traces.push(name.to_string());
    }

    /// Renders the summary as JSON.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n");
        let _ = writeln!(out, "  \"experiment\": \"{}\",", json_escape(&self.experiment));
        let _ = writeln!(out, "  \"seed\": {},", self.seed);
        out.push_str("  \"config\": {");
        for (i, (k, v)) in self.config.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "\n    \"{}\": \"{}\"", json_escape(k), json_escape(v));
        }
        out.push_str(if self.config.is_empty() { "},\n" } else { "\n  },\n" });
        out.push_str("  \"metrics\": {");
        for (i, (k, v)) in self.metrics.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "\n    \"{}\": {}", json_escape(k), json_f64(*v));
        }
        out.push_str(if self.metrics.is_empty() { "},\n" } else { "\n  },\n" });
        out.push_str("  \"traces\": [");
        for (i, t) in self.traces.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "\"{}\"", json_escape(t));
        }
        out.push_str("],\n");
        let _ = writeln!(out, "  \"wall_time_seconds\": {}", json_f64(self.wall_time_seconds));
        out.push('}');
        out.push('\n');
        out
    }

    /// Writes `summary.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("summary.json"), self.to_json())?;
        let rows: Vec<Vec<String>> = self
            .metrics
            .iter()
            .map(|(k, v)| vec![k.clone(), fmt_f64(*v)])
            .collect();
        write_csv(&dir.join("metrics.csv"), &["metric", "value"], &rows)
    }
}

/// Saves a mean-field proposal with its threshold and guard so a later
/// `eval` run can rebuild the fitted distribution exactly.
pub fn write_meanfield_params(
    path: &Path,
    q: &MeanFieldNormal,
    threshold: f64,
    epsilon: f64,
) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "family = meanfield");
    let _ = writeln!(text, "dim = {}", q.mu.len());
    let _ = writeln!(text, "threshold = {}", fmt_f64(threshold));
    let _ = writeln!(text, "epsilon = {}", fmt_f64(epsilon));
    for (i, v) in q.mu.iter().enumerate() {
        let _ = writeln!(text, "mu_{i} = {}", fmt_f64(*v));
    }
    for (i, v) in q.log_scale.iter().enumerate() {
        let _ = writeln!(text, "log_scale_{i} = {}", fmt_f64(*v));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads a proposal saved by [`write_meanfield_params`]; returns the
/// proposal, threshold, and guard.
pub fn read_meanfield_params(path: &Path) -> Result<(MeanFieldNormal, f64, f64)> {
    let mut cfg = crate::config::Config::load(path)?;
    let family = cfg.str_or("family", "meanfield");
    if family != "meanfield" {
        return Err(Error::Config(format!("unsupported proposal family {family:?}")));
    }
    let dim = cfg.usize_or("dim", 0)?;
    if dim == 0 {
        return Err(Error::Config("saved proposal is missing `dim`".into()));
    }
    let threshold = cfg.f64_or("threshold", 0.0)?;
    let epsilon = cfg.f64_or("epsilon", 0.0)?;
    let mut mu = Vec::with_capacity(dim);
    let mut log_scale = Vec::with_capacity(dim);
    for i in 0..dim {
        mu.push(
            cfg.get_f64(&format!("mu_{i}"))?
                .ok_or_else(|| Error::Config(format!("saved proposal is missing mu_{i}")))?,
        );
        log_scale.push(cfg.get_f64(&format!("log_scale_{i}"))?.ok_or_else(|| {
            Error::Config(format!("saved proposal is missing log_scale_{i}"))
        })?);
    }
    cfg.ensure_consumed()?;
    Ok((MeanFieldNormal::new(mu, log_scale)?, threshold, epsilon))
}
