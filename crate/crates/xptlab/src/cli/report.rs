//! Metric reports.
//!
//! A report file is CSV with one comment line up front:
//!
//! ```text
//! # config_hash=<16 hex chars>
//! metric,method,scope,seed,value
//! rep_change,pt,lang1,0,97.312...
//! ```
//!
//! `report` aggregates several of these (one per seed) into mean and sample
//! standard deviation per (metric, method, scope).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub metric: String,
    pub method: String,
    pub scope: String,
    pub seed: u64,
    pub value: f64,
}

impl Row {
    pub fn new(metric: &str, method: &str, scope: &str, seed: u64, value: f64) -> Self {
        Self {
            metric: metric.into(),
            method: method.into(),
            scope: scope.into(),
            seed,
            value,
        }
    }
}

fn check_field(s: &str) -> Result<()> {
    if s.is_empty() || s.contains(',') || s.contains('\n') {
        return Err(Error::Input(format!("unusable report field {s:?}")));
    }
    Ok(())
}

pub fn write_report(path: &Path, config_hash: &str, rows: &[Row]) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# config_hash={config_hash}").expect("string write");
    writeln!(out, "metric,method,scope,seed,value").expect("string write");
    for r in rows {
        check_field(&r.metric)?;
        check_field(&r.method)?;
        check_field(&r.scope)?;
        if !r.value.is_finite() {
            return Err(Error::Invariant(format!(
                "non-finite value for {}/{}/{}",
                r.metric, r.method, r.scope
            )));
        }
        writeln!(out, "{},{},{},{},{:?}", r.metric, r.method, r.scope, r.seed, r.value)
            .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<(String, Vec<Row>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
    let hash = header
        .strip_prefix("# config_hash=")
        .ok_or_else(|| Error::Format(format!("{} lacks the config-hash header", path.display())))?
        .trim()
        .to_string();
    match lines.next() {
        Some("metric,method,scope,seed,value") => {}
        _ => {
            return Err(Error::Format(format!(
                "{} lacks the expected column row",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Format(format!(
                "{} line {}: expected 5 fields, found {}",
                path.display(),
                i + 3,
                parts.len()
            )));
        }
        let seed: u64 = parts[3]
            .parse()
            .map_err(|_| Error::Format(format!("{} line {}: bad seed", path.display(), i + 3)))?;
        let value: f64 = parts[4].parse().map_err(|_| {
            Error::Format(format!("{} line {}: bad value", path.display(), i + 3))
        })?;
        rows.push(Row {
            metric: parts[0].into(),
            method: parts[1].into(),
            scope: parts[2].into(),
            seed,
            value,
        });
    }
    Ok((hash, rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggRow {
    pub metric: String,
    pub method: String,
    pub scope: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single observation.
    pub std: f64,
}

/// Group rows by (metric, method, scope) and reduce over seeds.
pub fn aggregate(rows: &[Row]) -> Vec<AggRow> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.metric.clone(), r.method.clone(), r.scope.clone()))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((metric, method, scope), values)| {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
                (ss / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            AggRow { metric, method, scope, n, mean, std }
        })
        .collect()
}

pub fn write_summary(path: &Path, config_hash: &str, rows: &[AggRow]) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# config_hash={config_hash}").expect("string write");
    writeln!(out, "metric,method,scope,n,mean,std").expect("string write");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:?},{:?}",
            r.metric, r.method, r.scope, r.n, r.mean, r.std
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}
