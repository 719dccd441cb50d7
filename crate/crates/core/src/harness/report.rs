//! JSON and CSV result files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::bench::BenchRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            _ => Err(Error::Config(format!("unknown format {s:?}; expected json or csv"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Json => "json",
            Format::Csv => "csv",
        })
    }
}

const HEADER: [&str; 15] = [
    "model_kind",
    "strategy",
    "mode",
    "batch_size",
    "epochs",
    "median_epoch_seconds",
    "per_epoch_seconds",
    "peak_planned_bytes",
    "optimizer_report",
    "seed",
    "element_width",
    "status",
    "reason",
    "compile_seconds",
    "epoch_losses",
];

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn split(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(vec![]);
    }
    s.split(';').map(|v| v.parse().map_err(|e| bad(format!("{v:?}: {e}")))).collect()
}

fn bad(detail: String) -> Error {
    Error::Format { offset: 0, detail }
}

pub fn to_json(records: &[BenchRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)? + "\n")
}

pub fn to_csv(records: &[BenchRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for r in records {
        let report = match &r.optimizer_report {
            Some(o) => serde_json::to_string(o)?,
            None => String::new(),
        };
        w.write_record([
            r.model_kind.clone(),
            r.strategy.clone(),
            r.mode.clone(),
            r.batch_size.to_string(),
            r.epochs.to_string(),
            r.median_epoch_seconds.to_string(),
            join(&r.per_epoch_seconds),
            r.peak_planned_bytes.to_string(),
            report,
            r.seed.to_string(),
            r.element_width.to_string(),
            r.status.clone(),
            r.reason.clone().unwrap_or_default(),
            r.compile_seconds.to_string(),
            join(&r.epoch_losses),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()?.iter().ne(HEADER) {
        return Err(bad("unexpected CSV header".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|e| bad(format!("{s:?}: {e}"))) };
    let int = |s: &str| -> Result<u64> { s.parse().map_err(|e| bad(format!("{s:?}: {e}"))) };
    r.records()
        .map(|row| {
            let f = row?;
            let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
            Ok(BenchRecord {
                model_kind: f[0].into(),
                strategy: f[1].into(),
                mode: f[2].into(),
                batch_size: int(&f[3])? as usize,
                epochs: int(&f[4])? as usize,
                median_epoch_seconds: num(&f[5])?,
                per_epoch_seconds: split(&f[6])?,
                peak_planned_bytes: int(&f[7])?,
                optimizer_report: match &f[8] {
                    "" => None,
                    s => Some(serde_json::from_str(s)?),
                },
                seed: int(&f[9])?,
                element_width: int(&f[10])? as u32,
                status: f[11].into(),
                reason: opt(&f[12]),
                compile_seconds: num(&f[13])?,
                epoch_losses: split(&f[14])?,
            })
        })
        .collect()
}

/// `records` as text in `format`.
pub fn render(records: &[BenchRecord], format: Format) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Contract("no records to write".into()));
    }
    match format {
        Format::Json => to_json(records),
        Format::Csv => to_csv(records),
    }
}

/// Writes `records` to `path`.
pub fn emit(records: &[BenchRecord], format: Format, path: &Path) -> Result<()> {
    std::fs::write(path, render(records, format)?)?;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<Vec<BenchRecord>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchRecord>> {
    from_csv(&std::fs::read_to_string(path)?)
}
