//! Numeric CSV: rows are timesteps, columns are channels.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenize::TimeSeries;
use crate::training::LossBreakdown;

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Parses CSV text. Rows and columns in errors are 1-based and count the header.
pub fn parse_series_csv(text: &str, column: Option<usize>) -> Result<Vec<TimeSeries>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let records: Vec<csv::StringRecord> = reader
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    let records: Vec<(usize, csv::StringRecord)> = records
        .into_iter()
        .enumerate()
        .filter(|(_, r)| !(r.len() == 1 && r[0].is_empty()))
        .map(|(i, r)| (i + 1, r))
        .collect();
    let Some((_, first)) = records.first() else {
        return Err(Error::EmptyFile);
    };
    let width = first.len();
    let header = first.iter().all(|f| f.parse::<f64>().is_err());
    let body = &records[usize::from(header)..];
    if body.is_empty() {
        return Err(Error::EmptyFile);
    }
    let cols: Vec<usize> = match column {
        Some(c) if c < width => vec![c],
        Some(c) => {
            return Err(Error::InvalidArgument(format!("column {c} out of range for {width} columns")))
        }
        None => (0..width).collect(),
    };
    let mut values = vec![Vec::with_capacity(body.len()); cols.len()];
    for (row, rec) in body {
        if rec.len() != width {
            return Err(Error::ParseError {
                row: *row,
                col: rec.len().min(width) + 1,
                msg: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (j, &c) in cols.iter().enumerate() {
            let v = rec[c].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::ParseError {
                row: *row,
                col: c + 1,
                msg: format!("not a finite number: {:?}", &rec[c]),
            })?;
            values[j].push(v);
        }
    }
    values.into_iter().map(TimeSeries::new).collect()
}

pub fn load_series_csv(path: &Path, column: Option<usize>) -> Result<Vec<TimeSeries>> {
    parse_series_csv(&std::fs::read_to_string(path)?, column)
}

/// Writes equal-length series as columns `c0, c1, ...`.
pub fn write_series_csv<W: Write>(w: W, series: &[TimeSeries]) -> Result<()> {
    let len = series.first().map_or(0, |s| s.len());
    if let Some(s) = series.iter().find(|s| s.len() != len) {
        return Err(Error::LengthMismatch(len, s.len()));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record((0..series.len()).map(|i| format!("c{i}")))
        .map_err(csv_err)?;
    for t in 0..len {
        out.write_record(series.iter().map(|s| format!("{:?}", s.values[t])))
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_loss_csv<W: Write>(w: W, log: &[LossBreakdown]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "modality", "recon", "quant", "commit", "total"])
        .map_err(csv_err)?;
    for (step, l) in log.iter().enumerate() {
        out.write_record([
            step.to_string(),
            l.modality.name().to_string(),
            format!("{:?}", l.recon),
            format!("{:?}", l.quant),
            format!("{:?}", l.commit),
            format!("{:?}", l.total),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
