use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::time::{format_instant, parse_instant};
use super::{MultimodalSeries, TextRecord};

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn format_err(column: &str, message: impl Into<String>) -> Error {
    Error::Format {
        column: column.to_string(),
        message: message.into(),
    }
}

/// Read `series.csv` (`date,<vars>...,OT`) and `text.csv`
/// (`start_date,end_date,text`). Timestamps must be strictly increasing.
pub fn load_dataset(series_path: &Path, text_path: &Path) -> Result<MultimodalSeries> {
    let mut rdr = reader(series_path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.first().copied() != Some("date") {
        return Err(format_err(cols.first().copied().unwrap_or(""), "first column must be `date`"));
    }
    let variable_names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    if variable_names.is_empty() {
        return Err(format_err("date", "no value columns"));
    }
    let target_index = variable_names
        .iter()
        .position(|n| n == "OT")
        .unwrap_or(variable_names.len() - 1);

    let n = variable_names.len();
    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != n + 1 {
            return Err(format_err("date", format!("row {row} has {} fields, expected {}", rec.len(), n + 1)));
        }
        let t = parse_instant(&rec[0]).ok_or_else(|| format_err("date", format!("row {row}: unparseable `{}`", &rec[0])))?;
        timestamps.push(t);
        for (c, name) in variable_names.iter().enumerate() {
            let raw = &rec[c + 1];
            let v: f64 = raw
                .parse()
                .map_err(|_| format_err(name, format!("row {row}: not a number `{raw}`")))?;
            if !v.is_finite() {
                return Err(format_err(name, format!("row {row}: non-finite value")));
            }
            data.push(v);
        }
    }
    let rows = timestamps.len();

    let mut texts = Vec::new();
    let mut rdr = reader(text_path)?;
    let th = rdr.headers()?.clone();
    let expected = ["start_date", "end_date", "text"];
    for (i, want) in expected.iter().enumerate() {
        if th.get(i) != Some(*want) {
            return Err(format_err(th.get(i).unwrap_or(want), format!("expected column `{want}`")));
        }
    }
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let start = parse_instant(rec.get(0).unwrap_or(""))
            .ok_or_else(|| format_err("start_date", format!("row {row}: unparseable date")))?;
        let end = parse_instant(rec.get(1).unwrap_or(""))
            .ok_or_else(|| format_err("end_date", format!("row {row}: unparseable date")))?;
        texts.push(TextRecord {
            id: row,
            start,
            end,
            text: rec.get(2).unwrap_or("").to_string(),
        });
    }

    let series = MultimodalSeries {
        timestamps,
        values: Matrix::from_vec(rows, n, data),
        texts,
        variable_names,
        target_index,
        event_labels: None,
        row_offset: 0,
    };
    series.validate()?;
    Ok(series)
}

/// Read an `index,is_event` file into per-row flags.
pub fn load_event_labels(path: &Path, rows: usize) -> Result<Vec<bool>> {
    let mut rdr = reader(path)?;
    let h = rdr.headers()?.clone();
    if h.get(0) != Some("index") || h.get(1) != Some("is_event") {
        return Err(format_err(h.get(0).unwrap_or(""), "expected header `index,is_event`"));
    }
    let mut labels = vec![false; rows];
    let mut seen = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        let idx: usize = rec[0].parse().map_err(|_| format_err("index", format!("bad index `{}`", &rec[0])))?;
        if idx >= rows {
            return Err(format_err("index", format!("index {idx} beyond {rows} rows")));
        }
        labels[idx] = match &rec[1] {
            "0" => false,
            "1" => true,
            other => return Err(format_err("is_event", format!("expected 0/1, got `{other}`"))),
        };
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Length { expected: rows, got: seen });
    }
    Ok(labels)
}

pub fn write_series_csv(series: &MultimodalSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(series.variable_names.iter().cloned());
    w.write_record(&header)?;
    for (r, t) in series.timestamps.iter().enumerate() {
        let mut rec = vec![format_instant(t)];
        rec.extend(series.values.row(r).iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text_csv(texts: &[TextRecord], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::NonNumeric)
        .from_path(path)?;
    w.write_record(["start_date", "end_date", "text"])?;
    for t in texts {
        w.write_record([format_instant(&t.start), format_instant(&t.end), t.text.clone()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_event_labels(labels: &[bool], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)?;
    w.write_record(["index", "is_event"])?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), (*l as u8).to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
