//! CSV exports: run curves, gate traces, temporal-ensemble state, metrics.

use zootune_core::train::{GateSample, RunPoint, RunRecord};
use zootune_core::zoo::{TeState, TE_DECAY};

use crate::error::{Error, Result};

pub const RUN_HEADER: [&str; 3] = ["iteration", "train_loss", "eval_metric"];
pub const GATES_HEADER: [&str; 4] = ["iteration", "layer", "source", "gate_mean"];
pub const TE_HEADER: [&str; 3] = ["layer", "source", "value"];

/// Seventeen significant digits: parses back to the identical double.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn write_rows<const N: usize>(header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))
}

fn read_rows(bytes: &[u8], header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_reader(bytes);
    let got = r.headers().map_err(csv_err)?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(Error::Format(format!("expected CSV header {}, got {}", header.join(","), got.iter().collect::<Vec<_>>().join(","))));
    }
    r.records().map(|x| x.map_err(csv_err)).collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let s = rec.get(i).unwrap_or("");
    s.parse().map_err(|_| Error::Format(format!("bad CSV value `{s}`")))
}

pub fn run_csv(record: &RunRecord) -> Result<Vec<u8>> {
    if record.points.is_empty() {
        return Err(Error::Usage("empty run record".into()));
    }
    write_rows(
        RUN_HEADER,
        record.points.iter().map(|p| {
            [p.iteration.to_string(), fmt_float(p.train_loss), p.eval_metric.map(fmt_float).unwrap_or_default()]
        }),
    )
}

pub fn read_run_csv(bytes: &[u8]) -> Result<Vec<RunPoint>> {
    read_rows(bytes, &RUN_HEADER)?
        .iter()
        .map(|r| {
            let metric = r.get(2).unwrap_or("");
            Ok(RunPoint {
                iteration: field(r, 0)?,
                train_loss: field(r, 1)?,
                eval_metric: if metric.is_empty() { None } else { Some(field(r, 2)?) },
            })
        })
        .collect()
}

pub fn gates_csv(record: &RunRecord) -> Result<Vec<u8>> {
    write_rows(
        GATES_HEADER,
        record.gate_trace.iter().map(|g| {
            [g.iteration.to_string(), g.layer.to_string(), g.source.to_string(), fmt_float(g.gate_mean)]
        }),
    )
}

pub fn read_gates_csv(bytes: &[u8]) -> Result<Vec<GateSample>> {
    read_rows(bytes, &GATES_HEADER)?
        .iter()
        .map(|r| Ok(GateSample { iteration: field(r, 0)?, layer: field(r, 1)?, source: field(r, 2)?, gate_mean: field(r, 3)? }))
        .collect()
}

pub fn te_csv(te: &TeState) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for layer in 0..te.num_layers() {
        let vals = te.get(layer).ok_or_else(|| Error::Usage(format!("temporal ensemble layer {layer} never updated")))?;
        for (s, &v) in vals.iter().enumerate() {
            rows.push([layer.to_string(), s.to_string(), fmt_float(v)]);
        }
    }
    write_rows(TE_HEADER, rows.into_iter())
}

/// Reads a TE file; rows must list layers and sources in order.
pub fn read_te_csv(bytes: &[u8]) -> Result<TeState> {
    let mut layers: Vec<Vec<f64>> = Vec::new();
    for r in read_rows(bytes, &TE_HEADER)? {
        let (layer, source, value): (usize, usize, f64) = (field(&r, 0)?, field(&r, 1)?, field(&r, 2)?);
        if layer == layers.len() && source == 0 {
            layers.push(vec![value]);
        } else if layer + 1 == layers.len() && source == layers[layer].len() {
            layers[layer].push(value);
        } else {
            return Err(Error::Format(format!("TE rows out of order at layer {layer}, source {source}")));
        }
    }
    Ok(TeState::from_values(TE_DECAY, layers)?)
}

pub fn metrics_csv(rows: &[(&str, f64)]) -> Result<Vec<u8>> {
    write_rows(["metric", "value"], rows.iter().map(|(k, v)| [k.to_string(), fmt_float(*v)]))
}
