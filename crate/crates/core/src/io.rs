//! CSV and JSON surfaces. Every float written to CSV carries 17 significant
//! digits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::analysis::ConsensusEntry;
use crate::error::{Error, Result};
use crate::eval::AblationReport;
use crate::federation::FederationState;
use crate::gmm::LabeledDataset;

/// Scientific notation with 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Read a dataset with header `f0,...,f{d-1}[,label]`. When `n_class` is
/// `None` it is inferred as one more than the largest label.
pub fn read_dataset_csv(path: impl AsRef<Path>, n_class: Option<usize>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_csv(file, n_class).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_dataset_csv(reader: impl std::io::Read, n_class: Option<usize>) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut feature_cols = Vec::new();
    let mut label_col = None;
    for (i, h) in headers.iter().enumerate() {
        if h == "label" {
            label_col = Some(i);
        } else if let Some(idx) = h.strip_prefix('f').and_then(|s| s.parse::<usize>().ok()) {
            feature_cols.push((idx, i));
        } else {
            return Err(Error::invalid(format!("unexpected column {h:?}")));
        }
    }
    feature_cols.sort_unstable();
    if feature_cols.is_empty() || feature_cols.iter().enumerate().any(|(k, (idx, _))| *idx != k) {
        return Err(Error::invalid("feature columns must be f0..f{d-1}"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = feature_cols
            .iter()
            .map(|(_, col)| {
                rec[*col].parse::<f64>().map_err(|_| Error::invalid(format!("row {}: bad number {:?}", line + 1, &rec[*col])))
            })
            .collect::<Result<Vec<_>>>()?;
        features.push(row);
        if let Some(c) = label_col {
            labels.push(rec[c].parse::<usize>().map_err(|_| Error::invalid(format!("row {}: bad label {:?}", line + 1, &rec[c])))?);
        }
    }
    let n_class = match n_class {
        Some(k) => k,
        None => labels.iter().max().map_or(1, |m| m + 1),
    };
    LabeledDataset::new(features, label_col.map(|_| labels), n_class)
}

fn dataset_header(d: usize, labeled: bool, extra: Option<&str>) -> Vec<String> {
    let mut h: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    if labeled {
        h.push("label".into());
    }
    if let Some(e) = extra {
        h.push(e.into());
    }
    h
}

pub fn write_dataset_csv(out: impl Write, data: &LabeledDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(dataset_header(data.dim(), data.labels.is_some(), None))?;
    for (i, x) in data.features.iter().enumerate() {
        let mut rec: Vec<String> = x.iter().map(|v| fmt_float(*v)).collect();
        if let Some(l) = &data.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Header-only dataset CSV, used when zero samples are requested.
pub fn write_empty_dataset_csv(out: impl Write, d: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(dataset_header(d, true, None))?;
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Real and virtual samples in one table with a `source` column, for
/// external projection tools. Rows without a label leave the field empty.
pub fn write_joint_csv(out: impl Write, real: &LabeledDataset, virtual_data: &LabeledDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(dataset_header(real.dim(), true, Some("source")))?;
    for (data, tag) in [(real, "real"), (virtual_data, "virtual")] {
        for (i, x) in data.features.iter().enumerate() {
            let mut rec: Vec<String> = x.iter().map(|v| fmt_float(*v)).collect();
            rec.push(data.labels.as_ref().map_or(String::new(), |l| l[i].to_string()));
            rec.push(tag.into());
            w.write_record(rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// `round,client_id,loss,strategy` for rounds 1..=N.
pub fn write_loss_trace(out: impl Write, state: &FederationState) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "client_id", "loss", "strategy"])?;
    let strategy = state.strategy.to_string();
    for round in 1..=state.round {
        for c in &state.clients {
            w.write_record([round.to_string(), c.id.to_string(), fmt_float(c.loss_history[round]), strategy.clone()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// `round,i,j,M_ij`, one row per unordered pair and round.
pub fn write_consensus_trace(out: impl Write, entries: &[ConsensusEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "i", "j", "M_ij"])?;
    for e in entries {
        for p in &e.pairs {
            w.write_record([e.round.to_string(), p.i.to_string(), p.j.to_string(), fmt_float(p.gap)])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// `fraction,trial,removed_classes,accuracy`; removed classes are
/// space-separated.
pub fn write_ablation_report(out: impl Write, report: &AblationReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fraction", "trial", "removed_classes", "accuracy"])?;
    for r in &report.rows {
        let removed: Vec<String> = r.removed_classes.iter().map(|c| c.to_string()).collect();
        w.write_record([fmt_float(r.fraction), r.trial.to_string(), removed.join(" "), fmt_float(r.accuracy)])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(out: impl Write, value: &T) -> Result<()> {
    let mut out = out;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io("<json>", e))?;
    Ok(())
}

/// Create (truncate) a file for buffered writing.
pub fn create(path: impl AsRef<Path>) -> Result<BufWriter<File>> {
    let path = path.as_ref();
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}
