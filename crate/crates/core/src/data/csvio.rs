//! CSV ingestion and export.
//!
//! Format: header `feature_0,...,feature_{d-1},target,trial_id`, UTF-8,
//! decimal points. Column order is free; columns are mapped by name. Trial
//! boundaries come from `trial_id` transitions.

use std::path::Path;

use crate::data::{TaskSeries, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::models::TaskId;
use crate::nd::Tensor;

struct Schema {
    feature_cols: Vec<usize>,
    target_col: usize,
    trial_col: usize,
}

fn parse_header(header: &csv::StringRecord) -> Result<Schema> {
    let mut features: Vec<(usize, usize)> = Vec::new();
    let mut target = None;
    let mut trial = None;
    for (idx, name) in header.iter().enumerate() {
        let name = name.trim();
        if name == "target" {
            target = Some(idx);
        } else if name == "trial_id" {
            trial = Some(idx);
        } else if let Some(num) = name.strip_prefix("feature_") {
            let i: usize = num
                .parse()
                .map_err(|_| Error::Data(format!("bad feature column name '{name}'")))?;
            features.push((i, idx));
        } else {
            return Err(Error::Data(format!("unexpected column '{name}'")));
        }
    }
    let target_col = target.ok_or_else(|| Error::Data("missing column 'target'".into()))?;
    let trial_col = trial.ok_or_else(|| Error::Data("missing column 'trial_id'".into()))?;
    if features.is_empty() {
        return Err(Error::Data("no feature_<i> columns in header".into()));
    }
    features.sort();
    for (expect, &(i, _)) in features.iter().enumerate() {
        if i != expect {
            return Err(Error::Data(format!("feature columns not contiguous: missing feature_{expect}")));
        }
    }
    Ok(Schema {
        feature_cols: features.into_iter().map(|(_, idx)| idx).collect(),
        target_col,
        trial_col,
    })
}

fn parse_cell(record: &csv::StringRecord, col: usize, line: usize) -> Result<f64> {
    let raw = record
        .get(col)
        .ok_or_else(|| Error::Data(format!("line {line}: ragged row, missing column {col}")))?;
    raw.trim()
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("line {line}: non-numeric cell '{raw}'")))
}

/// Load one task's series. `task` is assigned by the caller; the train/
/// validation boundary follows the default 0.8 split ratio.
pub fn load_csv(path: &Path, task: TaskId) -> Result<TaskSeries> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let schema = parse_header(reader.headers()?)?;
    let d = schema.feature_cols.len();
    let width = d + 2;

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut trials: Vec<(usize, usize)> = Vec::new();
    let mut current_trial: Option<(i64, usize)> = None;
    let mut row_idx = 0usize;
    for (rec_idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = rec_idx + 2; // 1-based, after the header
        if record.len() != width {
            return Err(Error::Data(format!(
                "line {line}: ragged row, expected {width} fields, got {}",
                record.len()
            )));
        }
        for &col in &schema.feature_cols {
            x.push(parse_cell(&record, col, line)?);
        }
        y.push(parse_cell(&record, schema.target_col, line)?);
        let trial_raw = parse_cell(&record, schema.trial_col, line)?;
        let trial_id = trial_raw as i64;
        match current_trial {
            Some((id, start)) if id != trial_id => {
                trials.push((start, row_idx));
                current_trial = Some((trial_id, row_idx));
            }
            None => current_trial = Some((trial_id, 0)),
            _ => {}
        }
        row_idx += 1;
    }
    if let Some((_, start)) = current_trial {
        trials.push((start, row_idx));
    }
    if row_idx == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    let series = TaskSeries {
        task,
        x: Tensor::new(vec![row_idx, d], x)?,
        y,
        split_m: ((DEFAULT_TRAIN_FRACTION * row_idx as f64).round() as usize).min(row_idx - 1),
        trials,
        latent: None,
    };
    series.validate()?;
    Ok(series)
}

/// Export a series in the ingestion format. Floats are written in shortest
/// round-trip form, so export/load is lossless and regeneration is
/// byte-identical.
pub fn export_csv(series: &TaskSeries, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let d = series.sensor_dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("feature_{i}")).collect();
    header.push("target".into());
    header.push("trial_id".into());
    writer.write_record(&header)?;
    for (trial_idx, &(start, end)) in series.trials.iter().enumerate() {
        for k in start..end {
            let mut row: Vec<String> =
                series.state(k).iter().map(|v| format!("{v}")).collect();
            row.push(format!("{}", series.y[k]));
            row.push(format!("{trial_idx}"));
            writer.write_record(&row)?;
        }
    }
    writer.flush()?;
    Ok(())
}
