//! Model evaluation helpers shared by the trainers and the experiment runner.

use crate::error::{Error, Result};
use crate::metrics;
use crate::models::{MultiTaskModel, TaskId, Window};

/// Anything that can predict targets for one task's windows; implemented by
/// the standard multitask model and the PNN column ensemble.
pub trait TaskPredictor {
    fn predict_windows(&self, task: TaskId, windows: &[&Window]) -> Result<Vec<f64>>;
}

impl TaskPredictor for MultiTaskModel {
    fn predict_windows(&self, task: TaskId, windows: &[&Window]) -> Result<Vec<f64>> {
        // keep tape sizes bounded
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            out.extend(self.predict_batch(task, chunk)?);
        }
        Ok(out)
    }
}

pub fn targets(windows: &[&Window]) -> Vec<f64> {
    windows.iter().map(|w| w.target).collect()
}

pub fn mse<P: TaskPredictor + ?Sized>(model: &P, task: TaskId, windows: &[&Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("mse over empty window set".into()));
    }
    let preds = model.predict_windows(task, windows)?;
    let acc: f64 = preds
        .iter()
        .zip(windows)
        .map(|(p, w)| (p - w.target) * (p - w.target))
        .sum();
    Ok(acc / windows.len() as f64)
}

pub fn nrmse<P: TaskPredictor + ?Sized>(
    model: &P,
    task: TaskId,
    windows: &[&Window],
) -> Result<f64> {
    let preds = model.predict_windows(task, windows)?;
    metrics::nrmse(&targets(windows), &preds)
}

pub fn r_squared<P: TaskPredictor + ?Sized>(
    model: &P,
    task: TaskId,
    windows: &[&Window],
) -> Result<f64> {
    let preds = model.predict_windows(task, windows)?;
    metrics::r_squared(&targets(windows), &preds)
}

pub fn as_refs(windows: &[Window]) -> Vec<&Window> {
    windows.iter().collect()
}
