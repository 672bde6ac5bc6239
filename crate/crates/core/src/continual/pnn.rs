//! Progressive columns: one frozen backbone+head column per task, with
//! linear lateral adapters feeding each prior column's features into the new
//! column's head hidden layer. Prior columns never receive gradients, so
//! earlier tasks cannot degrade.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_windows, SplitSel, TaskDataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, MultiTaskModel, TaskId, Window};
use crate::nd::{SgdState, Tape, Tensor};

use super::eval::{self, TaskPredictor};
use super::{PhaseLog, TrainLog, TrainParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnnColumn {
    pub task: TaskId,
    /// Backbone plus this task's head.
    model: MultiTaskModel,
    /// Lateral adapters, one per prior column: [feature_dim x head_hidden].
    laterals: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnnModel {
    config: ModelConfig,
    columns: Vec<PnnColumn>,
    init_seed: u64,
}

impl PnnModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.head_mode != crate::models::HeadMode::TaskSpecific {
            return Err(Error::Config("pnn requires task-specific heads".into()));
        }
        Ok(PnnModel { config, columns: Vec::new(), init_seed: seed })
    }

    pub fn column_count(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, idx: usize) -> &PnnColumn {
        &self.columns[idx]
    }

    fn column_for(&self, task: TaskId) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.task == task)
            .ok_or_else(|| Error::Usage(format!("no pnn column for task {task}")))
    }

    /// Add a fresh column for `task` with lateral adapters from every
    /// existing column.
    pub fn add_column(&mut self, task: TaskId) -> Result<()> {
        if self.columns.iter().any(|c| c.task == task) {
            return Err(Error::Usage(format!("task {task} already has a column")));
        }
        let idx = self.columns.len();
        let col_seed = derive_seed(self.init_seed, &format!("col{idx}"));
        let mut model = MultiTaskModel::new(self.config.clone(), col_seed)?;
        model.add_task_head(task)?;
        let feature_dim = self.config.backbone.feature_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(col_seed, "laterals"));
        let laterals = (0..idx)
            .map(|_| {
                Tensor::kaiming_uniform(
                    vec![feature_dim, self.config.head_hidden],
                    feature_dim,
                    &mut rng,
                )
            })
            .collect();
        self.columns.push(PnnColumn { task, model, laterals });
        Ok(())
    }

    /// Frozen prior-column features for a batch, one [B x F] tensor per
    /// prior column.
    fn prior_features(&self, col_idx: usize, windows: &[&Window]) -> Result<Vec<Tensor>> {
        let f_dim = self.config.backbone.feature_dim();
        let mut out = Vec::with_capacity(col_idx);
        for prior in &self.columns[..col_idx] {
            let mut data = Vec::with_capacity(windows.len() * f_dim);
            for w in windows {
                data.extend_from_slice(prior.model.backbone_features(w)?.data());
            }
            out.push(Tensor::new(vec![windows.len(), f_dim], data)?);
        }
        Ok(out)
    }

    /// Forward for one column over a batch. Prior features enter as
    /// constants; gradients reach only this column's parameters.
    fn forward(
        &self,
        col_idx: usize,
        windows: &[&Window],
        prior_feats: &[Tensor],
    ) -> Result<(Tape, std::collections::BTreeMap<String, crate::nd::NodeId>, crate::nd::NodeId)>
    {
        let column = &self.columns[col_idx];
        let task = column.task;
        let mut tape = Tape::new();
        let binding = column.model.bind_params(&mut tape, &BTreeSet::from([task]))?;
        let mut nodes: std::collections::BTreeMap<String, crate::nd::NodeId> =
            binding.iter().map(|(n, id)| (n.clone(), *id)).collect();
        for (j, lat) in column.laterals.iter().enumerate() {
            nodes.insert(format!("lateral{j}"), tape.leaf(lat.clone()));
        }
        let input = tape.leaf(column.model.stack_inputs(windows)?);
        let feats = column.model.features_graph(&mut tape, &binding, input, windows.len())?;
        let lin1 = tape.matmul(feats, nodes[&format!("head.{task}.w1")])?;
        let mut pre = tape.add_bias(lin1, nodes[&format!("head.{task}.b1")])?;
        for (j, feat) in prior_feats.iter().enumerate() {
            let leaf = tape.leaf(feat.clone());
            let lat_term = tape.matmul(leaf, nodes[&format!("lateral{j}")])?;
            pre = tape.add(pre, lat_term)?;
        }
        let act = tape.relu(pre)?;
        let lin2 = tape.matmul(act, nodes[&format!("head.{task}.w2")])?;
        let out = tape.add_bias(lin2, nodes[&format!("head.{task}.b2")])?;
        Ok((tape, nodes, out))
    }
}

impl TaskPredictor for PnnModel {
    fn predict_windows(&self, task: TaskId, windows: &[&Window]) -> Result<Vec<f64>> {
        let col_idx = self.column_for(task)?;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            let prior = self.prior_features(col_idx, chunk)?;
            let (tape, _, pred) = self.forward(col_idx, chunk, &prior)?;
            out.extend_from_slice(tape.value(pred).data());
        }
        Ok(out)
    }
}

/// Task-incremental training of a progressive-column ensemble. Each task
/// trains only its own column (and that column's lateral adapters).
pub fn train_pnn(
    config: ModelConfig,
    datasets: &[TaskDataset],
    params: &TrainParams,
    seed: u64,
) -> Result<(PnnModel, TrainLog)> {
    params.validate()?;
    if datasets.is_empty() {
        return Err(Error::Data("no tasks".into()));
    }
    let t_len = config.backbone.window_length;
    let mut model = PnnModel::new(config, derive_seed(seed, "pnn"))?;
    let mut log = TrainLog::default();

    for (pos0, ds) in datasets.iter().enumerate() {
        let pos = pos0 + 1;
        let task = ds.train_val.task;
        let train_windows = make_windows(&ds.train_val, t_len, SplitSel::Train);
        if train_windows.is_empty() {
            return Err(Error::Data(format!("task {task}: empty training split")));
        }
        let val_windows = make_windows(&ds.train_val, t_len, SplitSel::Validation);
        model.add_column(task)?;
        let col_idx = model.column_count() - 1;

        // Prior columns are frozen: their features per window are constants
        // for the whole phase.
        let train_refs: Vec<&Window> = train_windows.iter().collect();
        let prior_train = model.prior_features(col_idx, &train_refs)?;
        let val_refs: Vec<&Window> = val_windows.iter().collect();

        let mut optimizer = SgdState::new(params.learning_rate, params.momentum)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("pnn.task{pos}")));
        let mut phase = PhaseLog {
            label: format!("pnn.task{task}"),
            epoch_train_losses: vec![],
            epoch_val_losses: vec![],
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            stopped_early: false,
            rehearsal_original_seen: 0,
            rehearsal_prospective_seen: 0,
            rehearsal_noise_seen: 0,
        };
        let mut best: Option<(MultiTaskModel, Vec<Tensor>)> = None;
        let mut patience_left = params.patience;
        let f_dim = model.config.backbone.feature_dim();

        for epoch in 0..params.max_epochs {
            let mut order: Vec<usize> = (0..train_windows.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(params.batch_size) {
                let windows: Vec<&Window> = chunk.iter().map(|&i| &train_windows[i]).collect();
                let prior: Vec<Tensor> = prior_train
                    .iter()
                    .map(|feats| {
                        let mut data = Vec::with_capacity(chunk.len() * f_dim);
                        for &i in chunk {
                            data.extend_from_slice(feats.row(i));
                        }
                        Tensor::new(vec![chunk.len(), f_dim], data)
                    })
                    .collect::<Result<_>>()?;
                let (mut tape, nodes, pred) = model.forward(col_idx, &windows, &prior)?;
                let y: Vec<f64> = windows.iter().map(|w| w.target).collect();
                let target = tape.leaf(Tensor::new(vec![windows.len(), 1], y)?);
                let diff = tape.sub(pred, target)?;
                let sq = tape.mul(diff, diff)?;
                let loss = tape.sum(sq)?;
                epoch_loss += tape.value(loss).scalar_value();
                let node_grads = tape.backward(loss)?;
                let mut grads = std::collections::BTreeMap::new();
                for (name, node) in &nodes {
                    if let Some(g) = node_grads.get(*node) {
                        grads.insert(name.clone(), g.clone());
                    }
                }
                let column = &mut model.columns[col_idx];
                {
                    let mut refs = column.model.params_mut();
                    optimizer
                        .step(refs.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), &grads)?;
                }
                {
                    let mut refs: Vec<(String, &mut Tensor)> = column
                        .laterals
                        .iter_mut()
                        .enumerate()
                        .map(|(j, t)| (format!("lateral{j}"), t))
                        .collect();
                    optimizer
                        .step(refs.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), &grads)?;
                }
            }
            phase.epoch_train_losses.push(epoch_loss / train_windows.len() as f64);

            let val_loss = if val_refs.is_empty() {
                *phase.epoch_train_losses.last().unwrap()
            } else {
                eval::mse(&model, task, &val_refs)?
            };
            phase.epoch_val_losses.push(val_loss);
            if val_loss < phase.best_val_loss {
                phase.best_val_loss = val_loss;
                phase.best_epoch = epoch;
                let col = &model.columns[col_idx];
                best = Some((col.model.clone(), col.laterals.clone()));
                patience_left = params.patience;
            } else {
                patience_left = patience_left.saturating_sub(1);
                if patience_left == 0 {
                    phase.stopped_early = true;
                    break;
                }
            }
        }
        if let Some((m, lats)) = best {
            let col = &mut model.columns[col_idx];
            col.model = m;
            col.laterals = lats;
        }
        log.phases.push(phase);

        super::record_error_row(&mut log.error_matrix, &model, datasets, pos, t_len)?;
    }

    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SuiteParams, TaskSpec};
    use crate::models::{BackboneConfig, BackboneKind, HeadMode};

    fn tiny_datasets(n: usize) -> Vec<TaskDataset> {
        let params = SuiteParams {
            sensor_dim: 4,
            samples_per_task: 120,
            test_samples: 60,
            noise: 0.02,
            seed: 31,
        };
        (0..n)
            .map(|t| {
                let spec = TaskSpec {
                    task: t,
                    speed: 0.05 + 0.03 * t as f64,
                    incline: t as f64 - 1.0,
                    waveform: 0.0,
                    sensor_dim: params.sensor_dim,
                    samples: params.samples_per_task,
                    noise: params.noise,
                    seed: crate::derive_seed(params.seed, &format!("task{t}")),
                    session: 0,
                };
                generate_dataset(&spec, params.test_samples).unwrap()
            })
            .collect()
    }

    fn tiny_config() -> ModelConfig {
        let mut backbone = BackboneConfig::default_for(BackboneKind::Mlp, 4, 5);
        backbone.hidden_channels = 12;
        ModelConfig { backbone, head_mode: HeadMode::TaskSpecific, head_hidden: 8 }
    }

    #[test]
    fn test_prior_columns_bit_identical_after_new_task() {
        let datasets = tiny_datasets(3);
        let params = TrainParams { max_epochs: 4, batch_size: 32, ..Default::default() };
        let (model, log) = train_pnn(tiny_config(), &datasets, &params, 7).unwrap();
        assert_eq!(model.column_count(), 3);
        // retrain first two tasks only; their columns must match the full run
        let (model2, _) = train_pnn(tiny_config(), &datasets[..2], &params, 7).unwrap();
        assert_eq!(model.column(0), model2.column(0));
        assert_eq!(model.column(1), model2.column(1));
        // frozen columns: eps_i(j) identical for all i >= j
        let m = &log.error_matrix;
        for j in 1..=2usize {
            let first = m.get(j, j).unwrap();
            for i in j..=3 {
                assert!((m.get(i, j).unwrap() - first).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn test_unknown_column_is_error() {
        let datasets = tiny_datasets(1);
        let params = TrainParams { max_epochs: 2, batch_size: 32, ..Default::default() };
        let (model, _) = train_pnn(tiny_config(), &datasets, &params, 7).unwrap();
        let windows = make_windows(&datasets[0].test, 5, SplitSel::All);
        let refs: Vec<&Window> = windows.iter().collect();
        assert!(model.predict_windows(9, &refs[..1]).is_err());
    }
}
