//! Task-incremental and joint training with rehearsal, plus the baseline
//! continual-learning strategies.
//!
//! The incremental loop adds tasks one at a time: a fresh head is created
//! (task-specific mode), the model is trained on the task's training split
//! mixed with task-balanced rehearsal minibatches, a per-task dynamics model
//! is fitted, and the rehearsal buffer is rebuilt for all tasks seen so far.
//! Rehearsal entries are either stored validation samples (er), pairs of
//! stored and imagined samples (prospective), or stored samples plus
//! noise-augmented copies (noise_aug). EWC/SI add quadratic penalties, GEM
//! projects conflicting gradients, PNN lives in its own module.

pub mod buffer;
pub mod eval;
pub mod gem;
pub mod pnn;
pub mod regularizers;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_windows, transition_indices, SplitSel, TaskDataset, TaskSeries};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::ErrorMatrix;
use crate::models::{MultiTaskModel, ProspectiveModel, TaskId, Window};
use crate::nd::{SgdState, Tape, Tensor};

use buffer::{reservoir_sample, Provenance, RehearsalBuffer, RehearsalEntry};
use regularizers::{EwcState, SiState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Plain task-incremental training, no forgetting counter-measure.
    None,
    /// Conventional experience replay of stored validation samples.
    Er,
    /// Prospective rehearsal: stored samples paired with imagined ones.
    Prospective,
    /// Stored samples plus Gaussian-noise-augmented copies.
    NoiseAug,
    Ewc,
    Si,
    Gem,
    Pnn,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::Er => "er",
            StrategyKind::Prospective => "prospective",
            StrategyKind::NoiseAug => "noise_aug",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Si => "si",
            StrategyKind::Gem => "gem",
            StrategyKind::Pnn => "pnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => StrategyKind::None,
            "er" => StrategyKind::Er,
            "prospective" => StrategyKind::Prospective,
            "noise_aug" => StrategyKind::NoiseAug,
            "ewc" => StrategyKind::Ewc,
            "si" => StrategyKind::Si,
            "gem" => StrategyKind::Gem,
            "pnn" => StrategyKind::Pnn,
            other => return Err(Error::Config(format!("unknown strategy '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Penalty strength for ewc/si.
    pub lambda: f64,
    /// Episodic memory size per task for gem.
    pub gem_memory: usize,
    /// Noise ratio L for noise_aug.
    pub noise_level: f64,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        let lambda = match kind {
            StrategyKind::Ewc => 100.0,
            StrategyKind::Si => 1.0,
            _ => 0.0,
        };
        StrategyConfig {
            kind,
            lambda,
            gem_memory: gem::DEFAULT_MEMORY_PER_TASK,
            noise_level: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("strategy lambda must be >= 0, got {}", self.lambda)));
        }
        if self.noise_level < 0.0 {
            return Err(Error::Config("noise_level must be >= 0".into()));
        }
        Ok(())
    }

    pub fn uses_buffer(&self) -> bool {
        matches!(self.kind, StrategyKind::Er | StrategyKind::Prospective | StrategyKind::NoiseAug)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Early-stopping patience in epochs, on current-task validation loss.
    pub patience: usize,
    pub max_epochs: usize,
    pub buffer_capacity: usize,
    /// Imagined steps per rehearsal window; 1 replaces only the final step.
    pub imagination_horizon: usize,
    /// Samples for the diagonal Fisher estimate.
    pub fisher_samples: usize,
    pub si_xi: f64,
    /// Train the dynamics model even when the strategy does not need it
    /// (closed-loop evaluation wants one).
    pub always_train_dynamics: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 100,
            patience: 10,
            max_epochs: 150,
            buffer_capacity: buffer::DEFAULT_CAPACITY,
            imagination_horizon: 1,
            fisher_samples: 1000,
            si_xi: regularizers::DEFAULT_SI_XI,
            always_train_dynamics: false,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.imagination_horizon == 0 {
            return Err(Error::Config("imagination_horizon must be >= 1".into()));
        }
        SgdState::new(self.learning_rate, self.momentum).map(|_| ())
    }
}

/// Loss trace of one training phase (one task, or one joint phase).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseLog {
    pub label: String,
    pub epoch_train_losses: Vec<f64>,
    pub epoch_val_losses: Vec<f64>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Rehearsal samples consumed, by provenance.
    pub rehearsal_original_seen: usize,
    pub rehearsal_prospective_seen: usize,
    pub rehearsal_noise_seen: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub phases: Vec<PhaseLog>,
    pub error_matrix: ErrorMatrix,
}

pub struct IncrementalOutcome {
    pub model: MultiTaskModel,
    pub g_models: BTreeMap<TaskId, ProspectiveModel>,
    pub buffer: RehearsalBuffer,
    pub log: TrainLog,
}

struct PoolSample<'a> {
    window: &'a Window,
    provenance: Option<Provenance>,
}

struct TrainPool<'a> {
    task: TaskId,
    samples: Vec<PoolSample<'a>>,
    /// Pools that define the epoch length; others cycle.
    paces: bool,
}

/// Cycling, seeded-shuffle iterator over a pool.
struct PoolCursor {
    order: Vec<usize>,
    pos: usize,
}

impl PoolCursor {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        PoolCursor { order, pos: 0 }
    }

    fn next_indices(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            if self.pos >= self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct RegState<'a> {
    ewc: Option<(&'a EwcState, f64)>,
    si: Option<(&'a mut SiState, f64)>,
    gem_memory: Option<(&'a BTreeMap<TaskId, Vec<Window>>, TaskId)>,
}

impl RegState<'_> {
    fn none() -> RegState<'static> {
        RegState { ewc: None, si: None, gem_memory: None }
    }
}

/// Mean squared validation error across the given per-task window sets.
fn validation_loss(model: &MultiTaskModel, val: &[(TaskId, Vec<&Window>)]) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (task, windows) in val {
        if windows.is_empty() {
            continue;
        }
        acc += eval::mse(model, *task, windows)? * windows.len() as f64;
        count += windows.len();
    }
    if count == 0 {
        return Err(Error::Data("validation loss over empty window sets".into()));
    }
    Ok(acc / count as f64)
}

/// Gradient of the mean squared error over a task's windows, by parameter
/// name. Used for GEM memory gradients.
fn memory_gradient(
    model: &MultiTaskModel,
    task: TaskId,
    windows: &[&Window],
) -> Result<BTreeMap<String, Tensor>> {
    let mut tape = Tape::new();
    let tasks = BTreeSet::from([task]);
    let binding = model.bind_params(&mut tape, &tasks)?;
    let (_, pred) = model.forward_graph(&mut tape, &binding, task, windows)?;
    let y: Vec<f64> = windows.iter().map(|w| w.target).collect();
    let target = tape.leaf(Tensor::new(vec![windows.len(), 1], y)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq)?;
    let grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, node) in binding.iter() {
        if let Some(g) = grads.get(*node) {
            out.insert(name.clone(), g.clone());
        }
    }
    Ok(out)
}

fn flatten_by_names(map: &BTreeMap<String, Tensor>, layout: &[(String, usize)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.iter().map(|(_, n)| n).sum());
    for (name, numel) in layout {
        match map.get(name) {
            Some(t) => out.extend_from_slice(t.data()),
            None => out.extend(std::iter::repeat(0.0).take(*numel)),
        }
    }
    out
}

fn unflatten_into(flat: &[f64], layout: &[(String, usize)], map: &mut BTreeMap<String, Tensor>) {
    let mut offset = 0;
    for (name, numel) in layout {
        if let Some(t) = map.get_mut(name) {
            t.data_mut().copy_from_slice(&flat[offset..offset + numel]);
        }
        offset += numel;
    }
}

/// One gradient step over a mixed minibatch; returns (summed loss, samples).
fn train_step(
    model: &mut MultiTaskModel,
    optimizer: &mut SgdState,
    groups: &[(TaskId, Vec<&Window>)],
    reg: &mut RegState<'_>,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let tasks: BTreeSet<TaskId> = groups.iter().map(|(t, _)| *t).collect();
    let binding = model.bind_params(&mut tape, &tasks)?;
    let mut total: Option<crate::nd::NodeId> = None;
    let mut count = 0usize;
    for (task, windows) in groups {
        if windows.is_empty() {
            continue;
        }
        let (_, pred) = model.forward_graph(&mut tape, &binding, *task, windows)?;
        let y: Vec<f64> = windows.iter().map(|w| w.target).collect();
        let target = tape.leaf(Tensor::new(vec![windows.len(), 1], y)?);
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let group_loss = tape.sum(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, group_loss)?,
            None => group_loss,
        });
        count += windows.len();
    }
    let Some(loss_node) = total else {
        return Err(Error::Data("empty minibatch".into()));
    };
    let loss_value = tape.value(loss_node).scalar_value();
    if !loss_value.is_finite() {
        return Err(Error::non_finite("train_step", "minibatch loss"));
    }
    let node_grads = tape.backward(loss_node)?;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, node) in binding.iter() {
        if let Some(g) = node_grads.get(*node) {
            grads.insert(name.clone(), g.clone());
        }
    }

    let mut penalty = 0.0;
    if reg.ewc.is_some() || reg.si.is_some() {
        let params = model.param_map();
        if let Some((ewc, lambda)) = reg.ewc {
            penalty += ewc.penalty(&params, lambda);
            ewc.penalty_grad_into(&params, lambda, &mut grads);
        }
        if let Some((si, lambda)) = &mut reg.si {
            penalty += si.penalty(&params, *lambda);
            si.penalty_grad_into(&params, *lambda, &mut grads);
        }
    }

    if let Some((memory, current_task)) = reg.gem_memory {
        let prior: Vec<TaskId> =
            memory.keys().copied().filter(|t| *t != current_task).collect();
        if !prior.is_empty() {
            let layout: Vec<(String, usize)> = {
                let mut v = Vec::new();
                model.visit_params(&mut |name, t| v.push((name, t.numel())));
                v
            };
            let mut flat = flatten_by_names(&grads, &layout);
            let mut memory_flat = Vec::with_capacity(prior.len());
            for t in prior {
                let mem_windows: Vec<&Window> = memory[&t].iter().collect();
                let mg = memory_gradient(model, t, &mem_windows)?;
                memory_flat.push(flatten_by_names(&mg, &layout));
            }
            gem::project_gradient(&mut flat, &memory_flat)?;
            unflatten_into(&flat, &layout, &mut grads);
        }
    }

    {
        let mut refs = model.params_mut();
        optimizer.step(refs.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), &grads)?;
    }

    if let Some((si, _)) = &mut reg.si {
        let mut deltas = BTreeMap::new();
        for name in grads.keys() {
            if let Some(v) = optimizer.velocity(name) {
                deltas.insert(name.clone(), v.clone());
            }
        }
        si.record_step(&grads, &deltas);
    }

    Ok((loss_value + penalty, count))
}

/// Run one training phase with early stopping; restores the best snapshot.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut MultiTaskModel,
    pools: &[TrainPool<'_>],
    val: &[(TaskId, Vec<&Window>)],
    params: &TrainParams,
    mut reg: RegState<'_>,
    seed: u64,
    label: &str,
) -> Result<PhaseLog> {
    let n_pools = pools.len();
    let base = params.batch_size / n_pools;
    let rem = params.batch_size % n_pools;
    let shares: Vec<usize> =
        (0..n_pools).map(|i| (base + usize::from(i < rem)).max(1)).collect();

    let pace_batches = pools
        .iter()
        .zip(&shares)
        .filter(|(p, _)| p.paces && !p.samples.is_empty())
        .map(|(p, share)| p.samples.len().div_ceil(*share))
        .max()
        .ok_or_else(|| Error::Data(format!("{label}: no pacing pool with samples")))?;

    let mut optimizer = SgdState::new(params.learning_rate, params.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("phase.{label}")));

    let mut log = PhaseLog {
        label: label.to_string(),
        epoch_train_losses: vec![],
        epoch_val_losses: vec![],
        best_val_loss: f64::INFINITY,
        best_epoch: 0,
        stopped_early: false,
        rehearsal_original_seen: 0,
        rehearsal_prospective_seen: 0,
        rehearsal_noise_seen: 0,
    };
    let mut best_params = model.param_map();
    let mut patience_left = params.patience;

    for epoch in 0..params.max_epochs {
        let mut cursors: Vec<PoolCursor> =
            pools.iter().map(|p| PoolCursor::new(p.samples.len(), &mut rng)).collect();
        let mut epoch_loss = 0.0;
        let mut epoch_samples = 0usize;
        for _ in 0..pace_batches {
            let mut groups: Vec<(TaskId, Vec<&Window>)> = Vec::with_capacity(n_pools);
            for ((pool, cursor), share) in pools.iter().zip(&mut cursors).zip(&shares) {
                if pool.samples.is_empty() {
                    continue;
                }
                let idx = cursor.next_indices(*share, &mut rng);
                let mut windows = Vec::with_capacity(idx.len());
                for i in idx {
                    let sample = &pool.samples[i];
                    windows.push(sample.window);
                    match sample.provenance {
                        Some(Provenance::Original) => log.rehearsal_original_seen += 1,
                        Some(Provenance::Prospective) => log.rehearsal_prospective_seen += 1,
                        Some(Provenance::Noise) => log.rehearsal_noise_seen += 1,
                        None => {}
                    }
                }
                groups.push((pool.task, windows));
            }
            let (loss, n) = train_step(model, &mut optimizer, &groups, &mut reg)?;
            epoch_loss += loss;
            epoch_samples += n;
        }
        log.epoch_train_losses.push(epoch_loss / epoch_samples.max(1) as f64);

        let val_loss = validation_loss(model, val)?;
        log.epoch_val_losses.push(val_loss);
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best_params = model.param_map();
            patience_left = params.patience;
        } else {
            patience_left = patience_left.saturating_sub(1);
            if patience_left == 0 {
                log.stopped_early = true;
                break;
            }
        }
    }

    model.set_params(&best_params);
    Ok(log)
}

/// Train the dynamics model g on a task's training split, early-stopping on
/// the validation split.
pub fn train_prospective(
    g: &mut ProspectiveModel,
    series: &TaskSeries,
    params: &TrainParams,
    seed: u64,
) -> Result<PhaseLog> {
    let d = series.sensor_dim();
    let train_idx = transition_indices(series, SplitSel::Train);
    if train_idx.is_empty() {
        return Err(Error::Insufficient(format!(
            "task {}: no consecutive same-trial pairs for dynamics training",
            series.task
        )));
    }
    let val_idx = transition_indices(series, SplitSel::Validation);

    let build_batch = |indices: &[usize]| -> Result<(Tensor, Tensor)> {
        let mut inputs = Vec::with_capacity(indices.len() * (d + 1));
        let mut targets = Vec::with_capacity(indices.len() * d);
        for &k in indices {
            inputs.extend_from_slice(series.state(k));
            inputs.push(series.y[k]);
            targets.extend_from_slice(series.state(k + 1));
        }
        Ok((
            Tensor::new(vec![indices.len(), d + 1], inputs)?,
            Tensor::new(vec![indices.len(), d], targets)?,
        ))
    };

    let eval_mse = |g: &ProspectiveModel, indices: &[usize]| -> Result<f64> {
        if indices.is_empty() {
            return Ok(f64::INFINITY);
        }
        let (inputs, targets) = build_batch(indices)?;
        let mut tape = Tape::new();
        let binding = g.bind_params(&mut tape);
        let x = tape.leaf(inputs);
        let out = g.forward_graph(&mut tape, &binding, x)?;
        let pred = tape.value(out);
        let acc: f64 = pred
            .data()
            .iter()
            .zip(targets.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(acc / indices.len() as f64)
    };

    let mut optimizer = SgdState::new(params.learning_rate, params.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "prospective"));
    let mut log = PhaseLog {
        label: format!("dynamics.task{}", series.task),
        epoch_train_losses: vec![],
        epoch_val_losses: vec![],
        best_val_loss: f64::INFINITY,
        best_epoch: 0,
        stopped_early: false,
        rehearsal_original_seen: 0,
        rehearsal_prospective_seen: 0,
        rehearsal_noise_seen: 0,
    };
    let mut best: BTreeMap<String, Tensor> = BTreeMap::new();
    g.visit_params(&mut |name, t| {
        best.insert(name, t.clone());
    });
    let mut patience_left = params.patience;
    let monitor_val = !val_idx.is_empty();

    for epoch in 0..params.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(params.batch_size) {
            let (inputs, targets) = build_batch(chunk)?;
            let mut tape = Tape::new();
            let binding = g.bind_params(&mut tape);
            let x = tape.leaf(inputs);
            let out = g.forward_graph(&mut tape, &binding, x)?;
            let y = tape.leaf(targets);
            let diff = tape.sub(out, y)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.sum(sq)?;
            epoch_loss += tape.value(loss).scalar_value();
            let node_grads = tape.backward(loss)?;
            let mut grads = BTreeMap::new();
            for (name, node) in binding.iter() {
                if let Some(gr) = node_grads.get(*node) {
                    grads.insert(name.clone(), gr.clone());
                }
            }
            let mut refs = g.params_mut();
            optimizer.step(refs.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), &grads)?;
        }
        log.epoch_train_losses.push(epoch_loss / train_idx.len() as f64);

        let monitored =
            if monitor_val { eval_mse(g, &val_idx)? } else { *log.epoch_train_losses.last().unwrap() };
        log.epoch_val_losses.push(monitored);
        if monitored < log.best_val_loss {
            log.best_val_loss = monitored;
            log.best_epoch = epoch;
            best.clear();
            g.visit_params(&mut |name, t| {
                best.insert(name, t.clone());
            });
            patience_left = params.patience;
        } else {
            patience_left = patience_left.saturating_sub(1);
            if patience_left == 0 {
                log.stopped_early = true;
                break;
            }
        }
    }
    g.visit_params_mut(&mut |name, t| {
        if let Some(b) = best.get(&name) {
            *t = b.clone();
        }
    });
    Ok(log)
}

/// Generate paired rehearsal entries for one task: for each sampled
/// validation step k, the stored window ending at k and a copy whose final
/// `horizon` steps are imagined by rolling g on the model's own predictions.
/// Targets are always the demonstrated y_k.
pub fn build_prospective_rehearsal(
    model: &MultiTaskModel,
    g: &ProspectiveModel,
    series: &TaskSeries,
    pair_count: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<RehearsalEntry>> {
    let t_len = model.config.backbone.window_length;
    let d = series.sensor_dim();
    let task = series.task;
    // candidate target steps: window and its imagined history stay inside
    // the validation split and one trial
    let mut candidates = Vec::new();
    for &(start, end) in &series.trials {
        for k in start..end {
            if k < series.split_m + horizon {
                continue;
            }
            match (k + 1).checked_sub(t_len + horizon) {
                Some(lo) if lo >= start => candidates.push(k),
                _ => {}
            }
        }
    }
    if candidates.is_empty() {
        return Ok(vec![]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("rehearsal.task{task}")));
    let mut picked = reservoir_sample(candidates, pair_count, &mut rng);
    picked.sort_unstable();

    let window_at = |k: usize| -> Result<Window> {
        let lo = k + 1 - t_len;
        let mut data = Vec::with_capacity(t_len * d);
        for row in lo..=k {
            data.extend_from_slice(series.state(row));
        }
        Ok(Window { inputs: Tensor::new(vec![t_len, d], data)?, target: series.y[k], task, step: k })
    };

    let mut entries = Vec::with_capacity(picked.len() * 2);
    if horizon == 1 {
        // batched single-step imagination
        let prev_windows: Vec<Window> =
            picked.iter().map(|&k| window_at(k - 1)).collect::<Result<_>>()?;
        let prev_refs: Vec<&Window> = prev_windows.iter().collect();
        let y_hat = model.predict_batch(task, &prev_refs)?;
        let states: Vec<&[f64]> = picked.iter().map(|&k| series.state(k - 1)).collect();
        let imagined = g.prospect_batch(&states, &y_hat)?;
        for ((&k, x_hat), _) in picked.iter().zip(&imagined).zip(&y_hat) {
            let original = window_at(k)?;
            let mut data = original.inputs.data().to_vec();
            data[(t_len - 1) * d..].copy_from_slice(x_hat);
            let prospective = Window {
                inputs: Tensor::new(vec![t_len, d], data)?,
                target: original.target,
                task,
                step: k,
            };
            entries.push(RehearsalEntry { window: original, provenance: Provenance::Original });
            entries.push(RehearsalEntry { window: prospective, provenance: Provenance::Prospective });
        }
    } else {
        for &k in &picked {
            // roll imagined states forward from k-horizon
            let mut rolled: Vec<Vec<f64>> = Vec::with_capacity(horizon);
            let mut window = window_at(k - horizon)?;
            for _ in 0..horizon {
                let y_hat = model.predict(task, &window)?;
                let last = window.inputs.row(t_len - 1).to_vec();
                let x_hat = g.prospect(&last, y_hat)?;
                let mut data = window.inputs.data()[d..].to_vec();
                data.extend_from_slice(&x_hat);
                window = Window {
                    inputs: Tensor::new(vec![t_len, d], data)?,
                    target: 0.0,
                    task,
                    step: window.step + 1,
                };
                rolled.push(x_hat);
            }
            let original = window_at(k)?;
            let mut data = original.inputs.data().to_vec();
            for (i, x_hat) in rolled.iter().enumerate() {
                let row = t_len - horizon + i;
                data[row * d..(row + 1) * d].copy_from_slice(x_hat);
            }
            let prospective = Window {
                inputs: Tensor::new(vec![t_len, d], data)?,
                target: original.target,
                task,
                step: k,
            };
            entries.push(RehearsalEntry { window: original, provenance: Provenance::Original });
            entries.push(RehearsalEntry { window: prospective, provenance: Provenance::Prospective });
        }
    }
    Ok(entries)
}

/// Gaussian-noise copies of the given entries: per-feature noise scale is
/// `level` times that feature's standard deviation over the entries.
pub fn noise_augment(
    entries: &[RehearsalEntry],
    level: f64,
    seed: u64,
) -> Result<Vec<RehearsalEntry>> {
    if level < 0.0 {
        return Err(Error::Config("noise level must be >= 0".into()));
    }
    if entries.is_empty() {
        return Ok(vec![]);
    }
    let d = entries[0].window.inputs.cols();
    // per-feature std over all rows of all entry windows
    let mut count = 0usize;
    let mut mean = vec![0.0; d];
    for e in entries {
        for r in 0..e.window.inputs.rows() {
            for (m, v) in mean.iter_mut().zip(e.window.inputs.row(r)) {
                *m += v;
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; d];
    for e in entries {
        for r in 0..e.window.inputs.rows() {
            for (v, (x, m)) in var.iter_mut().zip(e.window.inputs.row(r).iter().zip(&mean)) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let sigma: Vec<f64> = var.iter().map(|v| (v / count as f64).sqrt() * level).collect();

    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "noise_augment"));
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let rows = e.window.inputs.rows();
        let mut data = e.window.inputs.data().to_vec();
        for r in 0..rows {
            for (c, s) in sigma.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                data[r * d + c] += z * s;
            }
        }
        out.push(RehearsalEntry {
            window: Window {
                inputs: Tensor::new(vec![rows, d], data)?,
                target: e.window.target,
                task: e.window.task,
                step: e.window.step,
            },
            provenance: Provenance::Noise,
        });
    }
    Ok(out)
}

/// Sample `count` original validation entries for one task.
fn sample_original_entries(
    series: &TaskSeries,
    window_length: usize,
    count: usize,
    seed: u64,
) -> Vec<RehearsalEntry> {
    let windows = make_windows(series, window_length, SplitSel::Validation);
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("er.task{}", series.task)));
    reservoir_sample(windows, count, &mut rng)
        .into_iter()
        .map(|window| RehearsalEntry { window, provenance: Provenance::Original })
        .collect()
}

/// Validation steps eligible for prospective imagination (window plus its
/// imagined history inside one trial and the validation split).
pub fn prospective_candidate_count(series: &TaskSeries, t_len: usize, horizon: usize) -> usize {
    let mut count = 0;
    for &(start, end) in &series.trials {
        for k in start..end {
            if k < series.split_m + horizon {
                continue;
            }
            if let Some(lo) = (k + 1).checked_sub(t_len + horizon) {
                if lo >= start {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Per-task entry count all rehearsal strategies must match: the quota,
/// capped by what the validation split can actually supply, floored to an
/// even count so original/imagined pairs stay whole.
fn effective_task_quota(quota: usize, series: &TaskSeries, t_len: usize, horizon: usize) -> usize {
    let windows = make_windows(series, t_len, SplitSel::Validation).len();
    let candidates = prospective_candidate_count(series, t_len, horizon);
    let capped = quota.min(windows).min(2 * candidates);
    capped - capped % 2
}

/// Rebuild the buffer for all tasks seen so far, per the strategy's
/// augmentation scheme. Allocation is task-balanced and count-matched across
/// er / prospective / noise_aug.
#[allow(clippy::too_many_arguments)]
fn rebuild_buffer(
    buf: &mut RehearsalBuffer,
    model: &MultiTaskModel,
    g_models: &BTreeMap<TaskId, ProspectiveModel>,
    seen: &[&TaskSeries],
    strategy: &StrategyConfig,
    params: &TrainParams,
    round: usize,
    seed: u64,
) -> Result<()> {
    let t_len = model.config.backbone.window_length;
    let alloc = buf.allocation(seen.len());
    buf.clear();
    for (i, series) in seen.iter().enumerate() {
        let quota = effective_task_quota(alloc[i], series, t_len, params.imagination_horizon);
        let pairs = quota / 2;
        let entry_seed = derive_seed(seed, &format!("buffer.round{round}.task{}", series.task));
        let entries = match strategy.kind {
            StrategyKind::Er => sample_original_entries(series, t_len, quota, entry_seed),
            StrategyKind::Prospective => {
                let g = g_models.get(&series.task).ok_or_else(|| {
                    Error::Usage(format!("no dynamics model for task {}", series.task))
                })?;
                build_prospective_rehearsal(
                    model,
                    g,
                    series,
                    pairs,
                    params.imagination_horizon,
                    entry_seed,
                )?
            }
            StrategyKind::NoiseAug => {
                let originals = sample_original_entries(series, t_len, pairs, entry_seed);
                let copies = noise_augment(&originals, strategy.noise_level, entry_seed)?;
                originals.into_iter().chain(copies).collect()
            }
            _ => vec![],
        };
        buf.set_task_entries(series.task, entries)?;
    }
    Ok(())
}

/// Fill one row of the error matrix: NRMSE on every seen task's test split.
fn record_error_row<P: eval::TaskPredictor>(
    matrix: &mut ErrorMatrix,
    model: &P,
    datasets: &[TaskDataset],
    through: usize,
    window_length: usize,
) -> Result<()> {
    for (j, ds) in datasets.iter().take(through).enumerate() {
        let windows = make_windows(&ds.test, window_length, SplitSel::All);
        let refs = eval::as_refs(&windows);
        let err = eval::nrmse(model, ds.test.task, &refs)?;
        matrix.set(through, j + 1, err);
    }
    Ok(())
}

/// Algorithm-1-style task-incremental training under any strategy except
/// pnn (which has its own model type).
pub fn train_task_incremental(
    mut model: MultiTaskModel,
    datasets: &[TaskDataset],
    strategy: &StrategyConfig,
    params: &TrainParams,
    seed: u64,
) -> Result<IncrementalOutcome> {
    strategy.validate()?;
    params.validate()?;
    if strategy.kind == StrategyKind::Pnn {
        return Err(Error::Usage("pnn uses continual::pnn::train_pnn".into()));
    }
    if datasets.is_empty() {
        return Err(Error::Data("no tasks".into()));
    }
    let t_len = model.config.backbone.window_length;
    let mut buffer = RehearsalBuffer::new(params.buffer_capacity);
    let mut g_models: BTreeMap<TaskId, ProspectiveModel> = BTreeMap::new();
    let mut ewc = EwcState::default();
    let mut si = SiState::default();
    let mut gem_memory: BTreeMap<TaskId, Vec<Window>> = BTreeMap::new();
    let mut log = TrainLog::default();

    let needs_dynamics =
        strategy.kind == StrategyKind::Prospective || params.always_train_dynamics;

    for (pos0, ds) in datasets.iter().enumerate() {
        let pos = pos0 + 1;
        let task = ds.train_val.task;
        let train_windows = make_windows(&ds.train_val, t_len, SplitSel::Train);
        if train_windows.is_empty() {
            return Err(Error::Data(format!("task {task}: empty training split")));
        }
        let val_windows = make_windows(&ds.train_val, t_len, SplitSel::Validation);

        if model.head_mode() == crate::models::HeadMode::TaskSpecific {
            model.add_task_head(task)?;
        }
        if strategy.kind == StrategyKind::Si {
            si.begin_task(&model.param_map());
        }

        let mut pools = vec![TrainPool {
            task,
            samples: train_windows
                .iter()
                .map(|w| PoolSample { window: w, provenance: None })
                .collect(),
            paces: true,
        }];
        for buffered in buffer.task_ids() {
            let samples: Vec<PoolSample<'_>> = buffer
                .task_entries(buffered)
                .iter()
                .map(|e| PoolSample { window: &e.window, provenance: Some(e.provenance) })
                .collect();
            if !samples.is_empty() {
                pools.push(TrainPool { task: buffered, samples, paces: false });
            }
        }

        let val_refs: Vec<(TaskId, Vec<&Window>)> = vec![(task, val_windows.iter().collect())];
        let reg = RegState {
            ewc: (strategy.kind == StrategyKind::Ewc && !ewc.tasks.is_empty())
                .then_some((&ewc, strategy.lambda)),
            si: (strategy.kind == StrategyKind::Si).then_some((&mut si, strategy.lambda)),
            gem_memory: (strategy.kind == StrategyKind::Gem).then_some((&gem_memory, task)),
        };
        let phase_log = run_phase(
            &mut model,
            &pools,
            &val_refs,
            params,
            reg,
            derive_seed(seed, &format!("task{pos}")),
            &format!("task{task}"),
        )?;
        log.phases.push(phase_log);

        if needs_dynamics {
            let mut g = ProspectiveModel::new(
                ds.train_val.sensor_dim(),
                ProspectiveModel::DEFAULT_HIDDEN,
                derive_seed(seed, &format!("g.task{task}")),
            );
            let g_log = train_prospective(
                &mut g,
                &ds.train_val,
                params,
                derive_seed(seed, &format!("g.train{pos}")),
            )?;
            log.phases.push(g_log);
            g_models.insert(task, g);
        }

        match strategy.kind {
            StrategyKind::Ewc => {
                ewc.accumulate_task(&model, &train_windows, params.fisher_samples)?;
            }
            StrategyKind::Si => {
                si.end_task(&model.param_map(), params.si_xi);
            }
            StrategyKind::Gem => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    &format!("gem.task{task}"),
                ));
                gem_memory.insert(
                    task,
                    reservoir_sample(train_windows.iter().cloned(), strategy.gem_memory, &mut rng),
                );
            }
            _ => {}
        }

        if strategy.uses_buffer() {
            let seen: Vec<&TaskSeries> =
                datasets.iter().take(pos).map(|d| &d.train_val).collect();
            rebuild_buffer(&mut buffer, &model, &g_models, &seen, strategy, params, pos, seed)?;
            debug_assert!(buffer.total_len() <= buffer.capacity());
            debug_assert!(buffer.balance_spread() <= 1);
        }

        record_error_row(&mut log.error_matrix, &model, datasets, pos, t_len)?;
    }

    Ok(IncrementalOutcome { model, g_models, buffer, log })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RehearsalMode {
    Conventional,
    Prospective,
}

pub struct JointOutcome {
    pub model: MultiTaskModel,
    pub g_models: BTreeMap<TaskId, ProspectiveModel>,
    pub log: TrainLog,
    /// Augmentation samples added per task (budget accounting).
    pub augmentation_counts: BTreeMap<TaskId, usize>,
}

/// Joint multitask training: one run over the union of all tasks, then a
/// refinement pass over training data augmented from the validation splits
/// (stored samples, or stored-plus-imagined pairs under the same budget).
pub fn train_joint(
    mut model: MultiTaskModel,
    datasets: &[TaskDataset],
    mode: RehearsalMode,
    params: &TrainParams,
    seed: u64,
) -> Result<JointOutcome> {
    params.validate()?;
    if datasets.is_empty() {
        return Err(Error::Data("no tasks".into()));
    }
    let t_len = model.config.backbone.window_length;
    let mut log = TrainLog::default();

    if model.head_mode() == crate::models::HeadMode::TaskSpecific {
        for ds in datasets {
            model.add_task_head(ds.train_val.task)?;
        }
    }

    let per_task_train: Vec<Vec<Window>> =
        datasets.iter().map(|ds| make_windows(&ds.train_val, t_len, SplitSel::Train)).collect();
    let per_task_val: Vec<Vec<Window>> =
        datasets.iter().map(|ds| make_windows(&ds.train_val, t_len, SplitSel::Validation)).collect();
    let val_refs: Vec<(TaskId, Vec<&Window>)> = datasets
        .iter()
        .zip(&per_task_val)
        .map(|(ds, v)| (ds.train_val.task, v.iter().collect::<Vec<_>>()))
        .collect();

    // Phase 1: union of training splits.
    let pools: Vec<TrainPool<'_>> = datasets
        .iter()
        .zip(&per_task_train)
        .map(|(ds, windows)| TrainPool {
            task: ds.train_val.task,
            samples: windows.iter().map(|w| PoolSample { window: w, provenance: None }).collect(),
            paces: true,
        })
        .collect();
    let phase1 = run_phase(
        &mut model,
        &pools,
        &val_refs,
        params,
        RegState::none(),
        derive_seed(seed, "joint.phase1"),
        "joint.phase1",
    )?;
    log.phases.push(phase1);

    // Dynamics models for the prospective augmentation.
    let mut g_models: BTreeMap<TaskId, ProspectiveModel> = BTreeMap::new();
    if mode == RehearsalMode::Prospective {
        for (pos, ds) in datasets.iter().enumerate() {
            let task = ds.train_val.task;
            let mut g = ProspectiveModel::new(
                ds.train_val.sensor_dim(),
                ProspectiveModel::DEFAULT_HIDDEN,
                derive_seed(seed, &format!("g.task{task}")),
            );
            let g_log = train_prospective(
                &mut g,
                &ds.train_val,
                params,
                derive_seed(seed, &format!("g.joint{pos}")),
            )?;
            log.phases.push(g_log);
            g_models.insert(task, g);
        }
    }

    // Phase 2: same budget of augmentation per task in both modes.
    let alloc = RehearsalBuffer::new(params.buffer_capacity).allocation(datasets.len());
    let mut augmentation: Vec<Vec<RehearsalEntry>> = Vec::with_capacity(datasets.len());
    let mut augmentation_counts = BTreeMap::new();
    for (i, ds) in datasets.iter().enumerate() {
        let quota = effective_task_quota(
            alloc[i],
            &ds.train_val,
            t_len,
            params.imagination_horizon,
        );
        let entry_seed = derive_seed(seed, &format!("joint.aug.task{}", ds.train_val.task));
        let entries = match mode {
            RehearsalMode::Conventional => {
                sample_original_entries(&ds.train_val, t_len, quota, entry_seed)
            }
            RehearsalMode::Prospective => {
                let g = &g_models[&ds.train_val.task];
                build_prospective_rehearsal(
                    &model,
                    g,
                    &ds.train_val,
                    quota / 2,
                    params.imagination_horizon,
                    entry_seed,
                )?
            }
        };
        augmentation_counts.insert(ds.train_val.task, entries.len());
        augmentation.push(entries);
    }

    let pools2: Vec<TrainPool<'_>> = datasets
        .iter()
        .zip(&per_task_train)
        .zip(&augmentation)
        .map(|((ds, windows), entries)| TrainPool {
            task: ds.train_val.task,
            samples: windows
                .iter()
                .map(|w| PoolSample { window: w, provenance: None })
                .chain(entries.iter().map(|e| PoolSample {
                    window: &e.window,
                    provenance: Some(e.provenance),
                }))
                .collect(),
            paces: true,
        })
        .collect();
    let phase2 = run_phase(
        &mut model,
        &pools2,
        &val_refs,
        params,
        RegState::none(),
        derive_seed(seed, "joint.phase2"),
        "joint.phase2",
    )?;
    log.phases.push(phase2);

    record_error_row(&mut log.error_matrix, &model, datasets, datasets.len(), t_len)?;

    Ok(JointOutcome { model, g_models, log, augmentation_counts })
}


#[cfg(test)]
mod parity_tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::models::{BackboneConfig, BackboneKind, ModelConfig};

    #[test]
    fn test_rehearsal_parity_when_quota_exceeds_validation() {
        // capacity far above the validation supply: all three strategies
        // must still produce identical per-task counts
        let spec = crate::data::TaskSpec {
            task: 0,
            speed: 0.05,
            incline: 0.0,
            waveform: 0.0,
            sensor_dim: 4,
            samples: 200,
            noise: 0.02,
            seed: 3,
            session: 0,
        };
        let datasets: Vec<_> = (0..2)
            .map(|t| {
                let mut s = spec.clone();
                s.task = t;
                s.seed = crate::derive_seed(3, &format!("t{t}"));
                generate_dataset(&s, 100).unwrap()
            })
            .collect();
        let mut backbone = BackboneConfig::default_for(BackboneKind::Mlp, 4, 5);
        backbone.hidden_channels = 8;
        let config = ModelConfig {
            backbone,
            head_mode: crate::models::HeadMode::TaskSpecific,
            head_hidden: 8,
        };
        let params = TrainParams {
            max_epochs: 2,
            batch_size: 40,
            buffer_capacity: 3000, // quota 1500/task >> ~40 val windows
            ..Default::default()
        };
        let mut counts = Vec::new();
        for kind in [StrategyKind::Er, StrategyKind::Prospective, StrategyKind::NoiseAug] {
            let out = train_task_incremental(
                MultiTaskModel::new(config.clone(), 1).unwrap(),
                &datasets,
                &StrategyConfig::new(kind),
                &params,
                9,
            )
            .unwrap();
            counts.push((kind, out.buffer.counts()));
        }
        assert_eq!(counts[0].1, counts[1].1, "er vs prospective: {counts:?}");
        assert_eq!(counts[1].1, counts[2].1, "prospective vs noise_aug: {counts:?}");
        assert!(counts[0].1.values().all(|&c| c > 0));
    }
}
