//! Model zoo: shared backbone variants, task heads, the composed multitask
//! predictor, and the per-task forward-dynamics (prospective) model.
//!
//! All models are plain values over [`Tensor`] parameters. Forward passes
//! build a fresh tape per call; training code binds parameters as tape leaves
//! and reads gradients back by name.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{NodeId, Tape, Tensor};
use crate::derive_seed;

pub type TaskId = usize;

/// One training/evaluation sample: `window_length` consecutive sensor states
/// and the target at the window's final step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    /// [T x d] sensor states x_{k-T+1} .. x_k.
    pub inputs: Tensor,
    /// Target y_k at the final step.
    pub target: f64,
    pub task: TaskId,
    /// Index k of the final step in the source series.
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Linear,
    Mlp,
    Tcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Shared,
    TaskSpecific,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Sensor dimension d.
    pub input_dim: usize,
    /// Window length T.
    pub window_length: usize,
    /// Width of hidden layers (mlp) / channels (tcn) / output features (linear).
    pub hidden_channels: usize,
    /// Number of hidden layers (mlp) or conv layers (tcn).
    pub depth: usize,
    pub kernel_size: usize,
    pub dilation_schedule: Vec<usize>,
}

impl BackboneConfig {
    /// Defaults sized so the three backbone kinds have parameter counts
    /// within +/-10% of each other at d=8, T=10.
    pub fn default_for(kind: BackboneKind, input_dim: usize, window_length: usize) -> Self {
        match kind {
            BackboneKind::Linear => BackboneConfig {
                kind,
                input_dim,
                window_length,
                hidden_channels: 87,
                depth: 1,
                kernel_size: 1,
                dilation_schedule: vec![],
            },
            BackboneKind::Mlp => BackboneConfig {
                kind,
                input_dim,
                window_length,
                hidden_channels: 50,
                depth: 2,
                kernel_size: 1,
                dilation_schedule: vec![],
            },
            BackboneKind::Tcn => BackboneConfig {
                kind,
                input_dim,
                window_length,
                hidden_channels: 32,
                depth: 3,
                kernel_size: 3,
                dilation_schedule: vec![1, 2, 4],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length < 1 {
            return Err(Error::Config("window_length must be >= 1".into()));
        }
        if self.input_dim < 1 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.hidden_channels < 1 || self.depth < 1 {
            return Err(Error::Config("hidden_channels and depth must be >= 1".into()));
        }
        if self.kind == BackboneKind::Tcn {
            if self.dilation_schedule.len() != self.depth {
                return Err(Error::Config(format!(
                    "tcn depth {} needs {} dilations, got {}",
                    self.depth,
                    self.depth,
                    self.dilation_schedule.len()
                )));
            }
            if self.dilation_schedule.iter().any(|&d| d < 1) {
                return Err(Error::Config("dilation must be >= 1".into()));
            }
            let rf = self.receptive_field();
            if rf < self.window_length {
                log::warn!(
                    "tcn receptive field {} is smaller than window length {}; \
                     the backbone cannot see the whole window",
                    rf,
                    self.window_length
                );
            }
        }
        Ok(())
    }

    /// 1 + sum((k-1) * dilation_i); meaningful for tcn.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .dilation_schedule
            .iter()
            .map(|d| (self.kernel_size - 1) * d)
            .sum::<usize>()
    }

    /// Output feature width of the backbone.
    pub fn feature_dim(&self) -> usize {
        self.hidden_channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head_mode: HeadMode,
    /// Hidden width of the two-layer feed-forward heads.
    pub head_hidden: usize,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, head_mode: HeadMode) -> Self {
        ModelConfig { backbone, head_mode, head_hidden: 32 }
    }
}

/// Shared feature extractor f^s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Backbone {
    Linear { w: Tensor, b: Tensor },
    Mlp { layers: Vec<(Tensor, Tensor)> },
    Tcn { kernels: Vec<Tensor>, biases: Vec<Tensor>, dilations: Vec<usize> },
}

impl Backbone {
    fn init(cfg: &BackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = cfg.input_dim * cfg.window_length;
        match cfg.kind {
            BackboneKind::Linear => {
                let w = Tensor::kaiming_uniform(vec![flat, cfg.hidden_channels], flat, &mut rng);
                let b = Tensor::zeros(vec![cfg.hidden_channels]);
                Backbone::Linear { w, b }
            }
            BackboneKind::Mlp => {
                let mut layers = Vec::with_capacity(cfg.depth);
                let mut fan_in = flat;
                for _ in 0..cfg.depth {
                    let w = Tensor::kaiming_uniform(
                        vec![fan_in, cfg.hidden_channels],
                        fan_in,
                        &mut rng,
                    );
                    let b = Tensor::zeros(vec![cfg.hidden_channels]);
                    layers.push((w, b));
                    fan_in = cfg.hidden_channels;
                }
                Backbone::Mlp { layers }
            }
            BackboneKind::Tcn => {
                let mut kernels = Vec::with_capacity(cfg.depth);
                let mut biases = Vec::with_capacity(cfg.depth);
                let mut c_in = cfg.input_dim;
                for _ in 0..cfg.depth {
                    let fan_in = cfg.kernel_size * c_in;
                    kernels.push(Tensor::kaiming_uniform(
                        vec![cfg.kernel_size, c_in, cfg.hidden_channels],
                        fan_in,
                        &mut rng,
                    ));
                    biases.push(Tensor::zeros(vec![cfg.hidden_channels]));
                    c_in = cfg.hidden_channels;
                }
                Backbone::Tcn { kernels, biases, dilations: cfg.dilation_schedule.clone() }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            Backbone::Linear { w, b } => {
                f("backbone.w".into(), w);
                f("backbone.b".into(), b);
            }
            Backbone::Mlp { layers } => {
                for (i, (w, b)) in layers.iter().enumerate() {
                    f(format!("backbone.l{i}.w"), w);
                    f(format!("backbone.l{i}.b"), b);
                }
            }
            Backbone::Tcn { kernels, biases, .. } => {
                for (i, (w, b)) in kernels.iter().zip(biases).enumerate() {
                    f(format!("backbone.conv{i}.w"), w);
                    f(format!("backbone.conv{i}.b"), b);
                }
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Backbone::Linear { w, b } => {
                f("backbone.w".into(), w);
                f("backbone.b".into(), b);
            }
            Backbone::Mlp { layers } => {
                for (i, (w, b)) in layers.iter_mut().enumerate() {
                    f(format!("backbone.l{i}.w"), w);
                    f(format!("backbone.l{i}.b"), b);
                }
            }
            Backbone::Tcn { kernels, biases, .. } => {
                for (i, (w, b)) in kernels.iter_mut().zip(biases.iter_mut()).enumerate() {
                    f(format!("backbone.conv{i}.w"), w);
                    f(format!("backbone.conv{i}.b"), b);
                }
            }
        }
    }
}

/// Two-layer feed-forward task head f_t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Head {
    fn init(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Head {
            w1: Tensor::kaiming_uniform(vec![feature_dim, hidden], feature_dim, &mut rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::kaiming_uniform(vec![hidden, 1], hidden, &mut rng),
            b2: Tensor::zeros(vec![1]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

/// Shared backbone plus task heads; grows a head per task in
/// task-specific mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskModel {
    pub config: ModelConfig,
    backbone: Backbone,
    heads: BTreeMap<TaskId, Head>,
    shared_head: Option<Head>,
    init_seed: u64,
}

/// Tape bindings for a model's parameters, keyed by parameter name.
pub struct GraphBinding {
    nodes: BTreeMap<String, NodeId>,
}

impl GraphBinding {
    pub fn node(&self, name: &str) -> NodeId {
        self.nodes[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }
}

impl MultiTaskModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        let backbone = Backbone::init(&config.backbone, derive_seed(seed, "backbone"));
        let shared_head = match config.head_mode {
            HeadMode::Shared => Some(Head::init(
                config.backbone.feature_dim(),
                config.head_hidden,
                derive_seed(seed, "head.shared"),
            )),
            HeadMode::TaskSpecific => None,
        };
        Ok(MultiTaskModel { config, backbone, heads: BTreeMap::new(), shared_head, init_seed: seed })
    }

    pub fn head_mode(&self) -> HeadMode {
        self.config.head_mode
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.heads.keys().copied().collect()
    }

    pub fn head_count(&self) -> usize {
        match self.config.head_mode {
            HeadMode::Shared => 1,
            HeadMode::TaskSpecific => self.heads.len(),
        }
    }

    /// Create a freshly initialized head for `task`. Existing heads and the
    /// backbone are untouched.
    pub fn add_task_head(&mut self, task: TaskId) -> Result<()> {
        if self.config.head_mode == HeadMode::Shared {
            return Err(Error::Usage("add_task_head on a shared-head model".into()));
        }
        if self.heads.contains_key(&task) {
            return Err(Error::Usage(format!("task {task} already has a head")));
        }
        let head = Head::init(
            self.config.backbone.feature_dim(),
            self.config.head_hidden,
            derive_seed(self.init_seed, &format!("head.{task}")),
        );
        self.heads.insert(task, head);
        Ok(())
    }

    fn head_prefix(&self, task: TaskId) -> Result<String> {
        match self.config.head_mode {
            HeadMode::Shared => Ok("head.shared".into()),
            HeadMode::TaskSpecific => {
                if self.heads.contains_key(&task) {
                    Ok(format!("head.{task}"))
                } else {
                    Err(Error::Usage(format!("no head for task {task}")))
                }
            }
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.backbone.visit_params(f);
        if let Some(h) = &self.shared_head {
            h.visit("head.shared", f);
        }
        for (task, h) in &self.heads {
            h.visit(&format!("head.{task}"), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_params_mut(f);
        if let Some(h) = &mut self.shared_head {
            h.visit_mut("head.shared", f);
        }
        for (task, h) in &mut self.heads {
            h.visit_mut(&format!("head.{task}"), f);
        }
    }

    /// Snapshot of all parameters, keyed by name.
    pub fn param_map(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            out.insert(name, t.clone());
        });
        out
    }

    /// Named mutable references to every parameter, in visit order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        match &mut self.backbone {
            Backbone::Linear { w, b } => {
                out.push(("backbone.w".into(), w));
                out.push(("backbone.b".into(), b));
            }
            Backbone::Mlp { layers } => {
                for (i, (w, b)) in layers.iter_mut().enumerate() {
                    out.push((format!("backbone.l{i}.w"), w));
                    out.push((format!("backbone.l{i}.b"), b));
                }
            }
            Backbone::Tcn { kernels, biases, .. } => {
                for (i, (w, b)) in kernels.iter_mut().zip(biases.iter_mut()).enumerate() {
                    out.push((format!("backbone.conv{i}.w"), w));
                    out.push((format!("backbone.conv{i}.b"), b));
                }
            }
        }
        if let Some(h) = &mut self.shared_head {
            out.push(("head.shared.w1".into(), &mut h.w1));
            out.push(("head.shared.b1".into(), &mut h.b1));
            out.push(("head.shared.w2".into(), &mut h.w2));
            out.push(("head.shared.b2".into(), &mut h.b2));
        }
        for (task, h) in &mut self.heads {
            out.push((format!("head.{task}.w1"), &mut h.w1));
            out.push((format!("head.{task}.b1"), &mut h.b1));
            out.push((format!("head.{task}.w2"), &mut h.w2));
            out.push((format!("head.{task}.b2"), &mut h.b2));
        }
        out
    }

    pub fn set_params(&mut self, params: &BTreeMap<String, Tensor>) {
        self.visit_params_mut(&mut |name, t| {
            if let Some(src) = params.get(&name) {
                *t = src.clone();
            }
        });
    }

    /// Bind backbone parameters plus the heads for `tasks` as tape leaves.
    pub fn bind_params(&self, tape: &mut Tape, tasks: &BTreeSet<TaskId>) -> Result<GraphBinding> {
        let mut nodes = BTreeMap::new();
        self.backbone.visit_params(&mut |name, t| {
            nodes.insert(name, tape.leaf(t.clone()));
        });
        match self.config.head_mode {
            HeadMode::Shared => {
                let h = self.shared_head.as_ref().expect("shared head exists");
                h.visit("head.shared", &mut |name, t| {
                    nodes.insert(name, tape.leaf(t.clone()));
                });
            }
            HeadMode::TaskSpecific => {
                for task in tasks {
                    let h = self
                        .heads
                        .get(task)
                        .ok_or_else(|| Error::Usage(format!("no head for task {task}")))?;
                    h.visit(&format!("head.{task}"), &mut |name, t| {
                        nodes.insert(name, tape.leaf(t.clone()));
                    });
                }
            }
        }
        Ok(GraphBinding { nodes })
    }

    /// Stack windows into one [(B*T) x d] leaf.
    pub fn stack_inputs(&self, windows: &[&Window]) -> Result<Tensor> {
        let t = self.config.backbone.window_length;
        let d = self.config.backbone.input_dim;
        let mut data = Vec::with_capacity(windows.len() * t * d);
        for w in windows {
            if w.inputs.shape() != [t, d] {
                return Err(Error::shape(
                    "stack_inputs",
                    format!("window {:?}, model expects [{t}, {d}]", w.inputs.shape()),
                ));
            }
            data.extend_from_slice(w.inputs.data());
        }
        Tensor::new(vec![windows.len() * t, d], data)
    }

    /// Backbone feature graph over a batch input node of [(B*T) x d].
    pub fn features_graph(
        &self,
        tape: &mut Tape,
        binding: &GraphBinding,
        input: NodeId,
        batch: usize,
    ) -> Result<NodeId> {
        let cfg = &self.config.backbone;
        let t_len = cfg.window_length;
        match &self.backbone {
            Backbone::Linear { .. } => {
                let flat = tape.reshape(input, vec![batch, t_len * cfg.input_dim])?;
                let lin = tape.matmul(flat, binding.node("backbone.w"))?;
                tape.add_bias(lin, binding.node("backbone.b"))
            }
            Backbone::Mlp { layers } => {
                let mut cur = tape.reshape(input, vec![batch, t_len * cfg.input_dim])?;
                for i in 0..layers.len() {
                    let lin = tape.matmul(cur, binding.node(&format!("backbone.l{i}.w")))?;
                    let biased = tape.add_bias(lin, binding.node(&format!("backbone.l{i}.b")))?;
                    cur = tape.relu(biased)?;
                }
                Ok(cur)
            }
            Backbone::Tcn { kernels, dilations, .. } => {
                let mut cur = input;
                for i in 0..kernels.len() {
                    let conv = tape.causal_conv1d(
                        cur,
                        binding.node(&format!("backbone.conv{i}.w")),
                        dilations[i],
                        batch,
                        t_len,
                    )?;
                    let biased = tape.add_bias(conv, binding.node(&format!("backbone.conv{i}.b")))?;
                    cur = tape.relu(biased)?;
                }
                tape.last_rows(cur, batch, t_len)
            }
        }
    }

    /// Head graph: features [B x F] -> predictions [B x 1].
    pub fn head_graph(
        &self,
        tape: &mut Tape,
        binding: &GraphBinding,
        task: TaskId,
        features: NodeId,
    ) -> Result<NodeId> {
        let prefix = self.head_prefix(task)?;
        let lin1 = tape.matmul(features, binding.node(&format!("{prefix}.w1")))?;
        let b1 = tape.add_bias(lin1, binding.node(&format!("{prefix}.b1")))?;
        let act = tape.relu(b1)?;
        let lin2 = tape.matmul(act, binding.node(&format!("{prefix}.w2")))?;
        tape.add_bias(lin2, binding.node(&format!("{prefix}.b2")))
    }

    /// Full forward graph for a batch of same-task windows.
    ///
    /// Returns (input leaf, prediction node [B x 1]); the input leaf is
    /// exposed so callers can take gradients with respect to the inputs.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        binding: &GraphBinding,
        task: TaskId,
        windows: &[&Window],
    ) -> Result<(NodeId, NodeId)> {
        let input = tape.leaf(self.stack_inputs(windows)?);
        let features = self.features_graph(tape, binding, input, windows.len())?;
        let pred = self.head_graph(tape, binding, task, features)?;
        Ok((input, pred))
    }

    /// Predict the targets for a batch of windows belonging to one task.
    pub fn predict_batch(&self, task: TaskId, windows: &[&Window]) -> Result<Vec<f64>> {
        if windows.is_empty() {
            return Ok(vec![]);
        }
        let mut tape = Tape::new();
        let tasks = BTreeSet::from([task]);
        let binding = self.bind_params(&mut tape, &tasks)?;
        let (_, pred) = self.forward_graph(&mut tape, &binding, task, windows)?;
        Ok(tape.value(pred).data().to_vec())
    }

    /// Predict a single window's target.
    pub fn predict(&self, task: TaskId, window: &Window) -> Result<f64> {
        Ok(self.predict_batch(task, &[window])?[0])
    }

    /// Shared-layer representation f^s(window); independent of every head.
    pub fn backbone_features(&self, window: &Window) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut nodes = BTreeMap::new();
        self.backbone.visit_params(&mut |name, t| {
            nodes.insert(name, tape.leaf(t.clone()));
        });
        let binding = GraphBinding { nodes };
        let input = tape.leaf(self.stack_inputs(&[window])?);
        let features = self.features_graph(&mut tape, &binding, input, 1)?;
        Ok(tape.value(features).reshaped(vec![self.config.backbone.feature_dim()])?)
    }
}

/// Per-task forward-dynamics approximator g_t: (x_k, y_k) -> x_{k+1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProspectiveModel {
    pub sensor_dim: usize,
    pub hidden: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ProspectiveModel {
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn new(sensor_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in = sensor_dim + 1;
        ProspectiveModel {
            sensor_dim,
            hidden,
            w1: Tensor::kaiming_uniform(vec![d_in, hidden], d_in, &mut rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::kaiming_uniform(vec![hidden, sensor_dim], hidden, &mut rng),
            b2: Tensor::zeros(vec![sensor_dim]),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("g.w1".into(), &self.w1);
        f("g.b1".into(), &self.b1);
        f("g.w2".into(), &self.w2);
        f("g.b2".into(), &self.b2);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("g.w1".into(), &mut self.w1);
        f("g.b1".into(), &mut self.b1);
        f("g.w2".into(), &mut self.w2);
        f("g.b2".into(), &mut self.b2);
    }

    /// Named mutable references to every parameter.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("g.w1".into(), &mut self.w1),
            ("g.b1".into(), &mut self.b1),
            ("g.w2".into(), &mut self.w2),
            ("g.b2".into(), &mut self.b2),
        ]
    }

    pub fn bind_params(&self, tape: &mut Tape) -> GraphBinding {
        let mut nodes = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            nodes.insert(name, tape.leaf(t.clone()));
        });
        GraphBinding { nodes }
    }

    /// Forward graph over a batch input node of [B x (d+1)].
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        binding: &GraphBinding,
        input: NodeId,
    ) -> Result<NodeId> {
        let lin1 = tape.matmul(input, binding.node("g.w1"))?;
        let b1 = tape.add_bias(lin1, binding.node("g.b1"))?;
        let act = tape.relu(b1)?;
        let lin2 = tape.matmul(act, binding.node("g.w2"))?;
        tape.add_bias(lin2, binding.node("g.b2"))
    }

    /// Predict next sensor states for a batch of (x_k, y_k) pairs.
    pub fn prospect_batch(&self, states: &[&[f64]], targets: &[f64]) -> Result<Vec<Vec<f64>>> {
        if states.len() != targets.len() {
            return Err(Error::shape(
                "prospect",
                format!("{} states vs {} targets", states.len(), targets.len()),
            ));
        }
        let d = self.sensor_dim;
        let mut data = Vec::with_capacity(states.len() * (d + 1));
        for (x, &y) in states.iter().zip(targets) {
            if x.len() != d {
                return Err(Error::shape("prospect", format!("state dim {} != {d}", x.len())));
            }
            data.extend_from_slice(x);
            data.push(y);
        }
        let mut tape = Tape::new();
        let binding = self.bind_params(&mut tape);
        let input = tape.leaf(Tensor::new(vec![states.len(), d + 1], data)?);
        let out = self.forward_graph(&mut tape, &binding, input)?;
        let v = tape.value(out);
        Ok((0..states.len()).map(|r| v.row(r).to_vec()).collect())
    }

    /// x_hat_{k+1} = g(x_k, y_k).
    pub fn prospect(&self, state: &[f64], target: f64) -> Result<Vec<f64>> {
        Ok(self.prospect_batch(&[state], &[target])?.remove(0))
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: MultiTaskModel,
    /// Prospective models by task, when the run trained them.
    #[serde(default)]
    pub prospective: BTreeMap<TaskId, ProspectiveModel>,
}

impl Checkpoint {
    pub fn new(model: MultiTaskModel, prospective: BTreeMap<TaskId, ProspectiveModel>) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, model, prospective }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }
}
