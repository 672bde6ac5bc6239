//! Config-driven experiment runner: dataset construction, strategy/seed
//! grids, evaluation batteries, significance comparisons, and the shift
//! sweep. The CLI is a thin wrapper over these functions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continual::eval::{self, TaskPredictor};
use crate::continual::pnn::{train_pnn, PnnModel};
use crate::continual::{
    train_joint, train_task_incremental, RehearsalMode, StrategyConfig, StrategyKind, TrainParams,
};
use crate::data::{
    self, apply_shift, generate_dataset, make_windows, ShiftKind, ShiftSpec, SplitSel,
    SuiteParams, TaskDataset, TaskSeries, TaskSpec,
};
use crate::derive_seed;
use crate::dynamics::{closed_loop_eval, lyapunov_eckmann, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricRecord};
use crate::models::{
    BackboneConfig, BackboneKind, HeadMode, ModelConfig, MultiTaskModel, ProspectiveModel, TaskId,
    Window,
};
use crate::report::{CurvePoint, ErrorMatrixRecord, ExperimentReport};
use crate::robustness::{
    feature_stds, fgsm_perturb_batch, noise_perturb, probe_train_eval, ProbeConfig, ProbeKind,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteChoice {
    Enabl3sLike,
    EmbryLike,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Incremental,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sensor_dim: usize,
    pub samples_per_task: usize,
    pub test_samples: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { sensor_dim: 8, samples_per_task: 6000, test_samples: 1000, noise: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyOverrides {
    pub ewc_lambda: f64,
    pub si_lambda: f64,
    pub gem_memory: usize,
    pub noise_level: f64,
}

impl Default for StrategyOverrides {
    fn default() -> Self {
        StrategyOverrides { ewc_lambda: 100.0, si_lambda: 1.0, gem_memory: 256, noise_level: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryConfig {
    pub shift_sweep: bool,
    pub fgsm: bool,
    pub noise: bool,
    pub probe: bool,
    pub lyapunov: bool,
    pub closed_loop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub kind: ShiftKind,
    pub magnitudes: Vec<f64>,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            kind: ShiftKind::AdditiveBias,
            magnitudes: vec![0.0, 0.1, 0.2, 0.3, 0.45, 0.6, 0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub suite: SuiteChoice,
    /// One training CSV per task when suite = "custom"; a held-out test
    /// series is carved from the final fifth of each file.
    pub custom_csv: Vec<PathBuf>,
    /// Optional permutation of suite task ids fixing the arrival order.
    pub task_order: Option<Vec<TaskId>>,
    pub strategies: Vec<String>,
    pub head_mode: HeadMode,
    pub backbone: BackboneKind,
    /// Override the backbone's default width/channel count.
    pub hidden_channels: Option<usize>,
    pub window_length: usize,
    pub seeds: Vec<u64>,
    pub regime: Regime,
    pub jobs: usize,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub train: TrainParams,
    pub overrides: StrategyOverrides,
    pub battery: BatteryConfig,
    pub fgsm_taus: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub closed_loop_horizon: usize,
    /// Windows per task used for probe training/evaluation.
    pub probe_windows_per_task: usize,
    pub shift: ShiftConfig,
    pub embedding: EmbeddingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            suite: SuiteChoice::Enabl3sLike,
            custom_csv: vec![],
            task_order: None,
            strategies: vec!["er".into(), "prospective".into()],
            head_mode: HeadMode::TaskSpecific,
            backbone: BackboneKind::Tcn,
            hidden_channels: None,
            window_length: 10,
            seeds: vec![1, 2, 3, 4, 5],
            regime: Regime::Incremental,
            jobs: 1,
            out_dir: PathBuf::from("runs/out"),
            data: DataConfig::default(),
            train: TrainParams::default(),
            overrides: StrategyOverrides::default(),
            battery: BatteryConfig::default(),
            fgsm_taus: vec![0.0, 0.01, 0.02, 0.05, 0.1],
            noise_levels: vec![0.0, 0.1, 0.2, 0.4],
            closed_loop_horizon: 20,
            probe_windows_per_task: 200,
            shift: ShiftConfig::default(),
            embedding: EmbeddingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("need at least one strategy".into()));
        }
        let kinds = self.strategy_configs()?;
        if self.regime == Regime::Joint {
            for s in &kinds {
                if !matches!(s.kind, StrategyKind::Er | StrategyKind::Prospective) {
                    return Err(Error::Config(format!(
                        "joint regime supports er/prospective, got {}",
                        s.kind.name()
                    )));
                }
            }
        }
        if self.suite == SuiteChoice::Custom {
            if self.custom_csv.is_empty() {
                return Err(Error::Config("suite=custom needs custom_csv paths".into()));
            }
            for p in &self.custom_csv {
                if !p.exists() {
                    return Err(Error::Config(format!("csv not found: {}", p.display())));
                }
            }
        }
        if let Some(order) = &self.task_order {
            let suite_len = match self.suite {
                SuiteChoice::EmbryLike => 9,
                SuiteChoice::Enabl3sLike => 5,
                SuiteChoice::Custom => self.custom_csv.len(),
            };
            let set: BTreeSet<TaskId> = order.iter().copied().collect();
            if set.len() != order.len() || order.iter().any(|&t| t >= suite_len) {
                return Err(Error::Config(format!(
                    "task_order must be a permutation of 0..{suite_len}"
                )));
            }
        }
        if self.battery.lyapunov {
            let usable = self.data.test_samples.saturating_sub(self.window_length);
            if usable < 500 + self.embedding.embedding_dim {
                return Err(Error::Config(
                    "lyapunov battery needs test_samples >= ~520; raise data.test_samples".into(),
                ));
            }
        }
        self.train.validate()?;
        self.model_config().backbone.validate()?;
        Ok(())
    }

    pub fn strategy_configs(&self) -> Result<Vec<StrategyConfig>> {
        self.strategies
            .iter()
            .map(|name| {
                let kind = StrategyKind::parse(name)?;
                let mut cfg = StrategyConfig::new(kind);
                match kind {
                    StrategyKind::Ewc => cfg.lambda = self.overrides.ewc_lambda,
                    StrategyKind::Si => cfg.lambda = self.overrides.si_lambda,
                    _ => {}
                }
                cfg.gem_memory = self.overrides.gem_memory;
                cfg.noise_level = self.overrides.noise_level;
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut backbone =
            BackboneConfig::default_for(self.backbone, self.data.sensor_dim, self.window_length);
        if let Some(h) = self.hidden_channels {
            backbone.hidden_channels = h;
        }
        ModelConfig::new(backbone, self.head_mode)
    }

    /// Task specs for a generated suite, in arrival order. The data seed is
    /// derived from the run seed: each seed is a fresh synthetic subject.
    pub fn task_specs(&self, run_seed: u64) -> Vec<TaskSpec> {
        let params = SuiteParams {
            sensor_dim: self.data.sensor_dim,
            samples_per_task: self.data.samples_per_task,
            test_samples: self.data.test_samples,
            noise: self.data.noise,
            seed: derive_seed(run_seed, "data"),
        };
        let mut specs = match self.suite {
            SuiteChoice::EmbryLike => data::embry_like_suite(&params),
            SuiteChoice::Enabl3sLike | SuiteChoice::Custom => data::enabl3s_like_suite(&params),
        };
        if let Some(order) = &self.task_order {
            specs = order.iter().map(|&t| specs[t].clone()).collect();
        }
        specs
    }
}

/// Carve a held-out test series from the tail fifth of a loaded CSV series.
fn split_loaded_series(series: TaskSeries) -> Result<TaskDataset> {
    let n = series.len();
    let cut = (n * 4) / 5;
    if cut < 2 || cut >= n {
        return Err(Error::Data(format!("csv task {}: too few rows to split", series.task)));
    }
    let clip = |lo: usize, hi: usize| -> Vec<(usize, usize)> {
        series
            .trials
            .iter()
            .filter_map(|&(s, e)| {
                let (cs, ce) = (s.max(lo), e.min(hi));
                (cs < ce).then_some((cs - lo, ce - lo))
            })
            .collect()
    };
    let d = series.sensor_dim();
    let head = TaskSeries {
        task: series.task,
        x: crate::nd::Tensor::new(vec![cut, d], series.x.data()[..cut * d].to_vec())?,
        y: series.y[..cut].to_vec(),
        split_m: ((cut as f64) * data::DEFAULT_TRAIN_FRACTION).round() as usize,
        trials: clip(0, cut),
        latent: None,
    };
    let mut test_trials = series
        .trials
        .iter()
        .filter_map(|&(s, e)| {
            let (cs, ce) = (s.max(cut), e);
            (cs < ce).then_some((cs - cut, ce - cut))
        })
        .collect::<Vec<_>>();
    if test_trials.is_empty() {
        test_trials.push((0, n - cut));
    }
    let test = TaskSeries {
        task: series.task,
        x: crate::nd::Tensor::new(vec![n - cut, d], series.x.data()[cut * d..].to_vec())?,
        y: series.y[cut..].to_vec(),
        split_m: n - cut,
        trials: test_trials,
        latent: None,
    };
    Ok(TaskDataset { train_val: head, test })
}

/// Build the per-seed task datasets in arrival order.
pub fn build_datasets(config: &ExperimentConfig, run_seed: u64) -> Result<Vec<TaskDataset>> {
    match config.suite {
        SuiteChoice::Custom => {
            let order: Vec<usize> = config
                .task_order
                .clone()
                .unwrap_or_else(|| (0..config.custom_csv.len()).collect());
            order
                .into_iter()
                .map(|t| {
                    let series = data::csvio::load_csv(&config.custom_csv[t], t)?;
                    split_loaded_series(series)
                })
                .collect()
        }
        _ => config
            .task_specs(run_seed)
            .iter()
            .map(|spec| generate_dataset(spec, config.data.test_samples))
            .collect(),
    }
}

enum TrainedModel {
    Standard { model: MultiTaskModel, g_models: BTreeMap<TaskId, ProspectiveModel> },
    Pnn(PnnModel),
}

impl TaskPredictor for TrainedModel {
    fn predict_windows(&self, task: TaskId, windows: &[&Window]) -> Result<Vec<f64>> {
        match self {
            TrainedModel::Standard { model, .. } => model.predict_windows(task, windows),
            TrainedModel::Pnn(m) => m.predict_windows(task, windows),
        }
    }
}

struct CellOutput {
    records: Vec<MetricRecord>,
    matrix: Option<ErrorMatrixRecord>,
    curves: Vec<CurvePoint>,
}

fn run_cell(
    config: &ExperimentConfig,
    strategy: &StrategyConfig,
    seed: u64,
) -> Result<CellOutput> {
    let datasets = build_datasets(config, seed)?;
    let strategy_name = strategy.kind.name().to_string();
    let run_id = format!("{strategy_name}-s{seed}");
    let t_len = config.window_length;
    let model_seed = derive_seed(seed, "model");

    let mut train_params = config.train.clone();
    train_params.always_train_dynamics |= config.battery.closed_loop;

    let mut records = Vec::new();
    let mut curves = Vec::new();

    let (trained, matrix) = match (config.regime, strategy.kind) {
        (Regime::Joint, kind) => {
            let mode = match kind {
                StrategyKind::Prospective => RehearsalMode::Prospective,
                _ => RehearsalMode::Conventional,
            };
            let model = MultiTaskModel::new(config.model_config(), model_seed)?;
            let out = train_joint(model, &datasets, mode, &train_params, seed)?;
            (
                TrainedModel::Standard { model: out.model, g_models: out.g_models },
                out.log.error_matrix,
            )
        }
        (Regime::Incremental, StrategyKind::Pnn) => {
            let (model, log) = train_pnn(config.model_config(), &datasets, &train_params, seed)?;
            (TrainedModel::Pnn(model), log.error_matrix)
        }
        (Regime::Incremental, _) => {
            let model = MultiTaskModel::new(config.model_config(), model_seed)?;
            let out = train_task_incremental(model, &datasets, strategy, &train_params, seed)?;
            (
                TrainedModel::Standard { model: out.model, g_models: out.g_models },
                out.log.error_matrix,
            )
        }
    };

    // Final per-task accuracy on the held-out test series.
    let mut test_windows: Vec<Vec<Window>> = Vec::with_capacity(datasets.len());
    for ds in &datasets {
        test_windows.push(make_windows(&ds.test, t_len, SplitSel::All));
    }
    for (ds, windows) in datasets.iter().zip(&test_windows) {
        let task = ds.test.task;
        let refs = eval::as_refs(windows);
        let r2 = eval::r_squared(&trained, task, &refs)?;
        let nr = eval::nrmse(&trained, task, &refs)?;
        records.push(MetricRecord::new(&run_id, &strategy_name, task.to_string(), "r2", r2, seed));
        records.push(MetricRecord::new(&run_id, &strategy_name, task.to_string(), "nrmse", nr, seed));
    }

    // Forgetting metrics from the error matrix (incremental regimes).
    if config.regime == Regime::Incremental && datasets.len() >= 2 {
        let l = datasets.len();
        for t in 2..=l {
            let v = metrics::bwt(&matrix, t)?;
            let task = datasets[t - 1].train_val.task;
            records.push(MetricRecord::new(&run_id, &strategy_name, task.to_string(), "bwt", v, seed));
        }
        for t in 1..l {
            let v = metrics::forgetting_ratio(&matrix, t, l)?;
            let task = datasets[t - 1].train_val.task;
            records.push(MetricRecord::new(&run_id, &strategy_name, task.to_string(), "fr", v, seed));
        }
    }

    // Evaluation batteries (standard models only; pnn has no shared backbone).
    if let TrainedModel::Standard { model, g_models } = &trained {
        if config.battery.fgsm {
            for (ds, windows) in datasets.iter().zip(&test_windows) {
                let task = ds.test.task;
                let refs = eval::as_refs(windows);
                let stds = feature_stds(&refs);
                for &tau in &config.fgsm_taus {
                    let mut preds = Vec::with_capacity(refs.len());
                    let mut targets = Vec::with_capacity(refs.len());
                    for chunk in refs.chunks(100) {
                        let perturbed = fgsm_perturb_batch(model, task, chunk, tau, &stds)?;
                        let prefs: Vec<&Window> = perturbed.iter().collect();
                        preds.extend(model.predict_windows(task, &prefs)?);
                        targets.extend(chunk.iter().map(|w| w.target));
                    }
                    let r2 = metrics::r_squared(&targets, &preds)?;
                    curves.push(CurvePoint {
                        curve: "fgsm_r2".into(),
                        strategy: strategy_name.clone(),
                        seed,
                        task: task.to_string(),
                        x: tau,
                        value: r2,
                    });
                }
            }
        }
        if config.battery.noise {
            for (ds, windows) in datasets.iter().zip(&test_windows) {
                let task = ds.test.task;
                let refs = eval::as_refs(windows);
                let stds = feature_stds(&refs);
                for &level in &config.noise_levels {
                    let noisy = noise_perturb(
                        &refs,
                        level,
                        &stds,
                        derive_seed(seed, &format!("noise.{task}.{level}")),
                    )?;
                    let nrefs: Vec<&Window> = noisy.iter().collect();
                    let preds = model.predict_windows(task, &nrefs)?;
                    let targets: Vec<f64> = refs.iter().map(|w| w.target).collect();
                    let r2 = metrics::r_squared(&targets, &preds)?;
                    curves.push(CurvePoint {
                        curve: "noise_r2".into(),
                        strategy: strategy_name.clone(),
                        seed,
                        task: task.to_string(),
                        x: level,
                        value: r2,
                    });
                }
            }
        }
        if config.battery.probe && datasets.len() >= 2 {
            let mut probe_windows: Vec<&Window> = Vec::new();
            for windows in &test_windows {
                probe_windows.extend(windows.iter().take(config.probe_windows_per_task));
            }
            for kind in [ProbeKind::Linear, ProbeKind::Mlp] {
                let acc = probe_train_eval(
                    model,
                    &probe_windows,
                    &ProbeConfig::new(kind),
                    derive_seed(seed, "probe"),
                )?;
                let name = match kind {
                    ProbeKind::Linear => "probe_linear_acc",
                    ProbeKind::Mlp => "probe_mlp_acc",
                };
                records.push(MetricRecord::new(&run_id, &strategy_name, "all", name, acc, seed));
            }
        }
        if config.battery.lyapunov {
            for (ds, windows) in datasets.iter().zip(&test_windows) {
                let task = ds.test.task;
                let refs = eval::as_refs(windows);
                let preds = model.predict_windows(task, &refs)?;
                let (l1, l2) = lyapunov_eckmann(&preds, &config.embedding)?;
                records.push(MetricRecord::new(
                    &run_id,
                    &strategy_name,
                    task.to_string(),
                    "lyapunov_l1",
                    l1,
                    seed,
                ));
                records.push(MetricRecord::new(
                    &run_id,
                    &strategy_name,
                    task.to_string(),
                    "lyapunov_l2",
                    l2,
                    seed,
                ));
            }
        }
        if config.battery.closed_loop {
            for (ds, windows) in datasets.iter().zip(&test_windows) {
                let task = ds.test.task;
                let Some(g) = g_models.get(&task) else {
                    return Err(Error::Usage(format!(
                        "closed-loop battery: no dynamics model for task {task}"
                    )));
                };
                let horizon = config.closed_loop_horizon;
                let initial = &windows[0];
                let k0 = initial.step;
                let true_next: Vec<&[f64]> = (1..=horizon)
                    .map(|h| ds.test.state(k0 + h))
                    .collect();
                let out = closed_loop_eval(model, g, task, initial, &true_next, horizon)?;
                for (h, dev) in out.deviations.iter().enumerate() {
                    curves.push(CurvePoint {
                        curve: "closed_loop_deviation".into(),
                        strategy: strategy_name.clone(),
                        seed,
                        task: task.to_string(),
                        x: (h + 1) as f64,
                        value: *dev,
                    });
                }
                let mean = out.deviations.iter().sum::<f64>() / out.deviations.len().max(1) as f64;
                records.push(MetricRecord::new(
                    &run_id,
                    &strategy_name,
                    task.to_string(),
                    "closed_loop_mean_deviation",
                    mean,
                    seed,
                ));
            }
        }
    }

    Ok(CellOutput {
        records,
        matrix: Some(ErrorMatrixRecord { strategy: strategy_name, seed, matrix }),
        curves,
    })
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Run the full strategy x seed grid and write report.json, metrics.csv and
/// curves.csv into the output directory. On any cell failure the partial
/// report is written with `partial = true` and the error is returned.
pub fn cmd_run(config: &ExperimentConfig) -> Result<ExperimentReport<ExperimentConfig>> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let started = Instant::now();
    let strategies = config.strategy_configs()?;
    let cells: Vec<(usize, u64)> = (0..strategies.len())
        .flat_map(|s| config.seeds.iter().map(move |&seed| (s, seed)))
        .collect();

    let pool = thread_pool(config.jobs)?;
    let results: Vec<Result<CellOutput>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(s, seed)| run_cell(config, &strategies[s], seed))
            .collect()
    });

    let mut report = ExperimentReport::new(config.clone());
    let mut first_error = None;
    for result in results {
        match result {
            Ok(cell) => {
                report.records.extend(cell.records);
                if let Some(m) = cell.matrix {
                    report.error_matrices.push(m);
                }
                report.curves.extend(cell.curves);
            }
            Err(e) => {
                report.partial = true;
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }

    if config.battery.shift_sweep {
        match cmd_shift_sweep_points(config) {
            Ok(sweep) => {
                for p in &sweep.points {
                    report.curves.push(CurvePoint {
                        curve: "shift_delta_r2".into(),
                        strategy: "prospective-vs-er".into(),
                        seed: p.seed,
                        task: "mean".into(),
                        x: p.magnitude,
                        value: p.delta_r2,
                    });
                    report.curves.push(CurvePoint {
                        curve: "shift_js".into(),
                        strategy: "prospective-vs-er".into(),
                        seed: p.seed,
                        task: "mean".into(),
                        x: p.magnitude,
                        value: p.js,
                    });
                }
                report.records.push(MetricRecord::new(
                    "shift-sweep",
                    "prospective-vs-er",
                    "all",
                    "shift_pearson_r",
                    sweep.pearson_r,
                    0,
                ));
            }
            Err(e) => {
                report.partial = true;
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }

    report.sort();
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    report.write_json(&config.out_dir.join("report.json"))?;
    crate::report::write_metrics_csv(&report.records, &config.out_dir.join("metrics.csv"))?;
    crate::report::write_curves_csv(&report.curves, &config.out_dir.join("curves.csv"))?;

    match first_error {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Export the suite's per-task training CSVs (first seed of the config).
pub fn cmd_gen_data(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    if config.suite == SuiteChoice::Custom {
        return Err(Error::Config("gen-data needs a generated suite, not custom".into()));
    }
    std::fs::create_dir_all(&config.out_dir)?;
    let specs = config.task_specs(config.seeds[0]);
    let mut paths = Vec::with_capacity(specs.len());
    for spec in &specs {
        let series = data::generate_task(spec)?;
        let path = config.out_dir.join(format!("task_{}.csv", spec.task));
        data::csvio::export_csv(&series, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftPoint {
    pub seed: u64,
    pub magnitude: f64,
    pub js: f64,
    pub r2_conventional: f64,
    pub r2_prospective: f64,
    pub delta_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSweepSummary {
    pub points: Vec<ShiftPoint>,
    pub pearson_r: f64,
    pub slope: f64,
}

/// Train conventional and prospective rehearsal under shared seeds, then
/// evaluate both across the shift-magnitude sweep. Training does not depend
/// on the shift, so each pair is trained once and evaluated at every
/// magnitude.
pub fn cmd_shift_sweep_points(config: &ExperimentConfig) -> Result<ShiftSweepSummary> {
    if config.shift.magnitudes.len() < 5 {
        return Err(Error::Config("shift sweep needs >= 5 magnitudes".into()));
    }
    let pool = thread_pool(config.jobs)?;
    let per_seed: Vec<Result<Vec<ShiftPoint>>> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| shift_sweep_for_seed(config, seed))
            .collect()
    });
    let mut points = Vec::new();
    for r in per_seed {
        points.extend(r?);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.js).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.delta_r2).collect();
    let pearson_r = metrics::pearson(&xs, &ys)?;
    let slope = metrics::slope(&xs, &ys)?;
    Ok(ShiftSweepSummary { points, pearson_r, slope })
}

fn shift_sweep_for_seed(config: &ExperimentConfig, seed: u64) -> Result<Vec<ShiftPoint>> {
    let datasets = build_datasets(config, seed)?;
    let t_len = config.window_length;
    let model_seed = derive_seed(seed, "model");
    let train = |kind: StrategyKind| -> Result<MultiTaskModel> {
        let model = MultiTaskModel::new(config.model_config(), model_seed)?;
        let out = train_task_incremental(
            model,
            &datasets,
            &StrategyConfig::new(kind),
            &config.train,
            seed,
        )?;
        Ok(out.model)
    };
    let conventional = train(StrategyKind::Er)?;
    let prospective = train(StrategyKind::Prospective)?;

    let mut points = Vec::with_capacity(config.shift.magnitudes.len());
    for &magnitude in &config.shift.magnitudes {
        let mut js_acc = 0.0;
        let mut r2c_acc = 0.0;
        let mut r2p_acc = 0.0;
        for ds in &datasets {
            let shifted =
                apply_shift(&ds.test, &ShiftSpec { kind: config.shift.kind, magnitude })?;
            // distribution distance between training states and shifted test states
            let train_rows: Vec<&[f64]> =
                (0..ds.train_val.split_m).map(|k| ds.train_val.state(k)).collect();
            let test_rows: Vec<&[f64]> = (0..shifted.len()).map(|k| shifted.state(k)).collect();
            js_acc += metrics::js_distance(&train_rows, &test_rows, metrics::DEFAULT_JS_BINS)?;
            let windows = make_windows(&shifted, t_len, SplitSel::All);
            let refs = eval::as_refs(&windows);
            r2c_acc += eval::r_squared(&conventional, ds.test.task, &refs)?;
            r2p_acc += eval::r_squared(&prospective, ds.test.task, &refs)?;
        }
        let n = datasets.len() as f64;
        points.push(ShiftPoint {
            seed,
            magnitude,
            js: js_acc / n,
            r2_conventional: r2c_acc / n,
            r2_prospective: r2p_acc / n,
            delta_r2: (r2p_acc - r2c_acc) / n,
        });
    }
    Ok(points)
}

/// Write the shift sweep as CSV plus a JSON summary.
pub fn cmd_shift_sweep(config: &ExperimentConfig) -> Result<ShiftSweepSummary> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let summary = cmd_shift_sweep_points(config)?;
    let mut w = csv::Writer::from_path(config.out_dir.join("shift_sweep.csv"))?;
    w.write_record([
        "seed",
        "magnitude",
        "js_distance",
        "r2_conventional",
        "r2_prospective",
        "delta_r2",
    ])?;
    for p in &summary.points {
        w.write_record([
            format!("{}", p.seed),
            format!("{}", p.magnitude),
            format!("{}", p.js),
            format!("{}", p.r2_conventional),
            format!("{}", p.r2_prospective),
            format!("{}", p.delta_r2),
        ])?;
    }
    w.flush()?;
    let file = std::fs::File::create(config.out_dir.join("shift_summary.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub arm_a: String,
    pub arm_b: String,
    pub task: String,
    pub n: usize,
    pub w_statistic: f64,
    pub p_raw: f64,
    pub p_bonferroni: f64,
    pub stars: String,
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 1e-4 {
        "****"
    } else if p < 1e-3 {
        "***"
    } else if p < 1e-2 {
        "**"
    } else {
        ""
    }
}

/// Pairwise Wilcoxon signed-rank comparisons of a metric across report arms
/// (strategy within report), paired by seed, Bonferroni-corrected by the
/// number of emitted comparisons. Two-sided p-values.
pub fn cmd_compare(report_paths: &[PathBuf], metric: &str) -> Result<Vec<CompareRow>> {
    if report_paths.is_empty() {
        return Err(Error::Config("compare needs at least one report".into()));
    }
    // arm -> task -> seed -> value
    let mut arms: BTreeMap<String, BTreeMap<String, BTreeMap<u64, f64>>> = BTreeMap::new();
    for (idx, path) in report_paths.iter().enumerate() {
        let report: ExperimentReport<serde_json::Value> = crate::report::read_report_json(path)?;
        for r in &report.records {
            if r.metric != metric {
                continue;
            }
            let arm = if report_paths.len() > 1 {
                format!("report{idx}:{}", r.strategy)
            } else {
                r.strategy.clone()
            };
            arms.entry(arm)
                .or_default()
                .entry(r.task.clone())
                .or_default()
                .insert(r.seed, r.value);
        }
    }
    if arms.len() < 2 {
        return Err(Error::Data(format!("metric '{metric}': need >= 2 arms to compare")));
    }

    let arm_names: Vec<String> = arms.keys().cloned().collect();
    let mut rows = Vec::new();
    for i in 0..arm_names.len() {
        for j in i + 1..arm_names.len() {
            let (a, b) = (&arm_names[i], &arm_names[j]);
            let tasks: BTreeSet<String> = arms[a]
                .keys()
                .filter(|t| arms[b].contains_key(*t))
                .cloned()
                .collect();
            for task in tasks {
                let va = &arms[a][&task];
                let vb = &arms[b][&task];
                let sa: BTreeSet<u64> = va.keys().copied().collect();
                let sb: BTreeSet<u64> = vb.keys().copied().collect();
                if sa != sb {
                    let orphans: Vec<u64> = sa.symmetric_difference(&sb).copied().collect();
                    return Err(Error::Data(format!(
                        "compare {a} vs {b} task {task}: unmatched seeds {orphans:?}"
                    )));
                }
                let diffs: Vec<f64> = sa.iter().map(|s| va[s] - vb[s]).collect();
                let test = metrics::wilcoxon_signed_rank(&diffs)?;
                rows.push(CompareRow {
                    arm_a: a.clone(),
                    arm_b: b.clone(),
                    task,
                    n: test.n,
                    w_statistic: test.statistic,
                    p_raw: test.p_two_sided,
                    p_bonferroni: 0.0, // filled below once the count is known
                    stars: String::new(),
                });
            }
        }
    }
    let factor = rows.len() as f64;
    for row in &mut rows {
        row.p_bonferroni = (row.p_raw * factor).min(1.0);
        row.stars = significance_stars(row.p_bonferroni).to_string();
    }
    Ok(rows)
}

pub fn write_compare_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["arm_a", "arm_b", "task", "n", "w", "p_raw", "p_bonferroni", "stars"])?;
    for r in rows {
        w.write_record([
            r.arm_a.as_str(),
            r.arm_b.as_str(),
            r.task.as_str(),
            &format!("{}", r.n),
            &format!("{}", r.w_statistic),
            &format!("{}", r.p_raw),
            &format!("{}", r.p_bonferroni),
            r.stars.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            strategies: vec!["none".into(), "er".into()],
            backbone: BackboneKind::Mlp,
            window_length: 5,
            seeds: vec![1, 2],
            out_dir: dir.to_path_buf(),
            data: DataConfig {
                sensor_dim: 4,
                samples_per_task: 150,
                test_samples: 80,
                noise: 0.02,
            },
            train: TrainParams {
                max_epochs: 3,
                batch_size: 40,
                buffer_capacity: 60,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn test_cmd_run_writes_reports_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(&dir.path().join("a"));
        // trim to 2 tasks via task order? keep all 5 but tiny sizes
        config.task_order = Some(vec![0, 1]);
        let report = cmd_run(&config).unwrap();
        assert!(!report.partial);
        assert!(config.out_dir.join("report.json").exists());
        let bytes_a = std::fs::read(config.out_dir.join("metrics.csv")).unwrap();
        // eps matrix coverage: 2 strategies x 2 seeds
        assert_eq!(report.error_matrices.len(), 4);
        for m in &report.error_matrices {
            assert!(m.matrix.is_lower_triangular_complete());
        }
        // rerun into a fresh dir: byte-identical metrics
        let mut config_b = config.clone();
        config_b.out_dir = dir.path().join("b");
        cmd_run(&config_b).unwrap();
        let bytes_b = std::fs::read(config_b.out_dir.join("metrics.csv")).unwrap();
        assert_eq!(bytes_a, bytes_b);
        // no NaN values in records
        for r in &report.records {
            assert!(r.value.is_finite(), "{}: {}", r.metric, r.value);
        }
    }

    #[test]
    fn test_cmd_run_parallel_matches_serial() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(&dir.path().join("serial"));
        config.task_order = Some(vec![0, 1]);
        cmd_run(&config).unwrap();
        let mut par = config.clone();
        par.jobs = 4;
        par.out_dir = dir.path().join("par");
        cmd_run(&par).unwrap();
        assert_eq!(
            std::fs::read(config.out_dir.join("metrics.csv")).unwrap(),
            std::fs::read(par.out_dir.join("metrics.csv")).unwrap()
        );
    }

    #[test]
    fn test_gen_data_files_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(&dir.path().join("gen"));
        config.suite = SuiteChoice::EmbryLike;
        config.task_order = None;
        let paths = cmd_gen_data(&config).unwrap();
        assert_eq!(paths.len(), 9);
        let first = std::fs::read(&paths[0]).unwrap();
        // regenerating is byte-identical
        cmd_gen_data(&config).unwrap();
        assert_eq!(std::fs::read(&paths[0]).unwrap(), first);
        // d and N match the spec
        let series = data::csvio::load_csv(&paths[0], 0).unwrap();
        assert_eq!(series.sensor_dim(), config.data.sensor_dim);
        assert_eq!(series.len(), config.data.samples_per_task);
    }

    #[test]
    fn test_custom_suite_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut gen = tiny_config(&dir.path().join("gen"));
        gen.task_order = None;
        let paths = cmd_gen_data(&gen).unwrap();
        let mut config = tiny_config(&dir.path().join("run"));
        config.suite = SuiteChoice::Custom;
        config.custom_csv = paths.into_iter().take(2).collect();
        config.task_order = None;
        config.strategies = vec!["er".into()];
        config.seeds = vec![1];
        let report = cmd_run(&config).unwrap();
        assert!(!report.partial);
        assert!(report.records.iter().any(|r| r.metric == "r2"));
    }

    #[test]
    fn test_compare_identical_reports_not_significant() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(&dir.path().join("cmp"));
        config.task_order = Some(vec![0, 1]);
        config.seeds = vec![1, 2, 3, 4, 5];
        config.train.max_epochs = 2;
        cmd_run(&config).unwrap();
        let rows = cmd_compare(
            &[config.out_dir.join("report.json")],
            "r2",
        )
        .unwrap();
        assert!(!rows.is_empty());
        for row in &rows {
            assert!(row.stars.is_empty() || row.p_bonferroni >= 1e-2, "{row:?}");
        }
    }

    #[test]
    fn test_compare_constructed_dominance() {
        // A beats B on all 20 seeds: p < 1e-4 before correction
        let dir = tempfile::tempdir().unwrap();
        let mut report: ExperimentReport<u32> = ExperimentReport::new(0);
        for seed in 0..20u64 {
            let a = 0.9 + (seed as f64) * 1e-3;
            let b = 0.8 - (seed as f64) * 1e-3;
            report.records.push(MetricRecord::new("a", "alpha", "0", "r2", a, seed));
            report.records.push(MetricRecord::new("b", "beta", "0", "r2", b, seed));
        }
        let path = dir.path().join("report.json");
        report.write_json(&path).unwrap();
        let rows = cmd_compare(&[path], "r2").unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].p_raw < 1e-4, "p = {}", rows[0].p_raw);
        assert_eq!(rows[0].stars, "****");
    }

    #[test]
    fn test_compare_unmatched_seeds_error_lists_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let mut report: ExperimentReport<u32> = ExperimentReport::new(0);
        for seed in 0..6u64 {
            report.records.push(MetricRecord::new("a", "alpha", "0", "r2", 0.5, seed));
            if seed != 3 {
                report.records.push(MetricRecord::new("b", "beta", "0", "r2", 0.4, seed));
            }
        }
        let path = dir.path().join("report.json");
        report.write_json(&path).unwrap();
        let err = cmd_compare(&[path], "r2").unwrap_err();
        assert!(err.to_string().contains('3'), "{err}");
    }

    #[test]
    fn test_star_mapping() {
        assert_eq!(significance_stars(5e-3), "**");
        assert_eq!(significance_stars(5e-4), "***");
        assert_eq!(significance_stars(5e-5), "****");
        assert_eq!(significance_stars(0.05), "");
    }

    #[test]
    fn test_config_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.seeds.clear();
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        let mut config = tiny_config(dir.path());
        config.strategies = vec!["bogus".into()];
        assert!(config.validate().is_err());
        let mut config = tiny_config(dir.path());
        config.suite = SuiteChoice::Custom;
        assert!(config.validate().is_err());
        let mut config = tiny_config(dir.path());
        config.regime = Regime::Joint;
        config.strategies = vec!["ewc".into()];
        assert!(config.validate().is_err());
        let mut config = tiny_config(dir.path());
        config.task_order = Some(vec![0, 0]);
        assert!(config.validate().is_err());
    }

    #[test]
    fn test_shift_sweep_small() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(&dir.path().join("sweep"));
        config.task_order = Some(vec![0, 1]);
        config.seeds = vec![1];
        config.train.max_epochs = 4;
        config.shift.magnitudes = vec![0.0, 0.3, 0.6, 1.0, 1.5];
        let summary = cmd_shift_sweep(&config).unwrap();
        assert_eq!(summary.points.len(), 5);
        // the sweep must produce a clear JS signal over the sampling-noise
        // floor: the largest bias dominates the zero-shift point
        let zero = &summary.points[0];
        assert!(zero.magnitude == 0.0);
        let last = summary.points.last().unwrap();
        assert!(last.js > zero.js, "no JS signal: {summary:?}");
        // pearson matches a direct recomputation
        let xs: Vec<f64> = summary.points.iter().map(|p| p.js).collect();
        let ys: Vec<f64> = summary.points.iter().map(|p| p.delta_r2).collect();
        let direct = metrics::pearson(&xs, &ys).unwrap();
        assert!((summary.pearson_r - direct).abs() < 1e-12);
        assert!(config.out_dir.join("shift_sweep.csv").exists());
    }
}
