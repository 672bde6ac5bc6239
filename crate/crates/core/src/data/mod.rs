//! Synthetic multi-task gait generation, controlled distribution shifts,
//! CSV ingestion, and windowing.
//!
//! The generator drives a latent phase and mixes a harmonic basis through a
//! seeded full-rank matrix, so the next sensor state is a learnable function
//! of the current state and target — the forward-dynamics model has true
//! dynamics to mimic. Targets are phase-locked waveforms shaped by the task's
//! speed, incline, and waveform parameters.

pub mod csvio;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{TaskId, Window};
use crate::nd::Tensor;
use crate::derive_seed;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskId,
    /// Cycles per step-unit; the latent phase advances by 2*pi*speed each step.
    pub speed: f64,
    /// Dimensionless incline shaping of the target waveform.
    pub incline: f64,
    /// Extra third-harmonic shaping; distinguishes locomotion modes beyond
    /// the speed/incline grid.
    pub waveform: f64,
    pub sensor_dim: usize,
    pub samples: usize,
    pub noise: f64,
    pub seed: u64,
    /// Recording session: sessions share the task's mixing matrix (the
    /// sensor geometry) but draw fresh phases and noise. Held-out test data
    /// is session 1 of the same task.
    #[serde(default)]
    pub session: u64,
}

impl TaskSpec {
    pub fn validate(&self, window_length: usize) -> Result<()> {
        if !(self.speed > 0.0) {
            return Err(Error::Config(format!("speed must be > 0, got {}", self.speed)));
        }
        if self.sensor_dim < 2 {
            return Err(Error::Config(format!("sensor_dim must be >= 2, got {}", self.sensor_dim)));
        }
        if self.samples < 3 * window_length {
            return Err(Error::Config(format!(
                "samples {} < 3 * window_length {}",
                self.samples, window_length
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Generator internals kept with a series so controlled shifts can be applied
/// exactly. CSV-loaded series do not carry these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenLatent {
    pub spec: TaskSpec,
    pub phases: Vec<f64>,
    /// Noise draws, row-major [samples x sensor_dim].
    pub noise: Vec<f64>,
    /// Full-rank mixing matrix, [sensor_dim x sensor_dim].
    pub mixing: Tensor,
}

/// One task's aligned sensor states and targets with split and trial
/// boundaries. The first `split_m` steps are training data, the rest
/// validation; held-out test data is a separate series under a fresh seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSeries {
    pub task: TaskId,
    /// [N x d] sensor states.
    pub x: Tensor,
    pub y: Vec<f64>,
    pub split_m: usize,
    /// Half-open (start, end) row ranges; windows never cross them.
    pub trials: Vec<(usize, usize)>,
    pub latent: Option<GenLatent>,
}

impl TaskSeries {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sensor_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        self.x.row(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.rows() != self.y.len() {
            return Err(Error::Data(format!(
                "series task {}: {} states vs {} targets",
                self.task,
                self.x.rows(),
                self.y.len()
            )));
        }
        if self.split_m > self.len() {
            return Err(Error::Data("split_m beyond series end".into()));
        }
        self.x.check_finite("TaskSeries.x")?;
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("TaskSeries.y", "target"));
        }
        Ok(())
    }
}

/// Train+validation series plus its independently seeded test series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub train_val: TaskSeries,
    pub test: TaskSeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    PhaseOffset,
    AmplitudeScale,
    AdditiveBias,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

/// Harmonic basis [sin t, cos t, sin 2t, cos 2t, ...] truncated to `dim`.
fn harmonic_basis(theta: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let mut order = 1.0;
    while out.len() < dim {
        out.push((order * theta).sin());
        if out.len() < dim {
            out.push((order * theta).cos());
        }
        order += 1.0;
    }
    out
}

/// Per-task gains on the harmonic basis: different locomotion-like modes
/// excite the sensor harmonics differently, so tasks are identifiable from
/// inputs while sharing the subject's sensor geometry. The gain folds into
/// the mixing, keeping the state dynamics exactly linear.
fn harmonic_gains(spec: &TaskSpec, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let order = (j / 2 + 1) as f64;
            let alt = if j % 2 == 0 { 1.0 } else { -1.0 };
            let high = if order >= 2.0 { 1.0 } else { 0.0 };
            1.0 + 0.1 * spec.incline * alt + 0.2 * spec.waveform * high
        })
        .collect()
}

fn target_waveform(spec: &TaskSpec, theta: f64) -> f64 {
    (1.0 + 0.3 * spec.incline) * theta.sin()
        + 0.2 * spec.incline * (2.0 * theta).sin()
        + spec.waveform * (3.0 * theta).sin()
}

/// Sample a full-rank d x d mixing matrix; rank-deficient draws are
/// resampled under an incremented seed.
fn sample_mixing(dim: usize, seed: u64) -> Tensor {
    let mut attempt = 0u64;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let data: Vec<f64> = (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if linalg::rank(&data, dim, 1e-6) == dim {
            return Tensor::matrix(dim, dim, data).expect("mixing matrix shape");
        }
        log::warn!("rank-deficient mixing matrix for seed {seed} (attempt {attempt}); resampling");
        attempt += 1;
    }
}

/// Generate one task's series: the latent phase advances by 2*pi*speed per
/// step, targets follow the shaped waveform, and states are the mixed
/// harmonic basis plus Gaussian noise. Deterministic per spec.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskSeries> {
    spec.validate(1)?;
    let d = spec.sensor_dim;
    let n = spec.samples;
    let mixing = sample_mixing(d, derive_seed(spec.seed, "mixing"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        &format!("series.task{}.session{}", spec.task, spec.session),
    ));
    let theta0: f64 = rng.gen_range(0.0..2.0 * PI);

    let gains = harmonic_gains(spec, d);
    let mut phases = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n * d);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for k in 0..n {
        let theta = theta0 + 2.0 * PI * spec.speed * k as f64;
        phases.push(theta);
        y.push(target_waveform(spec, theta));
        let basis = harmonic_basis(theta, d);
        for r in 0..d {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let eps = eps * spec.noise;
            noise.push(eps);
            let mixed: f64 =
                (0..d).map(|c| mixing.at2(r, c) * gains[c] * basis[c]).sum();
            x.push(mixed + eps);
        }
    }

    let split_m = (DEFAULT_TRAIN_FRACTION * n as f64).round() as usize;
    let series = TaskSeries {
        task: spec.task,
        x: Tensor::new(vec![n, d], x)?,
        y,
        split_m: split_m.min(n - 1),
        trials: vec![(0, n)],
        latent: Some(GenLatent { spec: spec.clone(), phases, noise, mixing }),
    };
    series.validate()?;
    Ok(series)
}

/// Generate the train+validation series and an independently seeded test
/// series of `test_samples` steps.
pub fn generate_dataset(spec: &TaskSpec, test_samples: usize) -> Result<TaskDataset> {
    let train_val = generate_task(spec)?;
    let mut test_spec = spec.clone();
    test_spec.samples = test_samples;
    test_spec.session = spec.session + 1;
    let mut test = generate_task(&test_spec)?;
    test.split_m = test.len();
    Ok(TaskDataset { train_val, test })
}

/// Apply a controlled distribution shift. Phase offsets and additive biases
/// act on the sensor states only (targets keep their demonstrated profile);
/// amplitude scaling rescales both.
pub fn apply_shift(series: &TaskSeries, shift: &ShiftSpec) -> Result<TaskSeries> {
    if !shift.magnitude.is_finite() {
        return Err(Error::Config("shift magnitude must be finite".into()));
    }
    let d = series.sensor_dim();
    let n = series.len();
    let mut out = series.clone();
    out.latent = None;
    match shift.kind {
        ShiftKind::AmplitudeScale => {
            let f = 1.0 + shift.magnitude;
            out.x = series.x.map(|v| v * f);
            out.y = series.y.iter().map(|v| v * f).collect();
        }
        ShiftKind::PhaseOffset => {
            let latent = series.latent.as_ref().ok_or_else(|| {
                Error::Usage("phase_offset shift needs a generator-produced series".into())
            })?;
            let gains = harmonic_gains(&latent.spec, d);
            let mut x = Vec::with_capacity(n * d);
            for k in 0..n {
                let basis = harmonic_basis(latent.phases[k] + shift.magnitude, d);
                for r in 0..d {
                    let mixed: f64 =
                        (0..d).map(|c| latent.mixing.at2(r, c) * gains[c] * basis[c]).sum();
                    x.push(mixed + latent.noise[k * d + r]);
                }
            }
            out.x = Tensor::new(vec![n, d], x)?;
        }
        ShiftKind::AdditiveBias => {
            let latent = series.latent.as_ref().ok_or_else(|| {
                Error::Usage("additive_bias shift needs a generator-produced series".into())
            })?;
            // bias vector in basis space, mixed into sensor space
            let bias: Vec<f64> = (0..d)
                .map(|r| (0..d).map(|c| latent.mixing.at2(r, c) * shift.magnitude).sum())
                .collect();
            let mut x = series.x.data().to_vec();
            for k in 0..n {
                for r in 0..d {
                    x[k * d + r] += bias[r];
                }
            }
            out.x = Tensor::new(vec![n, d], x)?;
        }
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSel {
    Train,
    Validation,
    All,
}

/// Cut a series into windows of `window_length` steps. A window belongs to
/// the split of its final (target) step; windows never cross trial
/// boundaries.
pub fn make_windows(series: &TaskSeries, window_length: usize, split: SplitSel) -> Vec<Window> {
    assert!(window_length >= 1, "window_length must be >= 1");
    let t = window_length;
    let d = series.sensor_dim();
    let mut out = Vec::new();
    for &(start, end) in &series.trials {
        if end - start < t {
            continue;
        }
        for k in (start + t - 1)..end {
            let in_split = match split {
                SplitSel::Train => k < series.split_m,
                SplitSel::Validation => k >= series.split_m,
                SplitSel::All => true,
            };
            if !in_split {
                continue;
            }
            let lo = k + 1 - t;
            let mut data = Vec::with_capacity(t * d);
            for row in lo..=k {
                data.extend_from_slice(series.state(row));
            }
            out.push(Window {
                inputs: Tensor::new(vec![t, d], data).expect("window shape"),
                target: series.y[k],
                task: series.task,
                step: k,
            });
        }
    }
    if out.is_empty() {
        log::warn!(
            "windowing produced no windows (T={} vs trials {:?})",
            window_length,
            series.trials
        );
    }
    out
}

/// Consecutive same-trial (x_k, y_k, x_{k+1}) index pairs; `k` is drawn from
/// the requested split and `k+1` must stay inside the same trial.
pub fn transition_indices(series: &TaskSeries, split: SplitSel) -> Vec<usize> {
    let mut out = Vec::new();
    for &(start, end) in &series.trials {
        for k in start..end.saturating_sub(1) {
            let ok = match split {
                SplitSel::Train => k + 1 < series.split_m,
                SplitSel::Validation => k >= series.split_m,
                SplitSel::All => true,
            };
            if ok {
                out.push(k);
            }
        }
    }
    out
}

/// Suite parameters shared by every task of a generated suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteParams {
    pub sensor_dim: usize,
    pub samples_per_task: usize,
    pub test_samples: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SuiteParams {
    fn default() -> Self {
        SuiteParams {
            sensor_dim: 8,
            samples_per_task: 6000,
            test_samples: 1000,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Cycles per step at unit walking speed. A gait cycle at speed 1.0 spans
/// 20 samples; suite speeds scale this base rate, keeping the sampling well
/// above Nyquist for the harmonics in use.
pub const BASE_CYCLES_PER_STEP: f64 = 0.05;

fn task_spec(params: &SuiteParams, task: TaskId, speed: f64, incline: f64, waveform: f64) -> TaskSpec {
    TaskSpec {
        task,
        speed: speed * BASE_CYCLES_PER_STEP,
        incline,
        waveform,
        sensor_dim: params.sensor_dim,
        samples: params.samples_per_task,
        noise: params.noise,
        // one subject per suite: tasks share the seed (and thus the mixing
        // matrix / sensor geometry); series draws differ per task id
        seed: params.seed,
        session: 0,
    }
}

/// Nine tasks on a 3 walking speeds x 3 inclines grid.
pub fn embry_like_suite(params: &SuiteParams) -> Vec<TaskSpec> {
    let speeds = [0.8, 1.0, 1.2];
    let inclines = [-1.0, 0.0, 1.0];
    let mut out = Vec::with_capacity(9);
    for (i, &s) in speeds.iter().enumerate() {
        for (j, &a) in inclines.iter().enumerate() {
            out.push(task_spec(params, i * inclines.len() + j, s, a, 0.0));
        }
    }
    out
}

/// Five locomotion-mode-like tasks with distinct speed/incline/waveform combos.
pub fn enabl3s_like_suite(params: &SuiteParams) -> Vec<TaskSpec> {
    let combos = [
        (1.0, 0.0, 0.0),
        (0.85, 1.5, 0.2),
        (1.15, -1.5, -0.2),
        (0.7, 2.5, 0.4),
        (1.3, -2.5, -0.4),
    ];
    combos
        .iter()
        .enumerate()
        .map(|(t, &(s, a, w))| task_spec(params, t, s, a, w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TaskSpec {
        TaskSpec {
            task: 0,
            speed: 0.07,
            incline: 0.5,
            waveform: 0.0,
            sensor_dim: 4,
            samples: 200,
            noise: 0.0,
            seed: 9, session: 0,
        }
    }

    #[test]
    fn test_generator_deterministic() {
        let a = generate_task(&small_spec()).unwrap();
        let b = generate_task(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn test_noiseless_d2_states_lie_on_ellipse() {
        // d=2, sigma=0, neutral shaping: x_k = M [sin, cos]^T traces a fixed
        // ellipse, so the quadratic form x^T (M M^T)^{-1} x is constant.
        let mut spec = small_spec();
        spec.sensor_dim = 2;
        spec.incline = 0.0;
        spec.waveform = 0.0;
        let series = generate_task(&spec).unwrap();
        let m = &series.latent.as_ref().unwrap().mixing;
        // gram = M M^T
        let g = [
            m.at2(0, 0) * m.at2(0, 0) + m.at2(0, 1) * m.at2(0, 1),
            m.at2(0, 0) * m.at2(1, 0) + m.at2(0, 1) * m.at2(1, 1),
            m.at2(1, 0) * m.at2(0, 0) + m.at2(1, 1) * m.at2(0, 1),
            m.at2(1, 0) * m.at2(1, 0) + m.at2(1, 1) * m.at2(1, 1),
        ];
        let det = g[0] * g[3] - g[1] * g[2];
        let inv = [g[3] / det, -g[1] / det, -g[2] / det, g[0] / det];
        let quad = |x: &[f64]| {
            inv[0] * x[0] * x[0] + (inv[1] + inv[2]) * x[0] * x[1] + inv[3] * x[1] * x[1]
        };
        let c0 = quad(series.state(0));
        for k in 1..series.len() {
            assert!((quad(series.state(k)) - c0).abs() < 1e-9);
        }
    }

    #[test]
    fn test_noiseless_dynamics_linearly_realizable() {
        // sigma=0, even d: regressing x_{k+1} on (x_k, y_k) attains R^2 > 0.99.
        let mut spec = small_spec();
        spec.sensor_dim = 4;
        spec.samples = 400;
        let series = generate_task(&spec).unwrap();
        let idx = transition_indices(&series, SplitSel::All);
        let rows: Vec<Vec<f64>> = idx
            .iter()
            .map(|&k| {
                let mut r = series.state(k).to_vec();
                r.push(series.y[k]);
                r.push(1.0);
                r
            })
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        for feat in 0..spec.sensor_dim {
            let targets: Vec<f64> = idx.iter().map(|&k| series.state(k + 1)[feat]).collect();
            let w = linalg::lstsq(&refs, &targets, 1e-10).unwrap();
            let mean = targets.iter().sum::<f64>() / targets.len() as f64;
            let mut ss_res = 0.0;
            let mut ss_tot = 0.0;
            for (row, &t) in refs.iter().zip(&targets) {
                let pred: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
                ss_res += (t - pred) * (t - pred);
                ss_tot += (t - mean) * (t - mean);
            }
            let r2 = 1.0 - ss_res / ss_tot;
            assert!(r2 > 0.99, "feature {feat}: R^2 = {r2}");
        }
    }

    #[test]
    fn test_zero_shift_is_identity() {
        let series = generate_task(&small_spec()).unwrap();
        for kind in [ShiftKind::PhaseOffset, ShiftKind::AmplitudeScale, ShiftKind::AdditiveBias] {
            let shifted = apply_shift(&series, &ShiftSpec { kind, magnitude: 0.0 }).unwrap();
            let max_dx = series
                .x
                .data()
                .iter()
                .zip(shifted.x.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_dx < 1e-12, "{kind:?} at 0 moved states by {max_dx}");
            assert_eq!(series.y, shifted.y);
        }
    }

    #[test]
    fn test_additive_bias_shifts_means_exactly() {
        let series = generate_task(&small_spec()).unwrap();
        let b = 0.7;
        let shifted =
            apply_shift(&series, &ShiftSpec { kind: ShiftKind::AdditiveBias, magnitude: b }).unwrap();
        let m = &series.latent.as_ref().unwrap().mixing;
        let d = series.sensor_dim();
        for r in 0..d {
            let expected: f64 = (0..d).map(|c| m.at2(r, c) * b).sum();
            let mean_before: f64 =
                (0..series.len()).map(|k| series.state(k)[r]).sum::<f64>() / series.len() as f64;
            let mean_after: f64 =
                (0..series.len()).map(|k| shifted.state(k)[r]).sum::<f64>() / series.len() as f64;
            assert!((mean_after - mean_before - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn test_window_counts() {
        let mut series = generate_task(&small_spec()).unwrap();
        series.trials = vec![(0, 5)];
        series.split_m = 5;
        series.y.truncate(0); // rebuild a tiny series below
        let d = 4;
        let x: Vec<f64> = (0..5 * d).map(|v| v as f64 * 0.01).collect();
        series.x = Tensor::new(vec![5, d], x).unwrap();
        series.y = vec![0.0; 5];
        series.latent = None;
        assert_eq!(make_windows(&series, 5, SplitSel::All).len(), 1);
        assert_eq!(make_windows(&series, 2, SplitSel::All).len(), 4);
        // alignment: window k's last input row equals series row k
        let ws = make_windows(&series, 2, SplitSel::All);
        for w in &ws {
            assert_eq!(w.inputs.row(1), series.state(w.step));
        }
    }

    #[test]
    fn test_windows_do_not_cross_trials() {
        let mut series = generate_task(&small_spec()).unwrap();
        let n = series.len();
        series.trials = vec![(0, 50), (50, n)];
        let ws = make_windows(&series, 10, SplitSel::All);
        for w in &ws {
            let lo = w.step + 1 - 10;
            assert!(
                (lo >= 50 && w.step >= 50) || (w.step < 50),
                "window [{lo}, {}] straddles the trial boundary at 50",
                w.step
            );
        }
        // counts: max(0, len - T + 1) per trial
        assert_eq!(ws.len(), (50 - 10 + 1) + (n - 50 - 10 + 1));
    }

    #[test]
    fn test_window_longer_than_trials_yields_empty() {
        let mut series = generate_task(&small_spec()).unwrap();
        let n = series.len();
        series.trials = vec![(0, 5), (5, 9), (9, n)];
        let ws = make_windows(&series, 400, SplitSel::All);
        assert!(ws.is_empty());
    }

    #[test]
    fn test_split_disjoint_and_exhaustive() {
        let series = generate_task(&small_spec()).unwrap();
        let t = 7;
        let train = make_windows(&series, t, SplitSel::Train);
        let val = make_windows(&series, t, SplitSel::Validation);
        let all = make_windows(&series, t, SplitSel::All);
        assert_eq!(train.len() + val.len(), all.len());
        for w in &train {
            assert!(w.step < series.split_m);
        }
        for w in &val {
            assert!(w.step >= series.split_m);
        }
    }

    #[test]
    fn test_suite_shapes() {
        let params = SuiteParams { samples_per_task: 64, test_samples: 32, ..Default::default() };
        assert_eq!(embry_like_suite(&params).len(), 9);
        assert_eq!(enabl3s_like_suite(&params).len(), 5);
        let suite = embry_like_suite(&params);
        // one subject per suite: shared seed (shared sensor geometry),
        // distinct task ids driving distinct series
        assert!(suite.iter().all(|s| s.seed == suite[0].seed));
        let a = generate_task(&suite[0]).unwrap();
        let b = generate_task(&suite[1]).unwrap();
        assert_eq!(a.latent.as_ref().unwrap().mixing, b.latent.as_ref().unwrap().mixing);
        assert_ne!(a.x, b.x);
    }

    #[test]
    fn test_spec_validation() {
        let mut spec = small_spec();
        spec.speed = 0.0;
        assert!(spec.validate(1).is_err());
        let mut spec = small_spec();
        spec.sensor_dim = 1;
        assert!(spec.validate(1).is_err());
        let mut spec = small_spec();
        spec.samples = 10;
        assert!(spec.validate(10).is_err());
    }
}
