//! Nonlinear-dynamics analysis: Lyapunov exponents from scalar series via
//! local tangent maps with QR re-orthonormalization, an executable
//! demonstrator of the exponential compounding bound, and closed-loop
//! rollouts that use the learned dynamics model as environment surrogate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{MultiTaskModel, ProspectiveModel, TaskId, Window};
use crate::nd::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    /// Embedding dimension.
    pub embedding_dim: usize,
    /// Embedding delay in steps.
    pub delay: usize,
    /// Minimum neighbors per reference point.
    pub min_neighbors: usize,
    /// Dimension of the fitted local tangent maps; (embedding_dim - 1) must
    /// be divisible by (matrix_dim - 1).
    pub matrix_dim: usize,
    /// Multiplier on the natural map spacing between chained tangent maps.
    pub evolution_step: usize,
    /// Fraction of reference points allowed to lack neighbors before the
    /// estimate is rejected.
    pub max_failure_fraction: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            embedding_dim: 5,
            delay: 1,
            min_neighbors: 15,
            matrix_dim: 2,
            evolution_step: 1,
            max_failure_fraction: 0.2,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 || self.delay < 1 || self.evolution_step < 1 {
            return Err(Error::Config("embedding_dim >= 2, delay >= 1, evolution_step >= 1".into()));
        }
        if self.matrix_dim < 2 || self.matrix_dim > self.embedding_dim {
            return Err(Error::Config("matrix_dim must be in [2, embedding_dim]".into()));
        }
        if (self.embedding_dim - 1) % (self.matrix_dim - 1) != 0 {
            return Err(Error::Config(
                "(embedding_dim - 1) must be divisible by (matrix_dim - 1)".into(),
            ));
        }
        if self.min_neighbors < self.matrix_dim + 1 {
            return Err(Error::Config("min_neighbors must exceed matrix_dim".into()));
        }
        Ok(())
    }

    /// Time spacing between companion coordinates (and chained maps).
    pub fn spacing(&self) -> usize {
        (self.embedding_dim - 1) * self.delay / (self.matrix_dim - 1)
    }
}

/// Largest two Lyapunov exponents of a scalar series by the local-linear
/// tangent-map method: delay-embed, fit a companion-form map around each
/// reference point from its neighbors, and average the log of the QR
/// diagonal along the orbit. The series is standardized first, so the
/// estimate is invariant to affine rescaling.
pub fn lyapunov_eckmann(series: &[f64], config: &EmbeddingConfig) -> Result<(f64, f64)> {
    config.validate()?;
    let m = config.embedding_dim;
    let tau = config.delay;
    let d_m = config.matrix_dim;
    let q = config.spacing() * config.evolution_step;
    let span = (m - 1) * tau;
    if series.len() <= span + q + 1 {
        return Err(Error::Insufficient("series too short for embedding".into()));
    }
    let n_embedded = series.len() - span;
    if n_embedded < 500 {
        return Err(Error::Insufficient(format!(
            "need >= 500 embedded points, got {n_embedded}; provide a longer series"
        )));
    }

    // standardize
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / series.len() as f64;
    if var == 0.0 {
        return Err(Error::Data("constant series has no dynamics".into()));
    }
    let s: Vec<f64> = series.iter().map(|v| (v - mean) / var.sqrt()).collect();

    // usable reference/neighbor indices: need i + span + q in range
    let usable = s.len() - span - q;
    let max_radius = 0.5;

    let dist = |i: usize, j: usize| -> f64 {
        let mut worst = 0.0f64;
        for k in 0..m {
            worst = worst.max((s[i + k * tau] - s[j + k * tau]).abs());
        }
        worst
    };

    // orthonormal frame of d_m columns
    let mut frame = vec![0.0; d_m * d_m];
    for i in 0..d_m {
        frame[i * d_m + i] = 1.0;
    }
    let mut log_sums = vec![0.0; d_m];
    let mut links = 0usize;
    let mut failures = 0usize;
    let mut points = 0usize;

    let mut i = 0usize;
    while i < usable {
        points += 1;
        // neighbors: k-NN with a radius cap
        let mut cands: Vec<(f64, usize)> = Vec::new();
        for j in 0..usable {
            if j == i {
                continue;
            }
            let dij = dist(i, j);
            if dij <= max_radius {
                cands.push((dij, j));
            }
        }
        if cands.len() < config.min_neighbors {
            failures += 1;
            i += q;
            continue;
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0));
        cands.truncate(config.min_neighbors.max(d_m + 2));

        // companion-form fit: last row of the d_m x d_m map
        let rows: Vec<Vec<f64>> = cands
            .iter()
            .map(|&(_, j)| {
                (0..d_m).map(|c| s[j + c * q] - s[i + c * q]).collect()
            })
            .collect();
        let targets: Vec<f64> =
            cands.iter().map(|&(_, j)| s[j + d_m * q] - s[i + d_m * q]).collect();
        let row_refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let coeffs = match linalg::lstsq(&row_refs, &targets, 1e-8) {
            Ok(c) => c,
            Err(_) => {
                failures += 1;
                i += q;
                continue;
            }
        };

        // T = companion matrix: shift rows up, fitted last row
        // new_frame = T * frame
        let mut mapped = vec![0.0; d_m * d_m];
        for col in 0..d_m {
            for r in 0..d_m - 1 {
                mapped[r * d_m + col] = frame[(r + 1) * d_m + col];
            }
            let mut acc = 0.0;
            for (c, coeff) in coeffs.iter().enumerate() {
                acc += coeff * frame[c * d_m + col];
            }
            mapped[(d_m - 1) * d_m + col] = acc;
        }
        // QR by modified Gram-Schmidt; R diagonal feeds the exponents
        let mut qmat = mapped;
        for col in 0..d_m {
            let mut norm = 0.0;
            for r in 0..d_m {
                norm += qmat[r * d_m + col] * qmat[r * d_m + col];
            }
            let norm = norm.sqrt();
            if norm < 1e-300 {
                failures += 1;
                break;
            }
            log_sums[col] += norm.ln();
            for r in 0..d_m {
                qmat[r * d_m + col] /= norm;
            }
            for next in col + 1..d_m {
                let mut proj = 0.0;
                for r in 0..d_m {
                    proj += qmat[r * d_m + col] * qmat[r * d_m + next];
                }
                for r in 0..d_m {
                    qmat[r * d_m + next] -= proj * qmat[r * d_m + col];
                }
            }
        }
        frame = qmat;
        links += 1;
        i += q;
    }

    if points == 0 || (failures as f64) / (points as f64) > config.max_failure_fraction {
        return Err(Error::Insufficient(format!(
            "{failures}/{points} reference points lacked neighbors; increase the radius or \
             series length"
        )));
    }
    if links == 0 {
        return Err(Error::Insufficient("no tangent maps could be fitted".into()));
    }
    let per_step = (links * q) as f64;
    let mut exps: Vec<f64> = log_sums.iter().map(|l| l / per_step).collect();
    exps.sort_by(|a, b| b.total_cmp(a));
    Ok((exps[0], if d_m > 1 { exps[1] } else { f64::NEG_INFINITY }))
}

/// Closure-driven compounding scenario: reference trajectory, predictor f,
/// dynamics g, Lipschitz constant, and a perturbed start.
pub struct CompoundingScenario<'a> {
    pub reference: Vec<Vec<f64>>,
    pub predictor: Box<dyn Fn(&[f64]) -> f64 + 'a>,
    pub dynamics: Box<dyn Fn(&[f64], f64) -> Vec<f64> + 'a>,
    pub lipschitz: f64,
    pub initial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    /// d(x'_k, x_k) for k = 1..N (Euclidean).
    pub deviations: Vec<f64>,
    /// C^(k-1) * d(x'_1, x_1).
    pub bound: Vec<f64>,
    /// True when a non-finite state truncated the rollout.
    pub truncated: bool,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Roll x'_{k+1} = g[x'_k, f(x'_k)] alongside the reference series and
/// report deviations next to the exponential bound curve.
pub fn compounding_rollout(scenario: &CompoundingScenario<'_>) -> Result<RolloutResult> {
    if scenario.lipschitz <= 0.0 {
        return Err(Error::Config("lipschitz constant must be > 0".into()));
    }
    let n = scenario.reference.len();
    if n == 0 {
        return Err(Error::Data("empty reference trajectory".into()));
    }
    let d1 = euclidean(&scenario.initial, &scenario.reference[0]);
    let mut deviations = Vec::with_capacity(n);
    let mut bound = Vec::with_capacity(n);
    let mut state = scenario.initial.clone();
    let mut truncated = false;
    for k in 0..n {
        deviations.push(euclidean(&state, &scenario.reference[k]));
        bound.push(scenario.lipschitz.powi(k as i32) * d1);
        if k + 1 < n {
            let y = (scenario.predictor)(&state);
            state = (scenario.dynamics)(&state, y);
            if !y.is_finite() || state.iter().any(|v| !v.is_finite()) {
                truncated = true;
                deviations.truncate(k + 1);
                bound.truncate(k + 1);
                break;
            }
        }
    }
    Ok(RolloutResult { deviations, bound, truncated })
}

/// Check the scenario's Lipschitz condition d(g[x, f(x)], x_{k+1}) <=
/// C * d(x, x_k) on sampled states around the reference trajectory.
/// Returns the worst observed ratio.
pub fn verify_lipschitz(
    scenario: &CompoundingScenario<'_>,
    samples_per_step: usize,
    spread: f64,
    seed: u64,
) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..scenario.reference.len() - 1 {
        for _ in 0..samples_per_step {
            let x: Vec<f64> = scenario.reference[k]
                .iter()
                .map(|v| v + rng.gen_range(-spread..spread))
                .collect();
            let denom = euclidean(&x, &scenario.reference[k]);
            if denom == 0.0 {
                continue;
            }
            let y = (scenario.predictor)(&x);
            let next = (scenario.dynamics)(&x, y);
            let num = euclidean(&next, &scenario.reference[k + 1]);
            worst = worst.max(num / denom);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopResult {
    /// Imagined sensor states, one per horizon step.
    pub imagined: Vec<Vec<f64>>,
    /// Euclidean deviation from the true series per step.
    pub deviations: Vec<f64>,
    pub truncated: bool,
}

/// Alternate the predictor and the learned dynamics model as an environment
/// surrogate: predict y from the current window, imagine the next state,
/// shift the window, repeat for `horizon` steps. Deviations compare against
/// the held-out true states following the window.
pub fn closed_loop_eval(
    model: &MultiTaskModel,
    g: &ProspectiveModel,
    task: TaskId,
    initial: &Window,
    true_next: &[&[f64]],
    horizon: usize,
) -> Result<ClosedLoopResult> {
    if horizon < 1 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    if true_next.len() < horizon {
        return Err(Error::Data(format!(
            "need {horizon} true states, got {}",
            true_next.len()
        )));
    }
    let t_len = initial.inputs.rows();
    let d = initial.inputs.cols();
    let mut window = initial.clone();
    let mut imagined = Vec::with_capacity(horizon);
    let mut deviations = Vec::with_capacity(horizon);
    let mut truncated = false;
    for h in 0..horizon {
        let y_hat = model.predict(task, &window)?;
        let last = window.inputs.row(t_len - 1).to_vec();
        let x_hat = g.prospect(&last, y_hat)?;
        if x_hat.iter().any(|v| !v.is_finite()) {
            truncated = true;
            break;
        }
        deviations.push(euclidean(&x_hat, true_next[h]));
        let mut data = window.inputs.data()[d..].to_vec();
        data.extend_from_slice(&x_hat);
        window = Window {
            inputs: Tensor::new(vec![t_len, d], data)?,
            target: window.target,
            task,
            step: window.step + 1,
        };
        imagined.push(x_hat);
    }
    Ok(ClosedLoopResult { imagined, deviations, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logistic_series(n: usize, x0: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        let mut x = x0;
        for _ in 0..n {
            out.push(x);
            x = 4.0 * x * (1.0 - x);
        }
        out
    }

    fn henon_series(n: usize) -> (Vec<f64>, Vec<(f64, f64)>) {
        let (a, b) = (1.4, 0.3);
        let mut x = 0.1;
        let mut y = 0.1;
        // discard transient
        for _ in 0..1000 {
            let nx = 1.0 - a * x * x + y;
            y = b * x;
            x = nx;
        }
        let mut series = Vec::with_capacity(n);
        let mut states = Vec::with_capacity(n);
        for _ in 0..n {
            series.push(x);
            states.push((x, y));
            let nx = 1.0 - a * x * x + y;
            y = b * x;
            x = nx;
        }
        (series, states)
    }

    /// Direct derivative-sum oracle for the logistic map.
    fn logistic_lyapunov_oracle(series: &[f64]) -> f64 {
        series.iter().map(|x| (4.0 - 8.0 * x).abs().ln()).sum::<f64>() / series.len() as f64
    }

    /// Jacobian-product oracle for the Henon map along the same orbit.
    fn henon_lyapunov_oracle(states: &[(f64, f64)]) -> f64 {
        let (a, b) = (1.4, 0.3);
        let mut v = [1.0, 0.0];
        let mut acc = 0.0;
        for &(x, _) in states {
            let jv = [-2.0 * a * x * v[0] + v[1], b * v[0]];
            let norm = (jv[0] * jv[0] + jv[1] * jv[1]).sqrt();
            acc += norm.ln();
            v = [jv[0] / norm, jv[1] / norm];
        }
        acc / states.len() as f64
    }

    #[test]
    fn test_lyapunov_logistic_map() {
        let series = logistic_series(4000, 0.34567);
        let oracle = logistic_lyapunov_oracle(&series);
        assert!((oracle - (2.0f64).ln()).abs() < 0.02, "oracle sanity: {oracle}");
        let cfg = EmbeddingConfig { embedding_dim: 2, ..Default::default() };
        let (l1, _) = lyapunov_eckmann(&series, &cfg).unwrap();
        assert!((l1 - (2.0f64).ln()).abs() < 0.05, "lambda1 {l1} vs ln 2");
    }

    #[test]
    fn test_lyapunov_henon_map() {
        let (series, states) = henon_series(4000);
        let oracle = henon_lyapunov_oracle(&states);
        assert!((oracle - 0.419).abs() < 0.02, "oracle sanity: {oracle}");
        let cfg = EmbeddingConfig { embedding_dim: 2, ..Default::default() };
        let (l1, l2) = lyapunov_eckmann(&series, &cfg).unwrap();
        assert!((l1 - oracle).abs() < 0.05, "lambda1 {l1} vs oracle {oracle}");
        assert!(l2 < l1);
    }

    #[test]
    fn test_lyapunov_sinusoid_not_chaotic() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let series: Vec<f64> = (0..3000)
            .map(|i| (0.37 * i as f64).sin() + rng.gen_range(-1e-4..1e-4))
            .collect();
        let (l1, _) = lyapunov_eckmann(&series, &EmbeddingConfig::default()).unwrap();
        assert!(l1 <= 0.01, "sinusoid lambda1 {l1}");
    }

    #[test]
    fn test_lyapunov_affine_invariance() {
        let series = logistic_series(3000, 0.2222);
        let cfg = EmbeddingConfig { embedding_dim: 2, ..Default::default() };
        let (l1, _) = lyapunov_eckmann(&series, &cfg).unwrap();
        let scaled: Vec<f64> = series.iter().map(|v| 37.0 * v - 11.0).collect();
        let (l1s, _) = lyapunov_eckmann(&scaled, &cfg).unwrap();
        assert!((l1 - l1s).abs() < 0.01, "{l1} vs {l1s}");
    }

    #[test]
    fn test_lyapunov_short_series_rejected() {
        let series = logistic_series(300, 0.4);
        assert!(matches!(
            lyapunov_eckmann(&series, &EmbeddingConfig::default()),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn test_compounding_zero_initial_deviation() {
        let scenario = CompoundingScenario {
            reference: vec![vec![0.0]; 10],
            predictor: Box::new(|x: &[f64]| x[0]),
            dynamics: Box::new(|x: &[f64], _y| vec![x[0] * 1.5]),
            lipschitz: 1.5,
            initial: vec![0.0],
        };
        let out = compounding_rollout(&scenario).unwrap();
        assert!(out.deviations.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn test_compounding_tightness_construction() {
        // x_k = 0, g[x, f(x)] = (1 + kappa) x: deviation == C^(k-1) |x'_1|
        let kappa = 0.5;
        let c = 1.0 + kappa;
        let scenario = CompoundingScenario {
            reference: vec![vec![0.0]; 20],
            predictor: Box::new(|x: &[f64]| x[0]),
            dynamics: Box::new(move |x: &[f64], _y| vec![x[0] + kappa * x[0]]),
            lipschitz: c,
            initial: vec![0.7],
        };
        let out = compounding_rollout(&scenario).unwrap();
        for (k, (dev, bound)) in out.deviations.iter().zip(&out.bound).enumerate() {
            let expected = c.powi(k as i32) * 0.7;
            assert!(
                ((dev - expected) / expected).abs() < 1e-9,
                "k={k}: {dev} vs {expected}"
            );
            assert!(((bound - expected) / expected).abs() < 1e-12);
        }
        // Lipschitz condition verifiably holds around the reference
        let worst = verify_lipschitz(&scenario, 50, 0.5, 1).unwrap();
        assert!(worst <= c + 1e-9, "worst ratio {worst}");
    }

    #[test]
    fn test_compounding_contractive_stays_under_bound() {
        let scenario = CompoundingScenario {
            reference: vec![vec![0.0]; 30],
            predictor: Box::new(|x: &[f64]| x[0]),
            dynamics: Box::new(|x: &[f64], _y| vec![0.5 * x[0]]),
            lipschitz: 0.5,
            initial: vec![1.0],
        };
        let out = compounding_rollout(&scenario).unwrap();
        for (dev, bound) in out.deviations.iter().zip(&out.bound) {
            assert!(dev <= &(bound + 1e-12));
        }
    }

    #[test]
    fn test_compounding_truncates_on_divergence() {
        let scenario = CompoundingScenario {
            reference: vec![vec![0.0]; 400],
            predictor: Box::new(|x: &[f64]| x[0]),
            dynamics: Box::new(|x: &[f64], _y| vec![x[0] * 10.0]),
            lipschitz: 10.0,
            initial: vec![1.0],
        };
        let out = compounding_rollout(&scenario).unwrap();
        assert!(out.truncated);
        assert!(out.deviations.len() < 400);
    }

    #[test]
    fn test_closed_loop_h1_equals_prospect() {
        let d = 3usize;
        let t_len = 4usize;
        let mut model = {
            use crate::models::{BackboneConfig, BackboneKind, HeadMode, ModelConfig};
            let mut backbone = BackboneConfig::default_for(BackboneKind::Mlp, d, t_len);
            backbone.hidden_channels = 8;
            let config =
                ModelConfig { backbone, head_mode: HeadMode::TaskSpecific, head_hidden: 8 };
            MultiTaskModel::new(config, 2).unwrap()
        };
        model.add_task_head(0).unwrap();
        let g = ProspectiveModel::new(d, 16, 5);
        let window = Window {
            inputs: Tensor::new(vec![t_len, d], (0..t_len * d).map(|v| v as f64 * 0.1).collect())
                .unwrap(),
            target: 0.0,
            task: 0,
            step: t_len - 1,
        };
        let y_hat = model.predict(0, &window).unwrap();
        let direct = g.prospect(window.inputs.row(t_len - 1), y_hat).unwrap();
        let truth = vec![0.0; d];
        let out = closed_loop_eval(&model, &g, 0, &window, &[&truth], 1).unwrap();
        assert_eq!(out.imagined.len(), 1);
        assert_eq!(out.imagined[0], direct);
    }
}
