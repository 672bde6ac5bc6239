//! Adversarial (FGSM) and stochastic input perturbations, and linear/MLP
//! probing of backbone representations.
//!
//! FGSM operates in per-feature standardized units: the perturbation added
//! to feature j is tau * sigma_j * sign(dJ/dx), with sigma_j taken from the
//! clean test inputs. Pass unit stds to work in raw units.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::models::{MultiTaskModel, TaskId, Window};
use crate::nd::{Tape, Tensor};

/// Per-feature standard deviations over all rows of the given windows.
pub fn feature_stds(windows: &[&Window]) -> Vec<f64> {
    if windows.is_empty() {
        return vec![];
    }
    let d = windows[0].inputs.cols();
    let mut count = 0usize;
    let mut mean = vec![0.0; d];
    for w in windows {
        for r in 0..w.inputs.rows() {
            for (m, v) in mean.iter_mut().zip(w.inputs.row(r)) {
                *m += v;
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; d];
    for w in windows {
        for r in 0..w.inputs.rows() {
            for (v, (x, m)) in var.iter_mut().zip(w.inputs.row(r).iter().zip(&mean)) {
                *v += (x - m) * (x - m);
            }
        }
    }
    var.iter().map(|v| (v / count as f64).sqrt()).collect()
}

/// FGSM on a batch of same-task windows: x' = x + tau * sigma .* sign(dJ/dx)
/// with J the squared error against each window's ground-truth target.
pub fn fgsm_perturb_batch(
    model: &MultiTaskModel,
    task: TaskId,
    windows: &[&Window],
    tau: f64,
    stds: &[f64],
) -> Result<Vec<Window>> {
    if tau < 0.0 {
        return Err(Error::Config(format!("fgsm tau must be >= 0, got {tau}")));
    }
    if windows.is_empty() {
        return Ok(vec![]);
    }
    let d = windows[0].inputs.cols();
    if stds.len() != d {
        return Err(Error::shape("fgsm", format!("{} stds for {d} features", stds.len())));
    }
    let t_len = windows[0].inputs.rows();

    let mut tape = Tape::new();
    let binding = model.bind_params(&mut tape, &BTreeSet::from([task]))?;
    let (input, pred) = model.forward_graph(&mut tape, &binding, task, windows)?;
    let y: Vec<f64> = windows.iter().map(|w| w.target).collect();
    let target = tape.leaf(Tensor::new(vec![windows.len(), 1], y)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.sum(sq)?;
    let grads = tape.backward(loss)?;
    let grad = grads.wrt(input)?;

    let mut out = Vec::with_capacity(windows.len());
    for (b, w) in windows.iter().enumerate() {
        let mut data = w.inputs.data().to_vec();
        for r in 0..t_len {
            let grow = grad.row(b * t_len + r);
            for (c, v) in data[r * d..(r + 1) * d].iter_mut().enumerate() {
                *v += tau * stds[c] * sign(grow[c]);
            }
        }
        out.push(Window {
            inputs: Tensor::new(vec![t_len, d], data)?,
            target: w.target,
            task: w.task,
            step: w.step,
        });
    }
    Ok(out)
}

/// Single-window FGSM.
pub fn fgsm_perturb(
    model: &MultiTaskModel,
    task: TaskId,
    window: &Window,
    tau: f64,
    stds: &[f64],
) -> Result<Window> {
    Ok(fgsm_perturb_batch(model, task, &[window], tau, stds)?.remove(0))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Seeded white-Gaussian input perturbation: per-element noise with standard
/// deviation level * sigma_feature.
pub fn noise_perturb(
    windows: &[&Window],
    level: f64,
    stds: &[f64],
    seed: u64,
) -> Result<Vec<Window>> {
    if level < 0.0 {
        return Err(Error::Config("noise level must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "noise_perturb"));
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        let (t_len, d) = (w.inputs.rows(), w.inputs.cols());
        let mut data = w.inputs.data().to_vec();
        for r in 0..t_len {
            for c in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                data[r * d + c] += z * level * stds[c];
            }
        }
        out.push(Window {
            inputs: Tensor::new(vec![t_len, d], data)?,
            target: w.target,
            task: w.task,
            step: w.step,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of windows held out for the reported accuracy.
    pub holdout: f64,
}

impl ProbeConfig {
    pub fn new(kind: ProbeKind) -> Self {
        ProbeConfig {
            kind,
            hidden: 32,
            epochs: 50,
            learning_rate: 1e-2,
            batch_size: 100,
            holdout: 0.3,
        }
    }
}

/// Freeze the model, extract backbone features for the labeled windows, and
/// train a softmax (or one-hidden-layer MLP) task classifier. Returns
/// held-out accuracy. The evaluated model is never mutated.
pub fn probe_train_eval(
    model: &MultiTaskModel,
    windows: &[&Window],
    config: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    probe_impl(model, windows, None, config, seed)
}

/// Cross-set probing: train the classifier on one window set, report
/// accuracy on a separate one (e.g. a held-out recording session).
pub fn probe_train_eval_on(
    model: &MultiTaskModel,
    train_windows: &[&Window],
    eval_windows: &[&Window],
    config: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    probe_impl(model, train_windows, Some(eval_windows), config, seed)
}

fn probe_impl(
    model: &MultiTaskModel,
    windows: &[&Window],
    eval_windows: Option<&[&Window]>,
    config: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let classes: Vec<TaskId> = {
        let set: BTreeSet<TaskId> = windows.iter().map(|w| w.task).collect();
        set.into_iter().collect()
    };
    if classes.len() < 2 {
        return Err(Error::Data(format!("probe needs >= 2 classes, got {}", classes.len())));
    }
    let class_of = |task: TaskId| classes.iter().position(|&t| t == task).unwrap();
    let f_dim = model.config.backbone.feature_dim();
    let n_classes = classes.len();

    // frozen features of the probe-training set, then of the eval set
    let all: Vec<&Window> = match eval_windows {
        Some(ev) => windows.iter().chain(ev.iter()).copied().collect(),
        None => windows.to_vec(),
    };
    let mut feats = Vec::with_capacity(all.len() * f_dim);
    let mut labels = Vec::with_capacity(all.len());
    for w in &all {
        feats.extend_from_slice(model.backbone_features(w)?.data());
        labels.push(class_of(w.task));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "probe"));
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = match eval_windows {
        Some(ev) => ((0..windows.len()).collect(), (windows.len()..windows.len() + ev.len()).collect()),
        None => {
            let mut order: Vec<usize> = (0..windows.len()).collect();
            order.shuffle(&mut rng);
            let holdout_n = ((windows.len() as f64) * config.holdout).round() as usize;
            let holdout_n = holdout_n.clamp(1, windows.len() - 1);
            let (t, tr) = order.split_at(holdout_n);
            (tr.to_vec(), t.to_vec())
        }
    };
    let (test_idx, train_idx) = (test_idx.as_slice(), train_idx.as_slice());

    // classifier parameters
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "probe.init"));
    let (mut w1, mut b1, mut w2, mut b2) = match config.kind {
        ProbeKind::Linear => (
            Tensor::kaiming_uniform(vec![f_dim, n_classes], f_dim, &mut init_rng),
            Tensor::zeros(vec![n_classes]),
            None,
            None,
        ),
        ProbeKind::Mlp => (
            Tensor::kaiming_uniform(vec![f_dim, config.hidden], f_dim, &mut init_rng),
            Tensor::zeros(vec![config.hidden]),
            Some(Tensor::kaiming_uniform(vec![config.hidden, n_classes], config.hidden, &mut init_rng)),
            Some(Tensor::zeros(vec![n_classes])),
        ),
    };

    let forward = |tape: &mut Tape,
                   w1: &Tensor,
                   b1: &Tensor,
                   w2: &Option<Tensor>,
                   b2: &Option<Tensor>,
                   batch: &[usize],
                   feats: &[f64]|
     -> Result<(Vec<crate::nd::NodeId>, crate::nd::NodeId)> {
        let mut data = Vec::with_capacity(batch.len() * f_dim);
        for &i in batch {
            data.extend_from_slice(&feats[i * f_dim..(i + 1) * f_dim]);
        }
        let x = tape.leaf(Tensor::new(vec![batch.len(), f_dim], data)?);
        let n1 = tape.leaf(w1.clone());
        let nb1 = tape.leaf(b1.clone());
        let lin1 = tape.matmul(x, n1)?;
        let z1 = tape.add_bias(lin1, nb1)?;
        let mut params = vec![n1, nb1];
        let logits = match (w2, b2) {
            (Some(w2), Some(b2)) => {
                let act = tape.relu(z1)?;
                let n2 = tape.leaf(w2.clone());
                let nb2 = tape.leaf(b2.clone());
                let lin2 = tape.matmul(act, n2)?;
                let z2 = tape.add_bias(lin2, nb2)?;
                params.push(n2);
                params.push(nb2);
                z2
            }
            _ => z1,
        };
        Ok((params, logits))
    };

    // plain SGD on cross-entropy
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "probe.train"));
    let mut train: Vec<usize> = train_idx.to_vec();
    for _ in 0..config.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let (params, logits) = forward(&mut tape, &w1, &b1, &w2, &b2, batch, &feats)?;
            let lse = tape.log_sum_exp_rows(logits)?;
            let idx: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let picked = tape.select_cols(logits, idx)?;
            let nll = tape.sub(lse, picked)?;
            let loss = tape.mean(nll)?;
            let grads = tape.backward(loss)?;
            let lr = config.learning_rate;
            let apply = |t: &mut Tensor, node: crate::nd::NodeId| {
                if let Some(g) = grads.get(node) {
                    for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * gv;
                    }
                }
            };
            apply(&mut w1, params[0]);
            apply(&mut b1, params[1]);
            if let (Some(w2t), Some(b2t)) = (&mut w2, &mut b2) {
                apply(w2t, params[2]);
                apply(b2t, params[3]);
            }
        }
    }

    // held-out accuracy
    let mut tape = Tape::new();
    let (_, logits) = forward(&mut tape, &w1, &b1, &w2, &b2, test_idx, &feats)?;
    let v = tape.value(logits);
    let mut correct = 0usize;
    for (row, &i) in test_idx.iter().enumerate() {
        let scores = v.row(row);
        let argmax = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(c, _)| c)
            .unwrap();
        if argmax == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BackboneConfig, BackboneKind, HeadMode, ModelConfig};
    use rand::Rng;

    fn model_with_head(d: usize, t: usize) -> MultiTaskModel {
        let mut backbone = BackboneConfig::default_for(BackboneKind::Tcn, d, t);
        backbone.hidden_channels = 8;
        let config = ModelConfig { backbone, head_mode: HeadMode::TaskSpecific, head_hidden: 8 };
        let mut m = MultiTaskModel::new(config, 3).unwrap();
        m.add_task_head(0).unwrap();
        m
    }

    fn random_window(task: TaskId, t: usize, d: usize, rng: &mut impl Rng) -> Window {
        let data: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Window {
            inputs: Tensor::new(vec![t, d], data).unwrap(),
            target: rng.gen_range(-1.0..1.0),
            task,
            step: t,
        }
    }

    #[test]
    fn test_fgsm_zero_tau_is_identity() {
        let model = model_with_head(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_window(0, 4, 3, &mut rng);
        let out = fgsm_perturb(&model, 0, &w, 0.0, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out.inputs, w.inputs);
    }

    #[test]
    fn test_fgsm_rejects_negative_tau() {
        let model = model_with_head(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_window(0, 4, 3, &mut rng);
        assert!(fgsm_perturb(&model, 0, &w, -0.1, &[1.0; 3]).is_err());
    }

    #[test]
    fn test_fgsm_sign_structure() {
        // every element moves by exactly +/- tau*sigma or 0
        let model = model_with_head(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_window(0, 4, 3, &mut rng);
        let stds = [0.5, 1.0, 2.0];
        let tau = 0.05;
        let out = fgsm_perturb(&model, 0, &w, tau, &stds).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                let delta = out.inputs.at2(r, c) - w.inputs.at2(r, c);
                let unit = (delta / (tau * stds[c])).abs();
                assert!(
                    delta == 0.0 || (unit - 1.0).abs() < 1e-9,
                    "delta {delta} not in {{0, +/-tau*sigma}}"
                );
            }
        }
    }

    #[test]
    fn test_fgsm_matches_linear_closed_form() {
        // f(x) = w.x via a hand-built linear model: sign(dJ/dx) =
        // sign(2(w.x - y)) * sign(w)
        let d = 3usize;
        let mut backbone = BackboneConfig::default_for(BackboneKind::Linear, d, 1);
        backbone.hidden_channels = d;
        let config = ModelConfig { backbone, head_mode: HeadMode::TaskSpecific, head_hidden: 2 * d };
        let mut model = MultiTaskModel::new(config, 0).unwrap();
        model.add_task_head(0).unwrap();
        model.visit_params_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        let wvec = [0.7, -1.3, 0.4];
        model.visit_params_mut(&mut |name, t| match name.as_str() {
            "backbone.w" => {
                for i in 0..d {
                    t.data_mut()[i * d + i] = 1.0;
                }
            }
            "head.0.w1" => {
                for i in 0..d {
                    t.data_mut()[i * 2 * d + i] = 1.0;
                    t.data_mut()[i * 2 * d + d + i] = -1.0;
                }
            }
            "head.0.w2" => {
                for i in 0..d {
                    t.data_mut()[i] = wvec[i];
                    t.data_mut()[d + i] = -wvec[i];
                }
            }
            _ => {}
        });
        let x = [0.3, 0.9, -0.5];
        let y = -0.2;
        let window = Window {
            inputs: Tensor::new(vec![1, d], x.to_vec()).unwrap(),
            target: y,
            task: 0,
            step: 0,
        };
        let pred: f64 = x.iter().zip(&wvec).map(|(a, b)| a * b).sum();
        assert!((model.predict(0, &window).unwrap() - pred).abs() < 1e-12);
        let tau = 0.1;
        let out = fgsm_perturb(&model, 0, &window, tau, &[1.0; 3]).unwrap();
        let residual_sign = sign(2.0 * (pred - y));
        for c in 0..d {
            let expected = tau * residual_sign * sign(wvec[c]);
            let delta = out.inputs.at2(0, c) - window.inputs.at2(0, c);
            assert!((delta - expected).abs() < 1e-12, "feature {c}: {delta} vs {expected}");
        }
    }

    #[test]
    fn test_noise_perturb_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let windows: Vec<Window> = (0..500).map(|_| random_window(0, 5, 4, &mut rng)).collect();
        let refs: Vec<&Window> = windows.iter().collect();
        let stds = feature_stds(&refs);
        let level = 0.25;
        let noisy = noise_perturb(&refs, level, &stds, 7).unwrap();
        for c in 0..4 {
            let mut sq = 0.0;
            let mut n = 0usize;
            for (orig, pert) in windows.iter().zip(&noisy) {
                for r in 0..5 {
                    let dv = pert.inputs.at2(r, c) - orig.inputs.at2(r, c);
                    sq += dv * dv;
                    n += 1;
                }
            }
            let emp = (sq / n as f64).sqrt() / stds[c];
            assert!((emp / level - 1.0).abs() < 0.05, "feature {c}: {emp} vs {level}");
        }
        // level 0: unchanged
        let same = noise_perturb(&refs, 0.0, &stds, 7).unwrap();
        for (orig, copy) in windows.iter().zip(&same) {
            assert_eq!(orig.inputs, copy.inputs);
        }
    }

    #[test]
    fn test_probe_chance_level_on_permuted_labels() {
        // random features, random labels: accuracy ~ 1/classes
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = model_with_head(3, 4);
        let windows: Vec<Window> = (0..400)
            .map(|i| random_window(i % 4, 4, 3, &mut rng))
            .collect();
        let refs: Vec<&Window> = windows.iter().collect();
        let acc =
            probe_train_eval(&model, &refs, &ProbeConfig::new(ProbeKind::Linear), 3).unwrap();
        // 3-sigma binomial band around 0.25 at n = 120 held out
        let sigma = (0.25f64 * 0.75 / 120.0).sqrt();
        assert!((acc - 0.25).abs() < 3.0 * sigma + 0.05, "accuracy {acc}");
    }

    #[test]
    fn test_probe_separable_features_and_no_mutation() {
        // identity-like backbone (features = last window row) fed windows
        // whose last rows form margin-separated clusters per task
        let d = 3usize;
        let t_len = 2usize;
        let mut backbone = BackboneConfig::default_for(BackboneKind::Linear, d, t_len);
        backbone.hidden_channels = d;
        let config = ModelConfig { backbone, head_mode: HeadMode::TaskSpecific, head_hidden: 4 };
        let mut model = MultiTaskModel::new(config, 0).unwrap();
        model.add_task_head(0).unwrap();
        model.visit_params_mut(&mut |name, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
            if name == "backbone.w" {
                for i in 0..d {
                    t.data_mut()[((t_len - 1) * d + i) * d + i] = 1.0;
                }
            }
        });
        let centers = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rnd = |c: f64| c + rng.gen_range(-0.3..0.3);
        let windows: Vec<Window> = (0..300)
            .map(|i| {
                let task = i % 3;
                let mut data = vec![0.0; t_len * d];
                for (j, &c) in centers[task].iter().enumerate() {
                    data[(t_len - 1) * d + j] = rnd(c);
                }
                Window {
                    inputs: Tensor::new(vec![t_len, d], data).unwrap(),
                    target: 0.0,
                    task,
                    step: i,
                }
            })
            .collect();
        // perceptron oracle: one-vs-rest linear separability of the features
        for class in 0..3usize {
            let mut w = vec![0.0; d + 1];
            let mut separable = false;
            for _ in 0..200 {
                let mut errors = 0;
                for win in &windows {
                    let feat = win.inputs.row(t_len - 1);
                    let label = if win.task == class { 1.0 } else { -1.0 };
                    let score: f64 =
                        feat.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
                    if label * score <= 0.0 {
                        for (wi, f) in w.iter_mut().zip(feat) {
                            *wi += label * f;
                        }
                        w[d] += label;
                        errors += 1;
                    }
                }
                if errors == 0 {
                    separable = true;
                    break;
                }
            }
            assert!(separable, "class {class} not linearly separable: bad test setup");
        }
        let refs: Vec<&Window> = windows.iter().collect();
        let before = model.param_map();
        let long = |kind| ProbeConfig { epochs: 500, ..ProbeConfig::new(kind) };
        let linear = probe_train_eval(&model, &refs, &long(ProbeKind::Linear), 5).unwrap();
        let mlp = probe_train_eval(&model, &refs, &long(ProbeKind::Mlp), 5).unwrap();
        assert_eq!(model.param_map(), before, "probe mutated the model");
        assert!((linear - 1.0).abs() < 1e-12, "linear probe accuracy {linear}");
        assert!(mlp >= linear - 0.02, "mlp {mlp} far below linear {linear}");
    }

    #[test]
    fn test_probe_single_class_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = model_with_head(3, 4);
        let windows: Vec<Window> = (0..50).map(|_| random_window(0, 4, 3, &mut rng)).collect();
        let refs: Vec<&Window> = windows.iter().collect();
        assert!(probe_train_eval(&model, &refs, &ProbeConfig::new(ProbeKind::Linear), 1).is_err());
    }
}
