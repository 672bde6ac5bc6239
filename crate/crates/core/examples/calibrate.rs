//! Calibration harness for the acceptance-scale experiments.
//!
//! Usage: calibrate <scenario> [seeds] — scenarios: timing, forgetting,
//! shift, fgsm, noise, probe, all

use std::collections::BTreeMap;
use std::time::Instant;

use prospect_core::continual::eval::{self, TaskPredictor};
use prospect_core::continual::{
    train_task_incremental, StrategyConfig, StrategyKind, TrainParams,
};
use prospect_core::data::{make_windows, SplitSel};
use prospect_core::experiment::{build_datasets, DataConfig, ExperimentConfig, SuiteChoice};
use prospect_core::metrics;
use prospect_core::models::{BackboneKind, HeadMode, MultiTaskModel};
use prospect_core::robustness::{feature_stds, fgsm_perturb_batch, noise_perturb, probe_train_eval, ProbeConfig, ProbeKind};
use prospect_core::{derive_seed, Result};

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn acceptance_config() -> ExperimentConfig {
    let mut config = ExperimentConfig {
        suite: SuiteChoice::Enabl3sLike,
        backbone: BackboneKind::Tcn,
        head_mode: HeadMode::TaskSpecific,
        window_length: 10,
        seeds: vec![1, 2, 3, 4, 5],
        data: DataConfig {
            sensor_dim: 8,
            samples_per_task: env_or("CAL_SAMPLES", 1000),
            test_samples: env_or("CAL_TEST", 400),
            noise: env_or("CAL_NOISE", 0.1),
        },
        train: TrainParams {
            max_epochs: env_or("CAL_EPOCHS", 50),
            patience: 10,
            batch_size: 100,
            buffer_capacity: env_or("CAL_CAPACITY", 3000),
            learning_rate: env_or("CAL_LR", 1e-4),
            ..Default::default()
        },
        ..Default::default()
    };
    config.train.imagination_horizon = env_or("CAL_HORIZON", 1);
    config
}

fn tune_model(config: &mut ExperimentConfig) {
    config.hidden_channels = Some(env_or("CAL_CHANNELS", 16usize));
}

fn train_pair(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(Vec<prospect_core::data::TaskDataset>, MultiTaskModel, MultiTaskModel)> {
    let datasets = build_datasets(config, seed)?;
    let model_seed = derive_seed(seed, "model");
    let t0 = Instant::now();
    let er = train_task_incremental(
        MultiTaskModel::new(config.model_config(), model_seed)?,
        &datasets,
        &StrategyConfig::new(StrategyKind::Er),
        &config.train,
        seed,
    )?
    .model;
    let t_er = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let prosp = train_task_incremental(
        MultiTaskModel::new(config.model_config(), model_seed)?,
        &datasets,
        &StrategyConfig::new(StrategyKind::Prospective),
        &config.train,
        seed,
    )?
    .model;
    eprintln!("  seed {seed}: er {t_er:.1}s prospective {:.1}s", t0.elapsed().as_secs_f64());
    Ok((datasets, er, prosp))
}

fn scenario_timing(config: &ExperimentConfig) -> Result<()> {
    let t0 = Instant::now();
    let (datasets, er, prosp) = train_pair(config, 1)?;
    println!("pair training: {:.1}s", t0.elapsed().as_secs_f64());
    for ds in &datasets {
        let windows = make_windows(&ds.test, config.window_length, SplitSel::All);
        let refs = eval::as_refs(&windows);
        let r2_er = eval::r_squared(&er, ds.test.task, &refs)?;
        let r2_p = eval::r_squared(&prosp, ds.test.task, &refs)?;
        println!("  task {}: er r2 {r2_er:.4} prospective r2 {r2_p:.4}", ds.test.task);
    }
    Ok(())
}

fn scenario_forgetting(config: &ExperimentConfig) -> Result<()> {
    let mut fr_by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut bwt_by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &seed in &config.seeds {
        let datasets = build_datasets(config, seed)?;
        let model_seed = derive_seed(seed, "model");
        for (name, kind, head) in [
            ("none/task", StrategyKind::None, HeadMode::TaskSpecific),
            ("er/shared", StrategyKind::Er, HeadMode::Shared),
            ("er/task", StrategyKind::Er, HeadMode::TaskSpecific),
        ] {
            let mut cfg = config.model_config();
            cfg.head_mode = head;
            let out = train_task_incremental(
                MultiTaskModel::new(cfg, model_seed)?,
                &datasets,
                &StrategyConfig::new(kind),
                &config.train,
                seed,
            )?;
            let l = datasets.len();
            let m = &out.log.error_matrix;
            let mut frs = vec![];
            for t in 1..l {
                frs.push(metrics::forgetting_ratio(m, t, l)?);
            }
            let mut bwts = vec![];
            for t in 2..=l {
                bwts.push(metrics::bwt(m, t)?);
            }
            let fr = frs.iter().sum::<f64>() / frs.len() as f64;
            let bw = bwts.iter().sum::<f64>() / bwts.len() as f64;
            eprintln!("  seed {seed} {name}: mean FR {fr:.4} mean BWT {bw:.5}");
            fr_by.entry(name).or_default().push(fr);
            bwt_by.entry(name).or_default().push(bw);
        }
    }
    for (name, v) in &fr_by {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("FR {name}: mean {mean:.4} per-seed {v:?}");
    }
    for (name, v) in &bwt_by {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("BWT {name}: mean {mean:.5} per-seed {v:?}");
    }
    let d: Vec<f64> = fr_by["none/task"].iter().zip(&fr_by["er/task"]).map(|(a, b)| a - b).collect();
    println!("extreme-pair FR differences: {d:?}");
    if d.len() >= 5 {
        let w = metrics::wilcoxon_signed_rank(&d)?;
        println!("wilcoxon one-sided p = {:.4}", w.p_greater);
    }
    Ok(())
}

fn scenario_shift(config: &ExperimentConfig) -> Result<()> {
    let mut per_mag: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut all_js = vec![];
    let mut all_dr2 = vec![];
    for &seed in &config.seeds {
        let (datasets, er, prosp) = train_pair(config, seed)?;
        for &mag in &config.shift.magnitudes {
            let mut js_acc = 0.0;
            let mut dr2_acc = 0.0;
            for ds in &datasets {
                let shifted = prospect_core::data::apply_shift(
                    &ds.test,
                    &prospect_core::data::ShiftSpec { kind: config.shift.kind, magnitude: mag },
                )?;
                let train_rows: Vec<&[f64]> =
                    (0..ds.train_val.split_m).map(|k| ds.train_val.state(k)).collect();
                let test_rows: Vec<&[f64]> =
                    (0..shifted.len()).map(|k| shifted.state(k)).collect();
                js_acc +=
                    metrics::js_distance(&train_rows, &test_rows, metrics::DEFAULT_JS_BINS)?;
                let windows = make_windows(&shifted, config.window_length, SplitSel::All);
                let refs = eval::as_refs(&windows);
                dr2_acc += eval::r_squared(&prosp, ds.test.task, &refs)?
                    - eval::r_squared(&er, ds.test.task, &refs)?;
            }
            let n = datasets.len() as f64;
            all_js.push(js_acc / n);
            all_dr2.push(dr2_acc / n);
            per_mag.entry(format!("{mag}")).or_default().push(dr2_acc / n);
            eprintln!("  seed {seed} mag {mag}: js {:.3} dr2 {:+.4}", js_acc / n, dr2_acc / n);
        }
    }
    println!("pearson(js, dr2) = {:.4}", metrics::pearson(&all_js, &all_dr2)?);
    for (mag, v) in &per_mag {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("mag {mag}: mean dr2 {mean:+.4} per-seed {v:?}");
    }
    Ok(())
}

fn scenario_fgsm_noise(config: &ExperimentConfig, fgsm: bool) -> Result<()> {
    let label = if fgsm { "fgsm" } else { "noise" };
    let base_shift: f64 = env_or("CAL_BASESHIFT", 0.0);
    let xs = if fgsm { config.fgsm_taus.clone() } else { config.noise_levels.clone() };
    let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &seed in &config.seeds {
        let (mut datasets, er, prosp) = train_pair(config, seed)?;
        if base_shift != 0.0 {
            for ds in &mut datasets {
                ds.test = prospect_core::data::apply_shift(
                    &ds.test,
                    &prospect_core::data::ShiftSpec {
                        kind: prospect_core::data::ShiftKind::AdditiveBias,
                        magnitude: base_shift,
                    },
                )?;
            }
        }
        for (name, model) in [("er", &er), ("prospective", &prosp)] {
            for &x in &xs {
                let mut acc = 0.0;
                for ds in &datasets {
                    let windows = make_windows(&ds.test, config.window_length, SplitSel::All);
                    let refs = eval::as_refs(&windows);
                    let stds = feature_stds(&refs);
                    let (preds, targets): (Vec<f64>, Vec<f64>) = if fgsm {
                        let mut p = vec![];
                        let mut t = vec![];
                        for chunk in refs.chunks(100) {
                            let pert = fgsm_perturb_batch(model, ds.test.task, chunk, x, &stds)?;
                            let prefs: Vec<&_> = pert.iter().collect();
                            p.extend(model.predict_windows(ds.test.task, &prefs)?);
                            t.extend(chunk.iter().map(|w| w.target));
                        }
                        (p, t)
                    } else {
                        let pert = noise_perturb(&refs, x, &stds, derive_seed(seed, "np"))?;
                        let prefs: Vec<&_> = pert.iter().collect();
                        (
                            model.predict_windows(ds.test.task, &prefs)?,
                            refs.iter().map(|w| w.target).collect(),
                        )
                    };
                    acc += metrics::r_squared(&targets, &preds)?;
                }
                table.entry(format!("{name}@{x}")).or_default().push(acc / datasets.len() as f64);
            }
        }
    }
    for (key, v) in &table {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("{label} {key}: mean r2 {mean:.4} per-seed {v:?}");
    }
    Ok(())
}

fn scenario_probe(config: &ExperimentConfig) -> Result<()> {
    let base_shift: f64 = env_or("CAL_BASESHIFT", 0.0);
    let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &seed in &config.seeds {
        let (mut datasets, er, prosp) = train_pair(config, seed)?;
        if base_shift != 0.0 {
            for ds in &mut datasets {
                ds.test = prospect_core::data::apply_shift(
                    &ds.test,
                    &prospect_core::data::ShiftSpec {
                        kind: prospect_core::data::ShiftKind::AdditiveBias,
                        magnitude: base_shift,
                    },
                )?;
            }
        }
        let mut train_w: Vec<prospect_core::models::Window> = vec![];
        let mut eval_w: Vec<prospect_core::models::Window> = vec![];
        for ds in &datasets {
            train_w.extend(
                make_windows(&ds.train_val, config.window_length, SplitSel::Validation)
                    .into_iter()
                    .take(200),
            );
            eval_w.extend(
                make_windows(&ds.test, config.window_length, SplitSel::All)
                    .into_iter()
                    .take(200),
            );
        }
        let train_refs: Vec<&_> = train_w.iter().collect();
        let eval_refs: Vec<&_> = eval_w.iter().collect();
        for (name, model) in [("er", &er), ("prospective", &prosp)] {
            for kind in [ProbeKind::Linear, ProbeKind::Mlp] {
                let cfg = ProbeConfig {
                    epochs: env_or("CAL_PROBE_EPOCHS", 50),
                    learning_rate: env_or("CAL_PROBE_LR", 1e-2),
                    ..ProbeConfig::new(kind)
                };
                let acc = prospect_core::robustness::probe_train_eval_on(
                    model,
                    &train_refs,
                    &eval_refs,
                    &cfg,
                    derive_seed(seed, "probe"),
                )?;
                table.entry(format!("{name}/{kind:?}")).or_default().push(acc);
            }
        }
    }
    for (key, v) in &table {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("probe {key}: mean acc {mean:.4} per-seed {v:?}");
    }
    Ok(())
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let scenario = args.get(1).map(String::as_str).unwrap_or("timing");
    let mut config = acceptance_config();
    tune_model(&mut config);
    if let Some(n) = args.get(2).and_then(|s| s.parse::<u64>().ok()) {
        config.seeds = (1..=n).collect();
    }
    match scenario {
        "timing" => scenario_timing(&config)?,
        "forgetting" => scenario_forgetting(&config)?,
        "shift" => scenario_shift(&config)?,
        "fgsm" => scenario_fgsm_noise(&config, true)?,
        "noise" => scenario_fgsm_noise(&config, false)?,
        "probe" => scenario_probe(&config)?,
        other => eprintln!("unknown scenario {other}"),
    }
    Ok(())
}
