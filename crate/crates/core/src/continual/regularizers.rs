//! Quadratic parameter-anchoring baselines: EWC and SI.
//!
//! Both keep per-parameter state keyed by name, so parameter sets that grow
//! between tasks (new heads) are handled naturally — parameters unknown to a
//! past task simply carry no penalty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::{MultiTaskModel, Window};
use crate::nd::{Tape, Tensor};

type ParamMap = BTreeMap<String, Tensor>;

/// Fisher diagonal and anchor parameters from one finished task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EwcTaskState {
    pub fisher: ParamMap,
    pub optimum: ParamMap,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EwcState {
    pub tasks: Vec<EwcTaskState>,
}

impl EwcState {
    /// Diagonal empirical Fisher at the current optimum: mean squared
    /// per-sample loss gradient over (up to) `max_samples` training windows.
    pub fn accumulate_task(
        &mut self,
        model: &MultiTaskModel,
        windows: &[Window],
        max_samples: usize,
    ) -> Result<()> {
        let optimum = model.param_map();
        let mut fisher: ParamMap =
            optimum.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec()))).collect();
        let take = windows.len().min(max_samples);
        if take > 0 {
            // evenly spaced subsample keeps determinism without an RNG
            for s in 0..take {
                let w = &windows[s * windows.len() / take];
                let mut tape = Tape::new();
                let tasks = std::collections::BTreeSet::from([w.task]);
                let binding = model.bind_params(&mut tape, &tasks)?;
                let (_, pred) = model.forward_graph(&mut tape, &binding, w.task, &[w])?;
                let target = tape.leaf(Tensor::matrix(1, 1, vec![w.target])?);
                let diff = tape.sub(pred, target)?;
                let sq = tape.mul(diff, diff)?;
                let loss = tape.sum(sq)?;
                let grads = tape.backward(loss)?;
                for (name, node) in binding.iter() {
                    if let Some(g) = grads.get(*node) {
                        let acc = fisher.get_mut(name).expect("fisher covers bound params");
                        for (a, gv) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += gv * gv;
                        }
                    }
                }
            }
            for t in fisher.values_mut() {
                for v in t.data_mut() {
                    *v /= take as f64;
                }
            }
        }
        self.tasks.push(EwcTaskState { fisher, optimum });
        Ok(())
    }

    /// lambda/2 * sum_tasks sum_i F_i (theta_i - theta*_i)^2
    pub fn penalty(&self, params: &ParamMap, lambda: f64) -> f64 {
        let mut acc = 0.0;
        for task in &self.tasks {
            for (name, fisher) in &task.fisher {
                let (Some(theta), Some(anchor)) = (params.get(name), task.optimum.get(name))
                else {
                    continue;
                };
                for ((f, t), a) in fisher.data().iter().zip(theta.data()).zip(anchor.data()) {
                    acc += f * (t - a) * (t - a);
                }
            }
        }
        lambda / 2.0 * acc
    }

    /// grads += lambda * F_i * (theta_i - theta*_i)
    pub fn penalty_grad_into(&self, params: &ParamMap, lambda: f64, grads: &mut ParamMap) {
        for task in &self.tasks {
            for (name, fisher) in &task.fisher {
                let (Some(theta), Some(anchor)) = (params.get(name), task.optimum.get(name))
                else {
                    continue;
                };
                let slot = grads
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
                for (i, (f, (t, a))) in
                    fisher.data().iter().zip(theta.data().iter().zip(anchor.data())).enumerate()
                {
                    slot.data_mut()[i] += lambda * f * (t - a);
                }
            }
        }
    }
}

pub const DEFAULT_SI_XI: f64 = 0.1;

/// Synaptic-importance state: per-parameter path integral omega accumulated
/// during training, folded into importance Omega at task end.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SiState {
    omega: ParamMap,
    task_start: ParamMap,
    pub importance: ParamMap,
    pub optimum: ParamMap,
}

impl SiState {
    pub fn begin_task(&mut self, params: &ParamMap) {
        self.task_start = params.clone();
        self.omega = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
    }

    /// omega_i += -g_i * delta_i for the parameters updated this step.
    pub fn record_step(&mut self, grads: &ParamMap, deltas: &ParamMap) {
        for (name, g) in grads {
            let Some(delta) = deltas.get(name) else { continue };
            let slot = self
                .omega
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for ((w, gv), dv) in slot.data_mut().iter_mut().zip(g.data()).zip(delta.data()) {
                *w -= gv * dv;
            }
        }
    }

    /// Omega_i += omega_i / ((theta_end - theta_start)^2 + xi); anchor theta*.
    pub fn end_task(&mut self, params: &ParamMap, xi: f64) {
        for (name, omega) in &self.omega {
            let theta_end = &params[name];
            let zero = Tensor::zeros(theta_end.shape().to_vec());
            let theta_start = self.task_start.get(name).unwrap_or(&zero);
            let slot = self
                .importance
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta_end.shape().to_vec()));
            for (i, (w, (e, s))) in omega
                .data()
                .iter()
                .zip(theta_end.data().iter().zip(theta_start.data()))
                .enumerate()
            {
                let total = e - s;
                slot.data_mut()[i] += w / (total * total + xi);
            }
        }
        self.optimum = params.clone();
        self.omega.clear();
        self.task_start.clear();
    }

    /// lambda * sum_i Omega_i (theta_i - theta*_i)^2
    pub fn penalty(&self, params: &ParamMap, lambda: f64) -> f64 {
        let mut acc = 0.0;
        for (name, importance) in &self.importance {
            let (Some(theta), Some(anchor)) = (params.get(name), self.optimum.get(name)) else {
                continue;
            };
            for ((o, t), a) in importance.data().iter().zip(theta.data()).zip(anchor.data()) {
                acc += o * (t - a) * (t - a);
            }
        }
        lambda * acc
    }

    /// grads += 2 * lambda * Omega_i * (theta_i - theta*_i)
    pub fn penalty_grad_into(&self, params: &ParamMap, lambda: f64, grads: &mut ParamMap) {
        for (name, importance) in &self.importance {
            let (Some(theta), Some(anchor)) = (params.get(name), self.optimum.get(name)) else {
                continue;
            };
            let slot = grads
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
            for (i, (o, (t, a))) in importance
                .data()
                .iter()
                .zip(theta.data().iter().zip(anchor.data()))
                .enumerate()
            {
                slot.data_mut()[i] += 2.0 * lambda * o * (t - a);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn toy_state() -> (EwcState, ParamMap) {
        let mut state = EwcState::default();
        let mut fisher = ParamMap::new();
        fisher.insert("p".into(), Tensor::vector(vec![0.5, 2.0]));
        let mut optimum = ParamMap::new();
        optimum.insert("p".into(), Tensor::vector(vec![1.0, -1.0]));
        state.tasks.push(EwcTaskState { fisher, optimum });
        let mut params = ParamMap::new();
        params.insert("p".into(), Tensor::vector(vec![1.5, 0.5]));
        (state, params)
    }

    #[test]
    fn test_ewc_penalty_zero_cases() {
        let (state, params) = toy_state();
        // lambda = 0 -> no penalty
        assert_eq!(state.penalty(&params, 0.0), 0.0);
        // theta = theta* -> no penalty
        assert_eq!(state.penalty(&state.tasks[0].optimum.clone(), 100.0), 0.0);
    }

    #[test]
    fn test_ewc_penalty_gradient_matches_finite_differences() {
        let (state, params) = toy_state();
        let lambda = 3.0;
        let theta = params["p"].clone();
        let f = |inputs: &[Tensor]| -> Result<f64> {
            let mut p = ParamMap::new();
            p.insert("p".into(), inputs[0].clone());
            Ok(state.penalty(&p, lambda))
        };
        let mut grads = ParamMap::new();
        state.penalty_grad_into(&params, lambda, &mut grads);
        gradcheck::assert_gradients_match(f, &[theta], 0, &grads["p"]).unwrap();
    }

    #[test]
    fn test_si_penalty_gradient_matches_finite_differences() {
        let mut state = SiState::default();
        let mut start = ParamMap::new();
        start.insert("p".into(), Tensor::vector(vec![0.0, 0.0]));
        state.begin_task(&start);
        let mut grads_step = ParamMap::new();
        grads_step.insert("p".into(), Tensor::vector(vec![1.0, -2.0]));
        let mut deltas = ParamMap::new();
        deltas.insert("p".into(), Tensor::vector(vec![-0.1, 0.2]));
        state.record_step(&grads_step, &deltas);
        let mut end = ParamMap::new();
        end.insert("p".into(), Tensor::vector(vec![-0.1, 0.2]));
        state.end_task(&end, DEFAULT_SI_XI);

        let lambda = 2.0;
        let theta = Tensor::vector(vec![0.4, -0.3]);
        let mut params = ParamMap::new();
        params.insert("p".into(), theta.clone());
        let f = |inputs: &[Tensor]| -> Result<f64> {
            let mut p = ParamMap::new();
            p.insert("p".into(), inputs[0].clone());
            Ok(state.penalty(&p, lambda))
        };
        let mut grads = ParamMap::new();
        state.penalty_grad_into(&params, lambda, &mut grads);
        gradcheck::assert_gradients_match(f, &[theta], 0, &grads["p"]).unwrap();
    }

    #[test]
    fn test_si_importance_positive_for_useful_updates() {
        // moving downhill (delta opposite to gradient) accrues positive omega
        let mut state = SiState::default();
        let mut start = ParamMap::new();
        start.insert("p".into(), Tensor::vector(vec![0.0]));
        state.begin_task(&start);
        let mut g = ParamMap::new();
        g.insert("p".into(), Tensor::vector(vec![2.0]));
        let mut d = ParamMap::new();
        d.insert("p".into(), Tensor::vector(vec![-0.2]));
        state.record_step(&g, &d);
        let mut end = ParamMap::new();
        end.insert("p".into(), Tensor::vector(vec![-0.2]));
        state.end_task(&end, DEFAULT_SI_XI);
        assert!(state.importance["p"].data()[0] > 0.0);
    }
}
