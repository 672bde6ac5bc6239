//! Gradient episodic memory: constrained gradient projection.
//!
//! When the current gradient conflicts with any stored task's memory
//! gradient (negative inner product), the update is replaced by the closest
//! gradient satisfying <g~, g_mem_j> >= 0 for all j. The small dual QP
//! min 1/2 v^T G G^T v + (G g)^T v, v >= 0 is solved by projected gradient
//! iteration; g~ = g + G^T v.

use crate::error::Result;

pub const DEFAULT_MEMORY_PER_TASK: usize = 256;
pub const QP_MAX_ITERS: usize = 500;
pub const QP_TOL: f64 = 1e-8;
/// Constraint slack allowed after projection.
pub const CONSTRAINT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum GemOutcome {
    /// No constraint violated; gradient returned unchanged.
    Unconstrained,
    /// Projection applied; dual iterations used.
    Projected { iterations: usize },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Project `grad` in place against the memory gradients. All-zero memory
/// gradients are dropped (logged); the remaining constraints are enforced to
/// `CONSTRAINT_TOL`.
pub fn project_gradient(grad: &mut [f64], memory_grads: &[Vec<f64>]) -> Result<GemOutcome> {
    let active: Vec<&Vec<f64>> = memory_grads
        .iter()
        .filter(|m| {
            let keep = m.iter().any(|v| *v != 0.0);
            if !keep {
                log::warn!("gem: dropping all-zero memory gradient constraint");
            }
            keep
        })
        .collect();
    if active.is_empty() {
        return Ok(GemOutcome::Unconstrained);
    }
    let violated = active.iter().any(|m| dot(grad, m) < 0.0);
    if !violated {
        return Ok(GemOutcome::Unconstrained);
    }

    let t = active.len();
    // Gram matrix G G^T and linear term G g.
    let mut gram = vec![0.0; t * t];
    let mut lin = vec![0.0; t];
    for i in 0..t {
        lin[i] = dot(grad, active[i]);
        for j in i..t {
            let v = dot(active[i], active[j]);
            gram[i * t + j] = v;
            gram[j * t + i] = v;
        }
    }
    // Projected Gauss-Seidel: exact minimization per coordinate, projected
    // onto v_i >= 0. The dual gradient H v + c equals G g~, so the KKT
    // residual doubles as the constraint check.
    let mut v = vec![0.0; t];
    let mut iterations = 0;
    for iter in 0..QP_MAX_ITERS {
        iterations = iter + 1;
        let mut max_move: f64 = 0.0;
        for i in 0..t {
            let diag = gram[i * t + i];
            if diag <= 0.0 {
                continue;
            }
            let g_i = dot(&gram[i * t..(i + 1) * t], &v) + lin[i];
            let next = (v[i] - g_i / diag).max(0.0);
            max_move = max_move.max((next - v[i]).abs());
            v[i] = next;
        }
        let worst_violation = (0..t)
            .map(|i| dot(&gram[i * t..(i + 1) * t], &v) + lin[i])
            .fold(f64::INFINITY, f64::min);
        if max_move < QP_TOL && worst_violation > -0.1 * CONSTRAINT_TOL {
            break;
        }
    }

    for (i, m) in active.iter().enumerate() {
        if v[i] == 0.0 {
            continue;
        }
        for (gv, mv) in grad.iter_mut().zip(m.iter()) {
            *gv += v[i] * mv;
        }
    }
    Ok(GemOutcome::Projected { iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn test_no_violation_returns_unchanged() {
        let mut g = vec![1.0, 1.0];
        let mem = vec![vec![1.0, 0.0]];
        let before = g.clone();
        assert_eq!(project_gradient(&mut g, &mem).unwrap(), GemOutcome::Unconstrained);
        assert_eq!(g, before);
    }

    #[test]
    fn test_single_constraint_closed_form() {
        // violated single constraint: g~ = g - (<g,m>/<m,m>) m, so <g~,m> = 0
        let g0 = vec![1.0, -2.0, 0.5];
        let m = vec![0.5, 1.0, -0.25];
        let mut g = g0.clone();
        let out = project_gradient(&mut g, &[m.clone()]).unwrap();
        assert!(matches!(out, GemOutcome::Projected { .. }));
        let coef = dot(&g0, &m) / dot(&m, &m);
        for i in 0..3 {
            assert!((g[i] - (g0[i] - coef * m[i])).abs() < 1e-7, "{g:?}");
        }
        assert!(dot(&g, &m).abs() < 1e-7);
    }

    #[test]
    fn test_zero_memory_gradient_dropped() {
        let mut g = vec![1.0, 1.0];
        let before = g.clone();
        let out = project_gradient(&mut g, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(out, GemOutcome::Unconstrained);
        assert_eq!(g, before);
    }

    #[test]
    fn test_three_constraints_match_grid_search_oracle() {
        // random 3-constraint instances vs a dense grid over the dual
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..10 {
            let dim = 4;
            let g0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mems: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            if !mems.iter().any(|m| dot(&g0, m) < 0.0) {
                continue;
            }
            let mut g = g0.clone();
            project_gradient(&mut g, &mems).unwrap();
            for m in &mems {
                assert!(dot(&g, m) >= -CONSTRAINT_TOL, "case {case}: constraint violated");
            }
            let dist = |cand: &[f64]| -> f64 {
                cand.iter().zip(&g0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            };
            // grid over v in [0, 3]^3
            let mut best = f64::INFINITY;
            let steps = 40;
            for i in 0..=steps {
                for j in 0..=steps {
                    for k in 0..=steps {
                        let v = [
                            3.0 * i as f64 / steps as f64,
                            3.0 * j as f64 / steps as f64,
                            3.0 * k as f64 / steps as f64,
                        ];
                        let cand: Vec<f64> = (0..dim)
                            .map(|d| {
                                g0[d] + v[0] * mems[0][d] + v[1] * mems[1][d] + v[2] * mems[2][d]
                            })
                            .collect();
                        if mems.iter().all(|m| dot(&cand, m) >= -1e-6) {
                            best = best.min(dist(&cand));
                        }
                    }
                }
            }
            assert!(
                dist(&g) <= best + 1e-3,
                "case {case}: solver {:.6} vs grid {:.6}",
                dist(&g),
                best
            );
        }
    }
}
