//! Scalar evaluation quantities: R^2, NRMSE, backward transfer, forgetting
//! ratio, Jensen-Shannon distance, Wilcoxon signed-rank, and Pearson
//! correlation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficient of determination 1 - SS_res / SS_tot; may be negative.
pub fn r_squared(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::Data(format!(
            "r_squared needs equal nonzero lengths, got {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Data("r_squared undefined: zero variance in y_true".into()));
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// RMSE normalized by the target range max(y_true) - min(y_true).
pub fn nrmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::Data(format!(
            "nrmse needs equal nonzero lengths, got {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in y_true {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return Err(Error::Data("nrmse undefined: zero target range".into()));
    }
    let mse: f64 =
        y_true.iter().zip(y_pred).map(|(t, p)| (t - p) * (t - p)).sum::<f64>() / y_true.len() as f64;
    Ok(mse.sqrt() / (hi - lo))
}

/// Prediction errors eps_i(j): error on task position j (1-based) after
/// training through task position i. Entries exist for all j <= i.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "ErrorMatrixWire", into = "ErrorMatrixWire")]
pub struct ErrorMatrix {
    entries: BTreeMap<(usize, usize), f64>,
    pub task_count: usize,
}

/// JSON-friendly form: a list of (trained_through, task, error) triples.
#[derive(Serialize, Deserialize)]
struct ErrorMatrixWire {
    entries: Vec<(usize, usize, f64)>,
}

impl From<ErrorMatrixWire> for ErrorMatrix {
    fn from(wire: ErrorMatrixWire) -> Self {
        let mut m = ErrorMatrix::new();
        for (i, j, v) in wire.entries {
            m.set(i, j, v);
        }
        m
    }
}

impl From<ErrorMatrix> for ErrorMatrixWire {
    fn from(m: ErrorMatrix) -> Self {
        ErrorMatrixWire {
            entries: m.entries.iter().map(|(&(i, j), &v)| (i, j, v)).collect(),
        }
    }
}

impl ErrorMatrix {
    pub fn new() -> Self {
        ErrorMatrix::default()
    }

    pub fn set(&mut self, trained_through: usize, task: usize, error: f64) {
        assert!(task <= trained_through && task >= 1, "eps_i(j) requires 1 <= j <= i");
        self.entries.insert((trained_through, task), error);
        self.task_count = self.task_count.max(trained_through);
    }

    pub fn get(&self, trained_through: usize, task: usize) -> Result<f64> {
        self.entries.get(&(trained_through, task)).copied().ok_or_else(|| {
            Error::Data(format!("missing eps_{trained_through}({task}) in error matrix"))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &f64)> {
        self.entries.iter()
    }

    pub fn is_lower_triangular_complete(&self) -> bool {
        (1..=self.task_count)
            .all(|i| (1..=i).all(|j| self.entries.contains_key(&(i, j))))
    }
}

/// BWT(t) = (1/(t-1)) * sum_{j<t} (eps_j(j) - eps_t(j)); higher is better.
pub fn bwt(matrix: &ErrorMatrix, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::Usage(format!("bwt needs t >= 2, got {t}")));
    }
    let mut acc = 0.0;
    for j in 1..t {
        acc += matrix.get(j, j)? - matrix.get(t, j)?;
    }
    Ok(acc / (t - 1) as f64)
}

/// FR(t) = (eps_T(t) - eps_t(t)) / eps_t(t); lower is better.
pub fn forgetting_ratio(matrix: &ErrorMatrix, t: usize, final_task: usize) -> Result<f64> {
    let base = matrix.get(t, t)?;
    if base == 0.0 {
        return Err(Error::Data(format!("forgetting_ratio undefined: eps_{t}({t}) = 0")));
    }
    Ok((matrix.get(final_task, t)? - base) / base)
}

pub const DEFAULT_JS_BINS: usize = 50;
const JS_SMOOTHING: f64 = 1e-10;

/// Jensen-Shannon distance between two multivariate samples: per-feature
/// histograms over the pooled range, base-2 JS divergence, square root,
/// mean over features. In [0, 1]; constant pooled features contribute 0.
pub fn js_distance(a: &[&[f64]], b: &[&[f64]], bins: usize) -> Result<f64> {
    if a.len() < 10 || b.len() < 10 {
        return Err(Error::Insufficient(format!(
            "js_distance needs >= 10 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if bins < 2 {
        return Err(Error::Config("js_distance needs >= 2 bins".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b.iter()).any(|row| row.len() != dim) {
        return Err(Error::Data("js_distance: inconsistent feature dimensions".into()));
    }
    let mut total = 0.0;
    for feat in 0..dim {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for row in a.iter().chain(b.iter()) {
            lo = lo.min(row[feat]);
            hi = hi.max(row[feat]);
        }
        if hi <= lo {
            log::warn!("js_distance: feature {feat} is constant over the pooled samples");
            continue;
        }
        let hist = |sample: &[&[f64]]| -> Vec<f64> {
            let mut counts = vec![JS_SMOOTHING; bins];
            for row in sample {
                let pos = ((row[feat] - lo) / (hi - lo) * bins as f64) as usize;
                counts[pos.min(bins - 1)] += 1.0;
            }
            let norm: f64 = counts.iter().sum();
            counts.iter().map(|c| c / norm).collect()
        };
        let p = hist(a);
        let q = hist(b);
        let mut div = 0.0;
        for (pi, qi) in p.iter().zip(&q) {
            let m = 0.5 * (pi + qi);
            if *pi > 0.0 {
                div += 0.5 * pi * (pi / m).log2();
            }
            if *qi > 0.0 {
                div += 0.5 * qi * (qi / m).log2();
            }
        }
        total += div.max(0.0).sqrt();
    }
    Ok(total / dim as f64)
}

/// Convenience wrapper over row-major matrices.
pub fn js_distance_rows(a: &crate::nd::Tensor, b: &crate::nd::Tensor, bins: usize) -> Result<f64> {
    let ra: Vec<&[f64]> = (0..a.rows()).map(|r| a.row(r)).collect();
    let rb: Vec<&[f64]> = (0..b.rows()).map(|r| b.row(r)).collect();
    js_distance(&ra, &rb, bins)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// min(W+, W-) with average ranks for ties; zero differences dropped.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of nonzero differences used.
    pub n: usize,
    /// One-sided p for the alternative "differences are positive".
    pub p_greater: f64,
    pub p_two_sided: f64,
    /// True when the exact 2^n enumeration was used (n <= 12).
    pub exact: bool,
}

/// Wilcoxon signed-rank test on paired differences. Exact enumeration for
/// n <= 12, normal approximation with continuity and tie corrections above.
pub fn wilcoxon_signed_rank(differences: &[f64]) -> Result<WilcoxonResult> {
    let nonzero: Vec<f64> = differences.iter().copied().filter(|d| *d != 0.0).collect();
    if nonzero.iter().any(|d| !d.is_finite()) {
        return Err(Error::non_finite("wilcoxon", "difference"));
    }
    if differences.iter().all(|d| *d == 0.0) {
        return Err(Error::Data("wilcoxon undefined: all differences zero".into()));
    }
    if nonzero.len() < 5 {
        return Err(Error::Insufficient(format!(
            "wilcoxon needs >= 5 nonzero differences, got {}",
            nonzero.len()
        )));
    }
    let n = nonzero.len();

    // Average ranks of |d| with ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| nonzero[i].abs().total_cmp(&nonzero[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut tie_sizes: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nonzero[order[j + 1]].abs() == nonzero[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }

    let w_plus: f64 = nonzero.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = nonzero.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum();
    let statistic = w_plus.min(w_minus);

    let (p_greater, p_two_sided, exact) = if n <= 12 {
        // Exact null distribution over all 2^n sign assignments of the
        // observed ranks.
        let count_le = |threshold: f64| -> u64 {
            let mut count = 0u64;
            for mask in 0u64..(1u64 << n) {
                let mut s = 0.0;
                for (bit, r) in ranks.iter().enumerate() {
                    if mask >> bit & 1 == 1 {
                        s += r;
                    }
                }
                if s <= threshold + 1e-12 {
                    count += 1;
                }
            }
            count
        };
        let total = (1u64 << n) as f64;
        let tail_minus = count_le(w_minus) as f64 / total;
        let tail_plus = count_le(w_plus) as f64 / total;
        (tail_minus, (2.0 * tail_minus.min(tail_plus)).min(1.0), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_corr: f64 =
            tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_corr;
        let sd = var.sqrt();
        let tail = |w: f64| normal_cdf((w + 0.5 - mean) / sd);
        let tail_minus = tail(w_minus);
        let tail_plus = tail(w_plus);
        (tail_minus, (2.0 * tail_minus.min(tail_plus)).min(1.0), false)
    };

    Ok(WilcoxonResult { statistic, w_plus, w_minus, n, p_greater, p_two_sided, exact })
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation
/// (absolute error < 1.5e-7).
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Data("pearson needs >= 2 paired samples".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Data("pearson undefined: zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Least-squares slope of y on x.
pub fn slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Data("slope needs >= 2 paired samples".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        return Err(Error::Data("slope undefined: zero x variance".into()));
    }
    Ok(sxy / sxx)
}

/// One evaluated quantity of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub strategy: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl MetricRecord {
    pub fn new(
        run_id: impl Into<String>,
        strategy: impl Into<String>,
        task: impl Into<String>,
        metric: impl Into<String>,
        value: f64,
        seed: u64,
    ) -> Self {
        MetricRecord {
            run_id: run_id.into(),
            strategy: strategy.into(),
            task: task.into(),
            metric: metric.into(),
            value,
            seed,
        }
    }
}
