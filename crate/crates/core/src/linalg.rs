//! Small dense linear-algebra helpers: Gaussian elimination, least squares,
//! and a rank estimate. Sized for the d x d systems this crate deals in.

use crate::error::{Error, Result};

/// Solve A x = b in place via Gaussian elimination with partial pivoting.
/// `a` is n x n row-major.
pub fn solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if m[pivot * n + col].abs() < 1e-12 {
            return Err(Error::Data("singular system in solve".into()));
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            x.swap(col, pivot);
        }
        let diag = m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = x[col];
        for k in col + 1..n {
            v -= m[col * n + k] * x[k];
        }
        x[col] = v / m[col * n + col];
    }
    Ok(x)
}

/// Least squares min ||A w - y||^2 + ridge ||w||^2 via normal equations.
/// `rows` are the rows of A (equal length), `y` the targets.
pub fn lstsq(rows: &[&[f64]], y: &[f64], ridge: f64) -> Result<Vec<f64>> {
    if rows.len() != y.len() || rows.is_empty() {
        return Err(Error::Data("lstsq needs equally many rows and targets".into()));
    }
    let p = rows[0].len();
    let mut ata = vec![0.0; p * p];
    let mut aty = vec![0.0; p];
    for (row, &target) in rows.iter().zip(y) {
        for i in 0..p {
            aty[i] += row[i] * target;
            for j in i..p {
                ata[i * p + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            ata[i * p + j] = ata[j * p + i];
        }
        ata[i * p + i] += ridge;
    }
    solve(&ata, &aty, p)
}

/// Rank of an n x n matrix by elimination with a relative pivot threshold.
pub fn rank(a: &[f64], n: usize, rel_tol: f64) -> usize {
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let tol = rel_tol * scale;
    let mut m = a.to_vec();
    let mut rank = 0;
    for col in 0..n {
        let pivot = (rank..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if m[pivot * n + col].abs() <= tol {
            continue;
        }
        for k in 0..n {
            m.swap(rank * n + k, pivot * n + k);
        }
        let diag = m[rank * n + col];
        for row in rank + 1..n {
            let factor = m[row * n + col] / diag;
            for k in col..n {
                m[row * n + k] -= factor * m[rank * n + k];
            }
        }
        rank += 1;
        if rank == n {
            break;
        }
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_solve_2x2() {
        // [2 1; 1 3] x = [5; 10] -> x = [1, 3]
        let x = solve(&[2.0, 1.0, 1.0, 3.0], &[5.0, 10.0], 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn test_solve_singular_errors() {
        assert!(solve(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn test_lstsq_recovers_plane() {
        // y = 3a - 2b sampled exactly
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64 * 0.3, (i as f64).sin()])
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| 3.0 * r[0] - 2.0 * r[1]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let w = lstsq(&refs, &y, 0.0).unwrap();
        assert!((w[0] - 3.0).abs() < 1e-9 && (w[1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn test_rank() {
        assert_eq!(rank(&[1.0, 0.0, 0.0, 1.0], 2, 1e-9), 2);
        assert_eq!(rank(&[1.0, 2.0, 2.0, 4.0], 2, 1e-9), 1);
        assert_eq!(rank(&[0.0; 4], 2, 1e-9), 0);
    }
}
