//! Dense solves for the small clearing systems (K <= 3 in the catalog).

use crate::{MpeError, Result};

/// Solve A x = b by Gaussian elimination with partial pivoting.
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b.iter())
        .map(|(row, &bi)| {
            let mut r = row.clone();
            r.push(bi);
            r
        })
        .collect();
    for col in 0..n {
        let (piv, pval) = (col..n)
            .map(|r| (r, m[r][col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        if pval < 1e-300 {
            return Err(MpeError::Convergence("singular matrix".into()));
        }
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = m[r][n];
        for c in r + 1..n {
            s -= m[r][c] * x[c];
        }
        x[r] = s / m[r][r];
    }
    Ok(x)
}

/// Matrix inverse via column-wise solves.
pub fn invert(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cols.push(solve(a, &e)?);
    }
    // cols[j] is the j-th column of A^{-1}; transpose into row-major.
    let mut inv = vec![vec![0.0; n]; n];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            inv[i][j] = *v;
        }
    }
    Ok(inv)
}

/// 1-norm condition number, exact for these tiny systems.
pub fn cond_1(a: &[Vec<f64>]) -> f64 {
    match invert(a) {
        Ok(inv) => norm_1(a) * norm_1(&inv),
        Err(_) => f64::INFINITY,
    }
}

fn norm_1(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    (0..n)
        .map(|j| a.iter().map(|row| row[j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn mat_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| dot(row, x)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_2x2() {
        let a = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let x = solve(&a, &[5.0, 10.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-13);
        assert!((x[1] - 3.0).abs() < 1e-13);
    }

    #[test]
    fn inverse_roundtrip() {
        let a = vec![vec![-0.8, 0.2], vec![0.3, -0.9]];
        let inv = invert(&a).unwrap();
        let prod00 = a[0][0] * inv[0][0] + a[0][1] * inv[1][0];
        let prod01 = a[0][0] * inv[0][1] + a[0][1] * inv[1][1];
        assert!((prod00 - 1.0).abs() < 1e-13);
        assert!(prod01.abs() < 1e-13);
    }
}
