//! Row/column selection and small dense solvers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Copy of the listed rows, in the given order.
pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

pub fn select_cols(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

pub fn take<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Solve a symmetric positive (semi)definite system, adding a small ridge
/// to the diagonal when the Cholesky factorization fails.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    let scale = (a.trace().abs() / a.nrows().max(1) as f64).max(1.0);
    let mut jitter = 1e-10 * scale;
    for _ in 0..8 {
        let mut aj = a.clone();
        for i in 0..aj.nrows() {
            aj[(i, i)] += jitter;
        }
        if let Some(ch) = aj.cholesky() {
            return Some(ch.solve(b));
        }
        jitter *= 100.0;
    }
    None
}

/// Mean and population standard deviation of each column, ignoring NaN.
pub fn column_moments(x: &DMatrix<f64>) -> Vec<(f64, f64)> {
    (0..x.ncols())
        .map(|j| {
            let vals: Vec<f64> = x
                .column(j)
                .iter()
                .copied()
                .filter(|v| !v.is_nan())
                .collect();
            if vals.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            (m, var.sqrt())
        })
        .collect()
}
