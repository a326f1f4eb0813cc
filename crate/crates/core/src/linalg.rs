//! Banded solvers used by the time steppers.

use nalgebra::{DMatrix, DVector};

/// Solve a tridiagonal system in place (Thomas algorithm). `lower[i]`
/// couples row `i + 1` to column `i`, `upper[i]` couples row `i` to column
/// `i + 1`. `rhs` is overwritten with the solution; `scratch` must have the
/// same length as `diag`.
///
/// Returns the first row with a vanishing pivot on failure.
pub fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
    scratch: &mut [f64],
) -> Result<(), usize> {
    let n = diag.len();
    debug_assert!(lower.len() + 1 == n && upper.len() + 1 == n && rhs.len() == n);
    if n == 0 {
        return Ok(());
    }
    let mut pivot = diag[0];
    if pivot == 0.0 {
        return Err(0);
    }
    rhs[0] /= pivot;
    for i in 1..n {
        scratch[i - 1] = upper[i - 1] / pivot;
        pivot = diag[i] - lower[i - 1] * scratch[i - 1];
        if pivot == 0.0 {
            return Err(i);
        }
        rhs[i] = (rhs[i] - lower[i - 1] * rhs[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
    Ok(())
}

/// Block-tridiagonal matrix with (possibly) varying block sizes.
#[derive(Debug, Clone)]
pub struct BlockTridiagonal {
    pub diag: Vec<DMatrix<f64>>,
    /// `lower[i]` couples block row `i + 1` to block column `i`.
    pub lower: Vec<DMatrix<f64>>,
    /// `upper[i]` couples block row `i` to block column `i + 1`.
    pub upper: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn transpose(&self) -> BlockTridiagonal {
        BlockTridiagonal {
            diag: self.diag.iter().map(|d| d.transpose()).collect(),
            lower: self.upper.iter().map(|u| u.transpose()).collect(),
            upper: self.lower.iter().map(|l| l.transpose()).collect(),
        }
    }

    /// Block Thomas elimination. Returns the failing block row if a pivot
    /// block is singular.
    pub fn solve(&self, rhs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>, usize> {
        let n = self.diag.len();
        let mut inverses: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        let mut r: Vec<DVector<f64>> = Vec::with_capacity(n);
        inverses.push(self.diag[0].clone().try_inverse().ok_or(0usize)?);
        r.push(rhs[0].clone());
        for i in 1..n {
            let w = &self.lower[i - 1] * &inverses[i - 1];
            let d = &self.diag[i] - &w * &self.upper[i - 1];
            r.push(&rhs[i] - &w * &r[i - 1]);
            inverses.push(d.try_inverse().ok_or(i)?);
        }
        let mut x: Vec<DVector<f64>> = vec![DVector::zeros(0); n];
        x[n - 1] = &inverses[n - 1] * &r[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = &inverses[i] * (&r[i] - &self.upper[i] * &x[i + 1]);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn thomas_solves_poisson_matrix() {
        let n = 6;
        let lower = vec![-1.0; n - 1];
        let upper = vec![-1.0; n - 1];
        let diag = vec![2.0; n];
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0).sin()).collect();
        let mut rhs: Vec<f64> = (0..n)
            .map(|i| {
                let mut v = 2.0 * x_true[i];
                if i > 0 {
                    v -= x_true[i - 1];
                }
                if i + 1 < n {
                    v -= x_true[i + 1];
                }
                v
            })
            .collect();
        let mut scratch = vec![0.0; n];
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs, &mut scratch).unwrap();
        for i in 0..n {
            assert_relative_eq!(rhs[i], x_true[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn zero_pivot_is_reported() {
        let mut rhs = vec![1.0, 1.0];
        let mut scratch = vec![0.0; 2];
        assert_eq!(
            solve_tridiagonal(&[1.0], &[0.0, 1.0], &[1.0], &mut rhs, &mut scratch),
            Err(0)
        );
    }

    #[test]
    fn block_solver_matches_dense_solve_and_transpose() {
        let sizes = [2usize, 3, 3, 2];
        let mut seed = 1.0f64;
        let mut next = || {
            seed = (seed * 16807.0) % 2147483647.0;
            seed / 2147483647.0 - 0.5
        };
        let diag: Vec<DMatrix<f64>> = sizes
            .iter()
            .map(|&s| DMatrix::from_fn(s, s, |i, j| if i == j { 4.0 } else { 0.0 }) + DMatrix::from_fn(s, s, |_, _| next()))
            .collect();
        let lower: Vec<DMatrix<f64>> = (1..sizes.len())
            .map(|i| DMatrix::from_fn(sizes[i], sizes[i - 1], |_, _| next()))
            .collect();
        let upper: Vec<DMatrix<f64>> = (0..sizes.len() - 1)
            .map(|i| DMatrix::from_fn(sizes[i], sizes[i + 1], |_, _| next()))
            .collect();
        let bt = BlockTridiagonal { diag, lower, upper };
        let total: usize = sizes.iter().sum();
        let offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let mut dense = DMatrix::zeros(total, total);
        for i in 0..sizes.len() {
            dense
                .view_mut((offsets[i], offsets[i]), (sizes[i], sizes[i]))
                .copy_from(&bt.diag[i]);
            if i > 0 {
                dense
                    .view_mut((offsets[i], offsets[i - 1]), (sizes[i], sizes[i - 1]))
                    .copy_from(&bt.lower[i - 1]);
                dense
                    .view_mut((offsets[i - 1], offsets[i]), (sizes[i - 1], sizes[i]))
                    .copy_from(&bt.upper[i - 1]);
            }
        }
        let rhs_full = DVector::from_fn(total, |i, _| (i as f64 * 0.37).cos());
        let rhs: Vec<DVector<f64>> = (0..sizes.len())
            .map(|i| rhs_full.rows(offsets[i], sizes[i]).into_owned())
            .collect();
        for (matrix, system) in [(dense.clone(), bt.clone()), (dense.transpose(), bt.transpose())] {
            let expect = matrix.lu().solve(&rhs_full).unwrap();
            let got = system.solve(&rhs).unwrap();
            for i in 0..sizes.len() {
                for a in 0..sizes[i] {
                    assert_relative_eq!(got[i][a], expect[offsets[i] + a], epsilon = 1e-12);
                }
            }
        }
    }
}
