//! Dense linear solves for the small systems arising in exact policy evaluation.

use crate::error::{MlreError, Result};
use crate::scalar::Scalar;

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    n: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![F::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.n + j] = v;
    }

    pub fn add_at(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.n + j] += v;
    }

    pub fn mul_vec(&self, x: &[F]) -> Vec<F> {
        (0..self.n)
            .map(|i| crate::scalar::dot(&self.data[i * self.n..(i + 1) * self.n], x))
            .collect()
    }
}

/// Solution of `a x = b` together with the sup-norm residual `‖a x − b‖∞`.
#[derive(Clone, Debug)]
pub struct Solution<F> {
    pub x: Vec<F>,
    pub residual: F,
}

/// Gaussian elimination with partial pivoting.
pub fn solve<F: Scalar>(a: &Matrix<F>, b: &[F]) -> Result<Solution<F>> {
    let n = a.n;
    if b.len() != n {
        return Err(MlreError::Contract(format!(
            "right-hand side has length {} for a {n}x{n} system",
            b.len()
        )));
    }
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                m[i * n + col]
                    .abs()
                    .partial_cmp(&m[j * n + col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("non-empty pivot range");
        if m[pivot * n + col].abs() <= F::min_positive_value() {
            return Err(MlreError::NonFinite(format!("singular linear system at column {col}")));
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            x.swap(col, pivot);
        }
        let p = m[col * n + col];
        for row in col + 1..n {
            let f = m[row * n + col] / p;
            if f == F::zero() {
                continue;
            }
            for k in col..n {
                let v = m[col * n + k];
                m[row * n + k] -= f * v;
            }
            let v = x[col];
            x[row] -= f * v;
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for k in row + 1..n {
            acc -= m[row * n + k] * x[k];
        }
        x[row] = acc / m[row * n + row];
    }
    let ax = a.mul_vec(&x);
    let residual = ax.iter().zip(b).fold(F::zero(), |r, (&u, &v)| r.max((u - v).abs()));
    if !residual.is_finite() {
        return Err(MlreError::NonFinite("linear solve residual".into()));
    }
    Ok(Solution { x, residual })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system_needing_pivot() {
        let mut a = Matrix::<f64>::zeros(3);
        let rows = [[0.0, 2.0, 1.0], [1.0, 1.0, 0.0], [3.0, 0.0, 1.0]];
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                a.set(i, j, v);
            }
        }
        let sol = solve(&a, &[5.0, 3.0, 6.0]).unwrap();
        let expected = a.mul_vec(&sol.x);
        assert!(sol.residual < 1e-12);
        for (e, b) in expected.iter().zip([5.0, 3.0, 6.0]) {
            assert!((e - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_is_reported() {
        let a = Matrix::<f64>::zeros(2);
        assert!(solve(&a, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let mut a = Matrix::<f32>::identity(2);
        a.set(0, 1, 0.5);
        let sol = solve(&a, &[1.5, 1.0]).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-6);
        assert!((sol.x[1] - 1.0).abs() < 1e-6);
    }
}
