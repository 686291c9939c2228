use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::matrix::Matrix;

/// Ridge added to the normal equations when they are not positive definite.
pub const RIDGE: f64 = 1e-6;

/// Per-channel autoregressive predictor without intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAr {
    pub order: usize,
    /// One row of `order` coefficients per channel; column `k` multiplies
    /// the value `k + 1` steps back.
    pub coefs: Matrix,
}

/// Solve `a x = b` for symmetric positive-definite `a` (row-major n×n).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= scale * 1e-12 {
                    return None;
                }
                l[i * n + i] = libm::sqrt(s);
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Some(x)
}

fn fit_channel(series: &[f64], p: usize) -> Vec<f64> {
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for t in p..series.len() {
        for i in 0..p {
            let xi = series[t - 1 - i];
            xty[i] += xi * series[t];
            for j in 0..p {
                xtx[i * p + j] += xi * series[t - 1 - j];
            }
        }
    }
    cholesky_solve(&xtx, &xty, p).unwrap_or_else(|| {
        for i in 0..p {
            xtx[i * p + i] += RIDGE;
        }
        cholesky_solve(&xtx, &xty, p).unwrap_or_else(|| vec![0.0; p])
    })
}

impl LinearAr {
    pub fn fit(train: &Matrix, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(invalid!("autoregressive order must be positive"));
        }
        if train.rows() <= order {
            return Err(invalid!("train split of {} rows is too short for order {order}", train.rows()));
        }
        let c = train.cols();
        let mut coefs = Matrix::zeros(c, order);
        for ch in 0..c {
            let phi = fit_channel(&train.column(ch), order);
            coefs.row_mut(ch).copy_from_slice(&phi);
        }
        Ok(Self { order, coefs })
    }

    pub fn channels(&self) -> usize {
        self.coefs.rows()
    }

    pub fn param_count(&self) -> usize {
        self.coefs.rows() * self.coefs.cols()
    }

    /// Channel-averaged coefficients replicated over `channels` channels.
    pub fn pooled(&self, channels: usize) -> Self {
        let c = self.coefs.rows().max(1) as f64;
        let mean: Vec<f64> = (0..self.order).map(|k| self.coefs.column(k).iter().sum::<f64>() / c).collect();
        Self { order: self.order, coefs: Matrix::from_fn(channels, self.order, |_, k| mean[k]) }
    }

    /// Mean absolute one-step residual per test row; the first `order` rows
    /// use the tail of `context` as history.
    pub fn score(&self, context: &Matrix, test: &Matrix) -> Result<Vec<f64>> {
        let c = self.channels();
        if test.cols() != c || context.cols() != c {
            return Err(shape_err!("model has {c} channels, context {} and test {}", context.cols(), test.cols()));
        }
        let p = self.order;
        if context.rows() < p {
            return Err(invalid!("context of {} rows is shorter than order {p}", context.rows()));
        }
        let tail = context.rows() - p;
        let at = |t: usize, ch: usize| if t < p { context.get(tail + t, ch) } else { test.get(t - p, ch) };
        let mut out = Vec::with_capacity(test.rows());
        for t in 0..test.rows() {
            let mut acc = 0.0;
            for ch in 0..c {
                let phi = self.coefs.row(ch);
                let pred: f64 = (0..p).map(|k| phi[k] * at(t + p - 1 - k, ch)).sum();
                acc += (test.get(t, ch) - pred).abs();
            }
            out.push(acc / c as f64);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Least squares via Gaussian elimination with partial pivoting on the
    /// normal equations.
    fn oracle(series: &[f64], p: usize) -> Vec<f64> {
        let mut a = vec![vec![0.0; p + 1]; p];
        for t in p..series.len() {
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += series[t - 1 - i] * series[t - 1 - j];
                }
                a[i][p] += series[t - 1 - i] * series[t];
            }
        }
        for col in 0..p {
            let piv = (col..p).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..p {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..=p {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        (0..p).map(|i| a[i][p] / a[i][i]).collect()
    }

    #[test]
    fn recovers_ar1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = vec![0.0; 4000];
        for t in 1..x.len() {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[t] = 0.5 * x[t - 1] + e;
        }
        let m = Matrix::from_vec(x.len(), 1, x.clone()).unwrap();
        let ar = LinearAr::fit(&m, 8).unwrap();
        let expect = oracle(&x, 8);
        for (a, b) in ar.coefs.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((ar.coefs.get(0, 0) - 0.5).abs() < 0.05);
        assert!(ar.coefs.row(0)[1..].iter().all(|v| v.abs() < 0.05));
        assert_eq!(ar.param_count(), 8);
    }

    #[test]
    fn deterministic_ar1_and_constant_have_zero_residual() {
        let x: Vec<f64> = (0..60).map(|t| libm::pow(0.5, t as f64)).collect();
        let m = Matrix::from_vec(60, 1, x).unwrap();
        let ar = LinearAr::fit(&m.slice_rows(0, 40), 8).unwrap();
        let s = ar.score(&m.slice_rows(0, 40), &m.slice_rows(40, 60)).unwrap();
        assert!(s.iter().all(|&v| v < 1e-9), "{s:?}");

        let c = Matrix::from_fn(50, 2, |_, j| 3.0 + j as f64);
        let ar = LinearAr::fit(&c, 8).unwrap();
        let s = ar.score(&c, &c).unwrap();
        assert!(s.iter().all(|&v| (0.0..1e-5).contains(&v)), "{s:?}");
    }

    #[test]
    fn pooled_and_errors() {
        let m = Matrix::from_fn(30, 3, |i, j| ((i * (j + 1)) as f64).sin());
        let ar = LinearAr::fit(&m, 4).unwrap();
        let p = ar.pooled(5);
        assert_eq!((p.coefs.rows(), p.param_count()), (5, 20));
        assert!(LinearAr::fit(&m.slice_rows(0, 4), 4).is_err());
        assert!(ar.score(&m, &Matrix::zeros(3, 2)).is_err());
    }
}
