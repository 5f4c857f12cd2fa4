//! C-SVM with an RBF kernel, trained by SMO with maximal-violating-pair selection.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Svm {
    pub gamma: f64,
    pub support_vectors: Array2<f64>,
    /// `alpha_i * y_i` for each support vector.
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    /// Final `max_{I_up} -yG - min_{I_low} -yG`, below `tol` on convergence.
    pub kkt_gap: f64,
    pub iterations: usize,
}

pub struct SmoSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub kkt_gap: f64,
    pub iterations: usize,
}

fn rbf(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

pub fn kernel_matrix(x: ArrayView2<'_, f64>, gamma: f64) -> Array2<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| rbf(x.row(i), x.row(j), gamma)).collect())
        .collect();
    let mut k = Array2::zeros((n, n));
    for (i, r) in rows.into_iter().enumerate() {
        k.row_mut(i).assign(&Array1::from(r));
    }
    k
}

/// Solve the dual `min 1/2 a'Qa - e'a, 0 <= a <= C, y'a = 0` with `Q_ij = y_i y_j K_ij`.
pub fn smo(k: &Array2<f64>, y: &[f64], c: f64, tol: f64, max_iter: usize) -> Result<SmoSolution> {
    let n = y.len();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iterations = 0;
    let (mut m_up, mut m_low);
    loop {
        let (mut i, mut j) = (usize::MAX, usize::MAX);
        m_up = f64::NEG_INFINITY;
        m_low = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && v > m_up {
                m_up = v;
                i = t;
            }
            if in_low(alpha[t], y[t]) && v < m_low {
                m_low = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || m_up - m_low < tol {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::Numerical(format!(
                "SMO did not converge in {max_iter} iterations (gap {})",
                m_up - m_low
            )));
        }
        iterations += 1;

        let a = (k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)]).max(TAU);
        let b = m_up - m_low;
        let mut step = b / a;
        // alpha_i += y_i * step, alpha_j -= y_j * step, both kept in [0, C]
        let (lo_i, hi_i) = if y[i] > 0.0 {
            (-alpha[i], c - alpha[i])
        } else {
            (alpha[i] - c, alpha[i])
        };
        let (lo_j, hi_j) = if y[j] > 0.0 {
            (alpha[j] - c, alpha[j])
        } else {
            (-alpha[j], c - alpha[j])
        };
        step = step.clamp(lo_i.max(lo_j), hi_i.min(hi_j));

        let old_i = alpha[i];
        let old_j = alpha[j];
        alpha[i] = (old_i + y[i] * step).clamp(0.0, c);
        alpha[j] = (old_j - y[j] * step).clamp(0.0, c);
        let di = alpha[i] - old_i;
        let dj = alpha[j] - old_j;
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k[(t, i)] * di + y[j] * k[(t, j)] * dj);
        }
    }

    let free: Vec<f64> = (0..n)
        .filter(|&t| alpha[t] > 0.0 && alpha[t] < c)
        .map(|t| -y[t] * grad[t])
        .collect();
    let bias = if free.is_empty() {
        if m_up.is_finite() && m_low.is_finite() {
            0.5 * (m_up + m_low)
        } else {
            0.0
        }
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    let kkt_gap = if m_up.is_finite() && m_low.is_finite() {
        m_up - m_low
    } else {
        0.0
    };
    Ok(SmoSolution {
        alpha,
        bias,
        kkt_gap,
        iterations,
    })
}

impl Svm {
    pub fn fit(x: ArrayView2<'_, f64>, y: &[u8], c: f64, gamma: f64, tol: f64) -> Result<Self> {
        let ys: Vec<f64> = y.iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect();
        let k = kernel_matrix(x, gamma);
        let max_iter = 10_000_000usize.max(100 * y.len());
        let sol = smo(&k, &ys, c, tol, max_iter)?;
        let sv: Vec<usize> = (0..y.len()).filter(|&i| sol.alpha[i] > 0.0).collect();
        Ok(Self {
            gamma,
            support_vectors: x.select(ndarray::Axis(0), &sv),
            dual_coef: sv.iter().map(|&i| sol.alpha[i] * ys[i]).collect(),
            bias: sol.bias,
            kkt_gap: sol.kkt_gap,
            iterations: sol.iterations,
        })
    }

    pub fn decision(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|row| {
                self.support_vectors
                    .rows()
                    .into_iter()
                    .zip(&self.dual_coef)
                    .map(|(sv, coef)| coef * rbf(sv, *row, self.gamma))
                    .sum::<f64>()
                    + self.bias
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn xor(n_per: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let centers = [(-1.0, -1.0, 0u8), (1.0, 1.0, 0), (-1.0, 1.0, 1), (1.0, -1.0, 1)];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &(cx, cy, label) in &centers {
            for _ in 0..n_per {
                x.push(cx + rng.random_range(-0.3..0.3));
                x.push(cy + rng.random_range(-0.3..0.3));
                y.push(label);
            }
        }
        (Array2::from_shape_vec((4 * n_per, 2), x).unwrap(), y)
    }

    #[test]
    fn xor_is_fit_exactly() {
        let (x, y) = xor(10, 3);
        let svm = Svm::fit(x.view(), &y, 10.0, 1.0, 1e-3).unwrap();
        let d = svm.decision(x.view());
        let correct = d.iter().zip(&y).filter(|(s, &l)| (**s > 0.0) == (l == 1)).count();
        assert_eq!(correct, y.len());
    }

    #[test]
    fn dual_feasibility_and_kkt() {
        let (x, y) = xor(15, 9);
        let ys: Vec<f64> = y.iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect();
        let k = kernel_matrix(x.view(), 0.5);
        let c = 2.0;
        let sol = smo(&k, &ys, c, 1e-3, 1_000_000).unwrap();
        assert!(sol.alpha.iter().all(|a| (0.0..=c).contains(a)));
        let balance: f64 = sol.alpha.iter().zip(&ys).map(|(a, y)| a * y).sum();
        assert!(balance.abs() < 1e-9);
        assert!(sol.kkt_gap < 1e-3);
    }
}
