use ndarray::{Array1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub const VARIANCE_FLOOR: f64 = 1e-9;

/// Gaussian naive Bayes with per-class means, population variances and priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNb {
    pub means: [Array1<f64>; 2],
    pub variances: [Array1<f64>; 2],
    pub log_priors: [f64; 2],
}

impl GaussianNb {
    pub fn fit(x: ArrayView2<'_, f64>, y: &[u8]) -> Self {
        let n = y.len() as f64;
        let stats = |class: u8| {
            let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
            let xs = x.select(Axis(0), &rows);
            let mean = xs.mean_axis(Axis(0)).expect("class present");
            let var = xs.var_axis(Axis(0), 0.0).mapv(|v| v.max(VARIANCE_FLOOR));
            (mean, var, (rows.len() as f64 / n).ln())
        };
        let (m0, v0, p0) = stats(0);
        let (m1, v1, p1) = stats(1);
        Self {
            means: [m0, m1],
            variances: [v0, v1],
            log_priors: [p0, p1],
        }
    }

    fn log_joint(&self, class: usize, row: ndarray::ArrayView1<'_, f64>) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut s = self.log_priors[class];
        for ((x, m), v) in row.iter().zip(&self.means[class]).zip(&self.variances[class]) {
            s -= 0.5 * (ln_2pi + v.ln() + (x - m) * (x - m) / v);
        }
        s
    }

    /// Log-posterior difference `log p(1|x) - log p(0|x)`.
    pub fn decision(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| self.log_joint(1, r) - self.log_joint(0, r))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn closed_form_statistics() {
        let x = Array2::from_shape_vec((5, 2), vec![1., 0., 3., 0., 5., 0., 10., 1., 12., 1.]).unwrap();
        let y = [0, 0, 0, 1, 1];
        let nb = GaussianNb::fit(x.view(), &y);
        assert_eq!(nb.means[0].to_vec(), vec![3.0, 0.0]);
        assert_eq!(nb.means[1].to_vec(), vec![11.0, 1.0]);
        assert!((nb.variances[0][0] - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(nb.variances[0][1], VARIANCE_FLOOR);
        assert_eq!(nb.variances[1][0], 1.0);
        assert!((nb.log_priors[1] - (0.4f64).ln()).abs() < 1e-15);
    }
}
